"""
Toy diffusion transformer over the three-panel canvas.

Each image token carries (noisy patch ‖ condition patch ‖ mask patch); l1 learned prompt tokens are prepended,
so the joint sequence is T → G → P → F and every layer's attention runs over all of it.
The attention probabilities of the F queries can be recorded for the focus loss.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Callable

import torch
import torch.nn as nn

from app.panels import (
    NUM_PANELS,
    PanelLayout,
    TokenRanges,
    concat_panels,
    split_panels,
    token_ranges,
)
from common.errors import NumericalError, ValidationError
from common.seeding import gaussian

DEFAULT_SAMPLING_STEPS = 30


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    heads: int = 4
    layers: int = 6
    time_dim: int = 128
    mlp_ratio: float = 4.0
    pos_embed: bool = True
    layout: PanelLayout = field(default_factory=PanelLayout)

    def __post_init__(self) -> None:
        if self.d_model % self.heads != 0:
            raise ValidationError(f"d_model ({self.d_model}) must be divisible by heads ({self.heads})")
        if self.d_model % 4 != 0:
            raise ValidationError(f"d_model ({self.d_model}) must be divisible by 4 for the 2-D positional encoding")
        if self.time_dim % 2 != 0:
            raise ValidationError(f"time_dim must be even, got {self.time_dim}")
        if self.layers < 1:
            raise ValidationError(f"layers must be >= 1, got {self.layers}")

    @property
    def patch_dim(self) -> int:
        return 3 * self.layout.patch * self.layout.patch

    @property
    def mask_dim(self) -> int:
        return self.layout.patch * self.layout.patch

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["layout"] = self.layout.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__ if f != "layout"}
        kwargs = {k: v for k, v in d.items() if k in known}
        return cls(layout=PanelLayout.from_dict(d["layout"]), **kwargs)

    @classmethod
    def tiny(cls) -> "ModelConfig":
        """Two layers, d_model=16, 8×8 panels: small enough for finite differences."""
        return cls(d_model=16, heads=2, layers=2, time_dim=16, mlp_ratio=2.0, layout=PanelLayout(H=8, W=8, patch=4, text_tokens=2))


@dataclass
class FlowSample:
    z_t: torch.Tensor
    t: torch.Tensor
    u: torch.Tensor
    eps: torch.Tensor


@dataclass
class AttentionRecord:
    """
    Post-softmax attention rows of the F queries, one tensor per layer shaped (B, heads, n, L)
    with keys ordered T | G | P | F.
    """

    rows: list[torch.Tensor]
    ranges: TokenRanges

    @property
    def layers(self) -> int:
        return len(self.rows)

    def block(self, layer: int, name: str) -> torch.Tensor:
        """One of F_qT_k, F_qG_k, F_qP_k, F_qF_k for a layer: (B, heads, n, width)."""
        lo, hi = getattr(self.ranges, name)
        return self.rows[layer][..., lo:hi]

    def stacked(self, name: str) -> torch.Tensor:
        """(layers, B, heads, n, width)"""
        lo, hi = getattr(self.ranges, name)
        return torch.stack([r[..., lo:hi] for r in self.rows], dim=0)


# ---- tokens <-> canvas -------------------------------------------------------


def _patchify_panel(x: torch.Tensor, patch: int) -> torch.Tensor:
    B, C, H, W = x.shape
    gh, gw = H // patch, W // patch
    x = x.reshape(B, C, gh, patch, gw, patch)
    x = x.permute(0, 2, 4, 3, 5, 1)  # B, gh, gw, py, px, C
    return x.reshape(B, gh * gw, patch * patch * C)


def _unpatchify_panel(tokens: torch.Tensor, channels: int, H: int, W: int, patch: int) -> torch.Tensor:
    B = tokens.shape[0]
    gh, gw = H // patch, W // patch
    x = tokens.reshape(B, gh, gw, patch, patch, channels)
    x = x.permute(0, 5, 1, 3, 2, 4)  # B, C, gh, py, gw, px
    return x.reshape(B, channels, H, W)


def patchify(canvas: torch.Tensor, patch: int = 4) -> torch.Tensor:
    """
    (…, C, H, 3W) canvas → (…, 3l, patch·patch·C) tokens: G panel first, then P, then F,
    each row-major over its patch grid, each token flattened as (py, px, C).
    """
    if canvas.ndim < 3 or canvas.shape[-1] % NUM_PANELS != 0:
        raise ValidationError(f"canvas must be (..., C, H, 3W), got {tuple(canvas.shape)}")
    C, H, W3 = canvas.shape[-3:]
    if H % patch != 0 or (W3 // NUM_PANELS) % patch != 0:
        raise ValidationError(f"canvas {H}x{W3} is not divisible into {patch}x{patch} patches per panel")
    lead = canvas.shape[:-3]
    flat = canvas.reshape(-1, C, H, W3)
    tokens = torch.cat([_patchify_panel(p, patch) for p in split_panels(flat)], dim=1)
    return tokens.reshape(*lead, tokens.shape[1], tokens.shape[2])


def unpatchify(tokens: torch.Tensor, layout: PanelLayout, channels: int = 3) -> torch.Tensor:
    l = layout.tokens_per_panel
    if tokens.ndim < 2 or tokens.shape[-2] != NUM_PANELS * l or tokens.shape[-1] != channels * layout.patch**2:
        raise ValidationError(f"tokens {tuple(tokens.shape)} do not match layout {layout}")
    lead = tokens.shape[:-2]
    flat = tokens.reshape(-1, NUM_PANELS * l, tokens.shape[-1])
    panels = [
        _unpatchify_panel(flat[:, i * l : (i + 1) * l], channels, layout.H, layout.W, layout.patch)
        for i in range(NUM_PANELS)
    ]
    canvas = concat_panels(*panels)
    return canvas.reshape(*lead, channels, layout.H, NUM_PANELS * layout.W)


# ---- flow matching -----------------------------------------------------------


def flow_pair(x_data: torch.Tensor, noise_seed: int, t: float | torch.Tensor) -> FlowSample:
    """z_t = (1−t)·x + t·ε, u = ε − x, with ε drawn from the seeded stream."""
    t_tensor = torch.as_tensor(t, dtype=x_data.dtype)
    if t_tensor.numel() == 0 or bool(((t_tensor < 0) | (t_tensor > 1)).any()):
        raise ValidationError(f"t must lie in [0, 1], got {t}")
    eps = gaussian(tuple(x_data.shape), noise_seed, dtype=x_data.dtype)
    tb = t_tensor.reshape(t_tensor.shape + (1,) * (x_data.ndim - t_tensor.ndim))
    return FlowSample(z_t=(1 - tb) * x_data + tb * eps, t=t_tensor, u=eps - x_data, eps=eps)


# ---- model -------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=t.dtype) / half)
    args = (t.reshape(-1, 1) * 1000.0) * freqs.reshape(1, -1)
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def canvas_positional_encoding(layout: PanelLayout, d_model: int) -> torch.Tensor:
    """
    Fixed 2-D sin/cos per image token: half the channels encode the row, half the column
    counted across the whole canvas, so the panel is part of the position.
    Returns (3l, d_model) in token order.
    """
    gh, gw = layout.grid_h, layout.grid_w
    quarter = d_model // 4
    omega = 1.0 / (10000.0 ** (torch.arange(quarter, dtype=torch.float64) / quarter))

    rows, cols = [], []
    for panel in range(NUM_PANELS):
        r, c = torch.meshgrid(torch.arange(gh), torch.arange(gw), indexing="ij")
        rows.append(r.reshape(-1))
        cols.append(c.reshape(-1) + panel * gw)
    row = torch.cat(rows).to(torch.float64)[:, None] * omega[None, :]
    col = torch.cat(cols).to(torch.float64)[:, None] * omega[None, :]
    pe = torch.cat([torch.sin(row), torch.cos(row), torch.sin(col), torch.cos(col)], dim=1)
    return pe.to(torch.float32)


def _modulate(x: torch.Tensor, shift: torch.Tensor, scale: torch.Tensor) -> torch.Tensor:
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class RecordingAttention(nn.Module):
    """Multi-head self-attention that can hand back its post-softmax probabilities."""

    def __init__(self, d_model: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d_model // heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, N, D = x.shape
        qkv = self.qkv(x).reshape(B, N, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)  # each (B, heads, N, head_dim)

        # explicit softmax (no fused kernel) so recorded and unrecorded passes are identical
        attn = torch.softmax((q @ k.transpose(-2, -1)) * self.scale, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, N, D)
        return self.proj(out), attn


class Block(nn.Module):
    def __init__(self, d_model: int, heads: int, mlp_ratio: float):
        super().__init__()
        hidden = int(d_model * mlp_ratio)
        self.norm1 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.attn = RecordingAttention(d_model, heads)
        self.norm2 = nn.LayerNorm(d_model, elementwise_affine=False, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(d_model, hidden), nn.GELU(approximate="tanh"), nn.Linear(hidden, d_model))
        self.ada = nn.Sequential(nn.SiLU(), nn.Linear(d_model, 6 * d_model))

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = self.ada(emb).chunk(6, dim=-1)
        h, attn = self.attn(_modulate(self.norm1(x), shift_a, scale_a))
        x = x + gate_a.unsqueeze(1) * h
        x = x + gate_m.unsqueeze(1) * self.mlp(_modulate(self.norm2(x), shift_m, scale_m))
        return x, attn


class FitTransformer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        layout = config.layout
        d = config.d_model
        self.ranges = token_ranges(layout)

        self.patch_in = nn.Linear(2 * config.patch_dim + config.mask_dim, d)
        self.text_tokens = nn.Parameter(torch.zeros(layout.text_tokens, d))
        self.panel_embed = nn.Embedding(NUM_PANELS, d)
        pe = canvas_positional_encoding(layout, d) if config.pos_embed else torch.zeros(NUM_PANELS * layout.tokens_per_panel, d)
        self.register_buffer("pos", pe, persistent=False)
        self.register_buffer(
            "panel_ids",
            torch.arange(NUM_PANELS).repeat_interleave(layout.tokens_per_panel),
            persistent=False,
        )

        self.time_mlp = nn.Sequential(nn.Linear(config.time_dim, d), nn.SiLU(), nn.Linear(d, d))
        self.blocks = nn.ModuleList([Block(d, config.heads, config.mlp_ratio) for _ in range(config.layers)])
        self.norm_out = nn.LayerNorm(d, elementwise_affine=False, eps=1e-6)
        self.ada_out = nn.Sequential(nn.SiLU(), nn.Linear(d, 2 * d))
        self.head = nn.Linear(d, config.patch_dim)

    def forward(
        self,
        z_tokens: torch.Tensor,
        t: torch.Tensor | float,
        cond: torch.Tensor,
        mask: torch.Tensor,
        record: bool = False,
    ) -> tuple[torch.Tensor, AttentionRecord | None]:
        """
        z_tokens: (B, 3l, 48) noisy tokens; t: scalar or (B,); cond: (B, 3, H, 3W); mask: (1|B, 1, H, 3W).
        Returns velocity tokens (B, 3l, 48) and, when record=True, the F-query attention rows of every layer.
        """
        cfg = self.config
        layout = cfg.layout
        n_img = NUM_PANELS * layout.tokens_per_panel
        if z_tokens.ndim != 3 or z_tokens.shape[1:] != (n_img, cfg.patch_dim):
            raise ValidationError(f"z_tokens shape {tuple(z_tokens.shape)} does not match config (B, {n_img}, {cfg.patch_dim})")
        B = z_tokens.shape[0]
        expected_canvas = (3, layout.H, NUM_PANELS * layout.W)
        if cond.ndim != 4 or tuple(cond.shape[1:]) != expected_canvas or cond.shape[0] != B:
            raise ValidationError(f"cond shape {tuple(cond.shape)} does not match (B, {expected_canvas})")
        if mask.ndim != 4 or tuple(mask.shape[1:]) != (1, layout.H, NUM_PANELS * layout.W):
            raise ValidationError(f"mask shape {tuple(mask.shape)} does not match (B, 1, H, 3W)")

        t_vec = torch.as_tensor(t, dtype=z_tokens.dtype).reshape(-1).expand(B)
        for name, tensor in (("z_tokens", z_tokens), ("t", t_vec), ("cond", cond), ("mask", mask)):
            if not bool(torch.isfinite(tensor).all()):
                raise NumericalError(f"non-finite values in model input '{name}'")

        cond_tokens = patchify(cond, layout.patch)
        mask_tokens = patchify(mask.expand(B, -1, -1, -1), layout.patch)
        img = self.patch_in(torch.cat([z_tokens, cond_tokens, mask_tokens], dim=-1))
        img = img + self.pos.to(img.dtype) + self.panel_embed(self.panel_ids)

        text = self.text_tokens.unsqueeze(0).expand(B, -1, -1)
        x = torch.cat([text, img], dim=1)
        emb = self.time_mlp(timestep_embedding(t_vec, cfg.time_dim))

        f_rows = self.ranges.slice("F")
        recorded: list[torch.Tensor] = []
        for block in self.blocks:
            x, attn = block(x, emb)
            if record:
                recorded.append(attn[:, :, f_rows, :])

        shift, scale = self.ada_out(emb).chunk(2, dim=-1)
        x = _modulate(self.norm_out(x), shift, scale)
        v = self.head(x[:, layout.text_tokens :])

        rec = AttentionRecord(rows=recorded, ranges=self.ranges) if record else None
        return v, rec


def init_parameters(model: FitTransformer, seed: int) -> FitTransformer:
    """
    Seeded initialisation, independent of torch's global RNG:
    weights ~ N(0, 1/fan_in), biases 0; embeddings, attention projections and the modulation/output layers
    ~ N(0, 0.02²) so an untrained model attends almost uniformly.
    """
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif (
                name in ("text_tokens", "panel_embed.weight")
                or ".ada" in name
                or ".attn." in name
                or name.startswith(("ada_out", "head"))
            ):
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) * 0.02)
            else:
                fan_in = p.shape[1] if p.ndim == 2 else p.numel()
                p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype) / math.sqrt(fan_in))
    return model


def build_model(config: ModelConfig, seed: int = 0, dtype: torch.dtype = torch.float32) -> FitTransformer:
    model = FitTransformer(config)
    init_parameters(model, seed)
    return model.to(dtype)


def velocity(
    model: FitTransformer,
    z: torch.Tensor,
    t: torch.Tensor | float,
    cond: torch.Tensor,
    mask: torch.Tensor,
    record: bool = False,
) -> tuple[torch.Tensor, AttentionRecord | None]:
    """Canvas-level wrapper: (B, 3, H, 3W) in, (B, 3, H, 3W) velocity out."""
    layout = model.config.layout
    v_tokens, rec = model(patchify(z, layout.patch), t, cond, mask, record=record)
    return unpatchify(v_tokens, layout), rec


def integrate_euler(velocity_fn: Callable[[torch.Tensor, float], torch.Tensor], z: torch.Tensor, steps: int) -> torch.Tensor:
    """Uniform Euler steps from t=1 down to t=0: z ← z − Δ·v(z, t), Δ = 1/steps."""
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    dt = 1.0 / steps
    for k in range(steps, 0, -1):
        z = z - dt * velocity_fn(z, k / steps)
    return z


@torch.no_grad()
def euler_sample(
    model: FitTransformer,
    cond: torch.Tensor,
    mask: torch.Tensor,
    steps: int = DEFAULT_SAMPLING_STEPS,
    seed: int = 0,
) -> torch.Tensor:
    """Starts from a seeded Gaussian canvas at t=1 and returns the t=0 canvas clipped to [0, 1]."""
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    model.eval()
    dtype = next(model.parameters()).dtype
    z = gaussian(tuple(cond.shape), seed, dtype=dtype)
    cond = cond.to(dtype)
    mask = mask.to(dtype)

    def fn(zk: torch.Tensor, t: float) -> torch.Tensor:
        v, _ = velocity(model, zk, t, cond, mask)
        return v

    return integrate_euler(fn, z, steps).clamp(0.0, 1.0)
