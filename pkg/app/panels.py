"""
Three-panel canvas geometry.

Canvas layout, left to right: reference G | target P | fit F, each H×W, so the canvas is 3×H×3W (channels first).
Tokens are ordered T (text) → G → P → F, and within a panel row-major over the (H/patch)×(W/patch) grid.
This ordering is the one source of truth shared with app.dit.patchify.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any

import torch
import torch.nn.functional as F

from common.errors import ConfigError, ValidationError

PANEL_NAMES = ("G", "P", "F")
NUM_PANELS = 3


@dataclass(frozen=True)
class PanelLayout:
    H: int = 64
    W: int = 48
    patch: int = 4
    text_tokens: int = 8

    def __post_init__(self) -> None:
        if self.patch <= 0 or self.H <= 0 or self.W <= 0:
            raise ConfigError(f"layout sizes must be positive: {self}")
        if self.H % self.patch != 0 or self.W % self.patch != 0:
            raise ConfigError(f"H={self.H}, W={self.W} must be divisible by patch={self.patch}")
        if self.text_tokens < 1:
            raise ConfigError(f"text_tokens must be >= 1, got {self.text_tokens}")

    @property
    def grid_h(self) -> int:
        return self.H // self.patch

    @property
    def grid_w(self) -> int:
        return self.W // self.patch

    @property
    def tokens_per_panel(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def total_keys(self) -> int:
        return self.text_tokens + NUM_PANELS * self.tokens_per_panel

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "PanelLayout":
        return cls(H=int(d["H"]), W=int(d["W"]), patch=int(d["patch"]), text_tokens=int(d["text_tokens"]))


@dataclass(frozen=True)
class TokenRanges:
    T: tuple[int, int]
    G: tuple[int, int]
    P: tuple[int, int]
    F: tuple[int, int]

    def slice(self, name: str) -> slice:
        lo, hi = getattr(self, name)
        return slice(lo, hi)

    def as_list(self) -> list[tuple[str, tuple[int, int]]]:
        return [("T", self.T), ("G", self.G), ("P", self.P), ("F", self.F)]


def token_ranges(layout: PanelLayout) -> TokenRanges:
    l1 = layout.text_tokens
    l = layout.tokens_per_panel
    return TokenRanges(
        T=(0, l1),
        G=(l1, l1 + l),
        P=(l1 + l, l1 + 2 * l),
        F=(l1 + 2 * l, l1 + 3 * l),
    )


def _check_panel(name: str, image: torch.Tensor, shape: tuple[int, ...]) -> None:
    if tuple(image.shape[-3:]) != shape[-3:] or image.shape[:-3] != shape[:-3]:
        raise ValidationError(f"panel '{name}' has shape {tuple(image.shape)}, expected {shape}")


def concat_panels(ref: torch.Tensor, target: torch.Tensor, third: torch.Tensor) -> torch.Tensor:
    """(…, C, H, W) ×3 → (…, C, H, 3W). Shapes are checked against the reference panel."""
    if ref.ndim < 3:
        raise ValidationError(f"panel 'ref' must be (..., C, H, W), got {tuple(ref.shape)}")
    shape = tuple(ref.shape)
    _check_panel("target", target, shape)
    _check_panel("third", third, shape)
    return torch.cat([ref, target, third], dim=-1)


def split_panels(canvas: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    if canvas.ndim < 3 or canvas.shape[-1] % NUM_PANELS != 0:
        raise ValidationError(f"canvas width must be 3W, got shape {tuple(canvas.shape)}")
    W = canvas.shape[-1] // NUM_PANELS
    return canvas[..., 0:W], canvas[..., W : 2 * W], canvas[..., 2 * W : 3 * W]


def blank_panel(layout: PanelLayout, channels: int = 3, *, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """BLK: the all-zero panel, identical to what apply_mask leaves in the fit panel."""
    return torch.zeros(channels, layout.H, layout.W, dtype=dtype)


def build_inpaint_mask(layout: PanelLayout, *, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """1×H×3W mask, ones on the fit panel only. No garment mask appears anywhere."""
    mask = torch.zeros(1, layout.H, NUM_PANELS * layout.W, dtype=dtype)
    mask[..., 2 * layout.W :] = 1.0
    return mask


def apply_mask(image: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """cond = I·(1−M), mask broadcast over channels."""
    if mask.shape[-2:] != image.shape[-2:] or (mask.ndim >= 3 and mask.shape[-3] != 1):
        raise ValidationError(f"mask shape {tuple(mask.shape)} does not match image {tuple(image.shape)}")
    return image * (1.0 - mask)


def mask_to_token_weights(mask: torch.Tensor, layout: PanelLayout) -> torch.Tensor:
    """
    Per-patch area average of a single-panel mask (…, H, W), flattened row-major over the patch grid → (…, l).
    Fractional weights keep mean(weights) == mean(mask).
    """
    if mask.ndim < 2 or tuple(mask.shape[-2:]) != (layout.H, layout.W):
        raise ValidationError(f"mask shape {tuple(mask.shape)} does not match panel {layout.H}x{layout.W}")
    lead = mask.shape[:-2]
    pooled = F.avg_pool2d(mask.reshape(-1, 1, layout.H, layout.W), kernel_size=layout.patch, stride=layout.patch)
    return pooled.reshape(*lead, layout.tokens_per_panel)
