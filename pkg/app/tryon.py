from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from app.dit import DEFAULT_SAMPLING_STEPS, FitTransformer, euler_sample, patchify
from app.panels import PanelLayout, apply_mask, blank_panel, build_inpaint_mask, concat_panels, split_panels
from common.errors import ValidationError
from common.imageio import to_array, to_tensor
from common.seeding import gaussian


def _check_image(name: str, image: np.ndarray, layout: PanelLayout) -> None:
    if image.shape != (layout.H, layout.W, 3):
        raise ValidationError(f"{name} image has shape {image.shape}, checkpoint expects {(layout.H, layout.W, 3)}")
    if not np.isfinite(image).all() or image.min() < 0.0 or image.max() > 1.0:
        raise ValidationError(f"{name} image values must be finite and within [0, 1]")


def build_condition(ref: torch.Tensor, target: torch.Tensor, layout: PanelLayout) -> tuple[torch.Tensor, torch.Tensor]:
    """
    cond = Concat(ref, target, BLK) and the fixed fit-panel mask.
    This is the only place model inputs are assembled; no garment mask of either person enters it.
    """
    canvas = concat_panels(ref, target, blank_panel(layout, dtype=ref.dtype).expand_as(ref))
    mask = build_inpaint_mask(layout, dtype=ref.dtype)
    return apply_mask(canvas, mask), mask


def try_on(
    model: FitTransformer,
    ref_image: np.ndarray,
    target_image: np.ndarray,
    steps: int = DEFAULT_SAMPLING_STEPS,
    seed: int = 0,
) -> np.ndarray:
    """Samples the canvas and returns its fit panel, H×W×3 in [0,1]. The sampled G/P panels are discarded."""
    return try_on_canvas(model, ref_image, target_image, steps=steps, seed=seed)[2]


def try_on_canvas(
    model: FitTransformer,
    ref_image: np.ndarray,
    target_image: np.ndarray,
    steps: int = DEFAULT_SAMPLING_STEPS,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All three sampled panels (G, P, F) as H×W×3 arrays; G/P are only useful as a drift diagnostic."""
    layout = model.config.layout
    _check_image("reference", ref_image, layout)
    _check_image("target", target_image, layout)

    cond, mask = build_condition(to_tensor(ref_image), to_tensor(target_image), layout)
    canvas = euler_sample(model, cond.unsqueeze(0), mask.unsqueeze(0), steps=steps, seed=seed)[0]
    g, p, f = split_panels(canvas)
    return to_array(g), to_array(p), to_array(f)


def reconstruction_mae(
    canvas: tuple[np.ndarray, np.ndarray, np.ndarray], ref_image: np.ndarray, target_image: np.ndarray
) -> tuple[float, float]:
    """Mean absolute error of the sampled G and P panels against the images they were conditioned on."""
    g, p, _ = canvas
    return float(np.abs(g - ref_image).mean()), float(np.abs(p - target_image).mean())


@dataclass
class AttentionMaps:
    """Per head, F→G and F→P attention averaged over F queries, shaped (heads, H/patch, W/patch)."""

    to_ref: np.ndarray
    to_target: np.ndarray
    block_mass: dict[str, np.ndarray]  # name → (heads,) mean row mass per key block


@torch.no_grad()
def attention_maps(
    model: FitTransformer,
    ref_image: np.ndarray,
    target_image: np.ndarray,
    layer: int,
    t: float = 1.0,
    seed: int = 0,
) -> AttentionMaps:
    """One recorded forward at time t (default: the first sampling step) from a seeded noise canvas."""
    cfg = model.config
    layout = cfg.layout
    if not 0 <= layer < cfg.layers:
        raise ValidationError(f"layer index {layer} out of range [0, {cfg.layers})")
    _check_image("reference", ref_image, layout)
    _check_image("target", target_image, layout)

    model.eval()
    cond, mask = build_condition(to_tensor(ref_image), to_tensor(target_image), layout)
    cond = cond.unsqueeze(0)
    z = gaussian(tuple(cond.shape), seed)
    _, rec = model(patchify(z, layout.patch), t, cond, mask.unsqueeze(0), record=True)
    assert rec is not None

    shape = (cfg.heads, layout.grid_h, layout.grid_w)
    to_ref = rec.block(layer, "G")[0].mean(dim=1).reshape(shape).numpy()
    to_target = rec.block(layer, "P")[0].mean(dim=1).reshape(shape).numpy()
    mass = {name: rec.block(layer, name)[0].sum(dim=-1).mean(dim=-1).numpy() for name in ("T", "G", "P", "F")}
    return AttentionMaps(to_ref=to_ref, to_target=to_target, block_mass=mass)
