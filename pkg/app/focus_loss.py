from __future__ import annotations

from dataclasses import dataclass

import torch

from app.dit import AttentionRecord
from app.panels import PanelLayout, mask_to_token_weights
from common.errors import NumericalError, ValidationError

DEFAULT_LAMBDA_FA = 0.1


@dataclass
class FocusWeights:
    """
    w_ref: (B, l) token weights of the reference garment mask M_r.
    w_tgt: (B, l) token weights of the target garment mask M_t.
    """

    w_ref: torch.Tensor
    w_tgt: torch.Tensor

    @classmethod
    def from_masks(cls, mask_ref: torch.Tensor, mask_tgt: torch.Tensor, layout: PanelLayout) -> "FocusWeights":
        """Masks (…, H, W) in {0,1} → area-averaged patch weights."""
        return cls(w_ref=mask_to_token_weights(mask_ref, layout), w_tgt=mask_to_token_weights(mask_tgt, layout))


def _as_batch(w: torch.Tensor) -> torch.Tensor:
    # (l,) → (1, l) so one weight vector can serve a whole batch
    return w.unsqueeze(0) if w.ndim == 1 else w


def focus_attention_loss(record: AttentionRecord, weights: FocusWeights) -> torch.Tensor:
    """
    Per layer, head and sample:
        (1/n) Σ_i [ mean_j F_qG_k[i, j]·(1 − w_ref[j]) + mean_j F_qP_k[i, j]·w_tgt[j] ]
    averaged over layers, heads and the batch. Differentiable w.r.t. the recorded attention.
    """
    if record.layers == 0:
        raise ValidationError("attention record is empty; run the model with record=True")

    fg = record.stacked("G")  # (layers, B, heads, n, l)
    fp = record.stacked("P")
    l = fg.shape[-1]
    w_ref = _as_batch(weights.w_ref).to(fg.dtype)
    w_tgt = _as_batch(weights.w_tgt).to(fg.dtype)
    if w_ref.shape[-1] != l or w_tgt.shape[-1] != l or fp.shape[-1] != l:
        raise ValidationError(
            f"attention block width {l} does not match weight lengths {w_ref.shape[-1]} / {w_tgt.shape[-1]}"
        )
    if w_ref.shape[0] not in (1, fg.shape[1]) or w_tgt.shape[0] not in (1, fg.shape[1]):
        raise ValidationError(f"weights batch {w_ref.shape[0]} does not match attention batch {fg.shape[1]}")
    if not (bool(torch.isfinite(fg).all()) and bool(torch.isfinite(fp).all())):
        raise NumericalError("non-finite attention values")

    # broadcast weights over (layers, ·, heads, n, ·)
    coef_ref = (1.0 - w_ref)[None, :, None, None, :]
    coef_tgt = w_tgt[None, :, None, None, :]
    per_row = (fg * coef_ref).mean(dim=-1) + (fp * coef_tgt).mean(dim=-1)  # (layers, B, heads, n)
    return per_row.mean()


def total_loss(flow_mse: torch.Tensor | float, fa: torch.Tensor | float, lambda_fa: float) -> torch.Tensor | float:
    if lambda_fa < 0:
        raise ValidationError(f"lambda_fa must be >= 0, got {lambda_fa}")
    return flow_mse + lambda_fa * fa
