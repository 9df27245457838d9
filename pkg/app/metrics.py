"""
SSIM, FID and KID at desk scale.

FID/KID use a fixed random-weight convolutional embedder instead of Inception features, so absolute values are
only comparable between runs that use this same embedder.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg
import torch
import torch.nn as nn
import torch.nn.functional as F

from common.errors import ValidationError
from common.seeding import rng

EMBEDDER_SEED = 20250207
FEATURE_DIM = 64
KID_REPORT_SCALE = 1e3

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


# ---- SSIM --------------------------------------------------------------------


def _gaussian_window(size: int, sigma: float) -> torch.Tensor:
    ax = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(ax**2) / (2 * sigma**2))
    g = g / g.sum()
    return torch.outer(g, g)


def _as_chw64(image: np.ndarray | torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(image) if not isinstance(image, torch.Tensor) else image)
    t = t.to(torch.float64)
    if t.ndim == 2:
        return t.unsqueeze(0)
    if t.ndim != 3:
        raise ValidationError(f"expected an H×W×C image, got shape {tuple(t.shape)}")
    return t.permute(2, 0, 1)


def ssim(x: np.ndarray | torch.Tensor, y: np.ndarray | torch.Tensor, data_range: float = 1.0) -> float:
    """
    Mean local SSIM, 11×11 Gaussian window (σ=1.5), valid filtering, averaged over channels.
    Inputs are H×W×C (or H×W) arrays in [0, data_range].
    """
    if tuple(np.shape(x)) != tuple(np.shape(y)):
        raise ValidationError(f"ssim shape mismatch: {tuple(np.shape(x))} vs {tuple(np.shape(y))}")
    a = _as_chw64(x)
    b = _as_chw64(y)
    C, H, W = a.shape
    if H < SSIM_WINDOW or W < SSIM_WINDOW:
        raise ValidationError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {H}x{W}")

    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA).expand(C, 1, SSIM_WINDOW, SSIM_WINDOW)

    def filt(z: torch.Tensor) -> torch.Tensor:
        return F.conv2d(z.unsqueeze(0), window, groups=C)[0]

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu_a = filt(a)
    mu_b = filt(b)
    s_aa = filt(a * a) - mu_a * mu_a
    s_bb = filt(b * b) - mu_b * mu_b
    s_ab = filt(a * b) - mu_a * mu_b

    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (s_aa + s_bb + c2)
    return float((num / den).mean())


# ---- feature embedder ----------------------------------------------------------


class FeatureEmbedder(nn.Module):
    """
    Three stride-2 3×3 conv stages (3→16→32→64) with ReLU, then global average pooling → 64-d.
    Weights come from numpy's seeded generator so they are identical across platforms.
    """

    def __init__(self, seed: int = EMBEDDER_SEED):
        super().__init__()
        channels = (3, 16, 32, FEATURE_DIM)
        self.convs = nn.ModuleList(
            nn.Conv2d(cin, cout, kernel_size=3, stride=2, padding=1) for cin, cout in zip(channels[:-1], channels[1:])
        )
        g = rng(seed)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * 9
                w = g.standard_normal(conv.weight.shape) * np.sqrt(2.0 / fan_in)
                conv.weight.copy_(torch.from_numpy(w.astype(np.float32)))
                conv.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    @torch.no_grad()
    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """images: (N, 3, H, W) in [0,1] → (N, 64)."""
        x = images.to(torch.float32)
        for conv in self.convs:
            x = F.relu(conv(x))
        return x.mean(dim=(-2, -1))

    def embed_arrays(self, images: list[np.ndarray], batch_size: int = 64) -> np.ndarray:
        """H×W×3 arrays → (N, 64) float64 features."""
        feats: list[np.ndarray] = []
        for i in range(0, len(images), batch_size):
            chunk = np.stack(images[i : i + batch_size]).astype(np.float32)
            t = torch.from_numpy(chunk).permute(0, 3, 1, 2).contiguous()
            feats.append(self(t).numpy().astype(np.float64))
        if not feats:
            return np.zeros((0, FEATURE_DIM), dtype=np.float64)
        return np.concatenate(feats, axis=0)


# ---- FID / KID ---------------------------------------------------------------


def _check_features(name: str, feats: np.ndarray, minimum: int) -> np.ndarray:
    f = np.asarray(feats, dtype=np.float64)
    if f.ndim != 2:
        raise ValidationError(f"{name} must be an (N, d) array, got shape {f.shape}")
    if f.shape[0] < minimum:
        raise ValidationError(f"{name} needs at least {minimum} samples, got {f.shape[0]}")
    return f


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    vals, vecs = scipy.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(features_a: np.ndarray, features_b: np.ndarray) -> float:
    """
    ‖μa − μb‖² + tr(Σa + Σb − 2(ΣaΣb)^½).
    tr (ΣaΣb)^½ is taken as Σ √λ of the symmetric √Σa Σb √Σa, negative eigenvalues clamped to 0.
    """
    a = _check_features("features_a", features_a, 2)
    b = _check_features("features_b", features_b, 2)
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")

    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(a, rowvar=False))
    cov_b = np.atleast_2d(np.cov(b, rowvar=False))

    root_a = _psd_sqrt(cov_a)
    inner = root_a @ cov_b @ root_a
    inner = (inner + inner.T) / 2.0
    eig = np.clip(scipy.linalg.eigvalsh(inner), 0.0, None)
    tr_covmean = float(np.sqrt(eig).sum())

    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_covmean)
    return max(value, 0.0)


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """k(x, y) = (xᵀy / d + 1)³"""
    d = x.shape[-1]
    return (x @ y.T / d + 1.0) ** 3


def _mmd2_unbiased(x: np.ndarray, y: np.ndarray) -> float:
    m = x.shape[0]
    k_xx = polynomial_kernel(x, x)
    k_yy = polynomial_kernel(y, y)
    k_xy = polynomial_kernel(x, y)
    sum_xx = (k_xx.sum() - np.trace(k_xx)) / (m * (m - 1))
    sum_yy = (k_yy.sum() - np.trace(k_yy)) / (m * (m - 1))
    return float(sum_xx + sum_yy - 2.0 * k_xy.mean())


def kid(
    features_a: np.ndarray,
    features_b: np.ndarray,
    subset_size: int = 50,
    subsets: int = 100,
    seed: int = 0,
) -> float:
    """Mean unbiased MMD² over seeded random subsets (raw value; multiply by KID_REPORT_SCALE for reports)."""
    if subset_size < 2 or subsets < 1:
        raise ValidationError(f"subset_size must be >= 2 and subsets >= 1, got {subset_size}, {subsets}")
    a = _check_features("features_a", features_a, subset_size + 1)
    b = _check_features("features_b", features_b, subset_size + 1)
    if a.shape[1] != b.shape[1]:
        raise ValidationError(f"feature dims differ: {a.shape[1]} vs {b.shape[1]}")

    g = rng(seed)
    values = []
    for _ in range(subsets):
        ia = g.choice(a.shape[0], size=subset_size, replace=False)
        ib = g.choice(b.shape[0], size=subset_size, replace=False)
        values.append(_mmd2_unbiased(a[ia], b[ib]))
    return float(np.mean(values))
