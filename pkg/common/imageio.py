from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from common.errors import ArtifactIOError, ValidationError

_PIL_FORMAT = {"png": "PNG", "ppm": "PPM"}


def suffix_for(fmt: str, *, gray: bool = False) -> str:
    if fmt not in _PIL_FORMAT:
        raise ValidationError(f"Unknown image format: {fmt} (expected one of {sorted(_PIL_FORMAT)})")
    # the netpbm writer emits PGM for single-channel images
    if fmt == "ppm" and gray:
        return ".pgm"
    return "." + fmt


def _to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def _save(img: Image.Image, path: str | Path, fmt: str) -> Path:
    p = Path(path)
    pil_fmt = _PIL_FORMAT.get(fmt)
    if pil_fmt is None:
        raise ValidationError(f"Unknown image format: {fmt}")
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        img.save(p, format=pil_fmt)
    except OSError as e:
        raise ArtifactIOError(p, e) from e
    return p


def save_rgb(path: str | Path, image: np.ndarray, fmt: str = "png") -> Path:
    """image: H×W×3 in [0,1]."""
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValidationError(f"RGB image must be H×W×3, got {image.shape}")
    return _save(Image.fromarray(_to_uint8(image), mode="RGB"), path, fmt)


def save_gray(path: str | Path, image: np.ndarray, fmt: str = "png") -> Path:
    """image: H×W in [0,1]; masks become 0/255."""
    if image.ndim != 2:
        raise ValidationError(f"Grayscale image must be H×W, got {image.shape}")
    return _save(Image.fromarray(_to_uint8(image), mode="L"), path, fmt)


def _open(path: str | Path) -> Image.Image:
    p = Path(path)
    try:
        img = Image.open(p)
        img.load()
    except OSError as e:
        raise ArtifactIOError(p, e) from e
    return img


def load_rgb(path: str | Path) -> np.ndarray:
    arr = np.asarray(_open(path).convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / np.float32(255.0)


def load_mask(path: str | Path) -> np.ndarray:
    arr = np.asarray(_open(path).convert("L"), dtype=np.uint8)
    return (arr >= 128).astype(np.float32)


def to_tensor(image: np.ndarray) -> torch.Tensor:
    """H×W×3 numpy → 3×H×W float32 tensor; H×W masks → 1×H×W."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    if t.ndim == 2:
        return t.unsqueeze(0)
    return t.permute(2, 0, 1).contiguous()


def to_array(image: torch.Tensor) -> np.ndarray:
    """3×H×W tensor → H×W×3 float32 numpy."""
    t = image.detach().to("cpu", torch.float32)
    if t.ndim == 3 and t.shape[0] == 1:
        return t[0].numpy()
    return t.permute(1, 2, 0).contiguous().numpy()
