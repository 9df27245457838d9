from __future__ import annotations

import numpy as np
import torch


def rng(*keys: int) -> np.random.Generator:
    """
    Independent numpy stream for a tuple of integer keys, e.g. rng(run_seed, step, sample_index).
    SeedSequence mixes the keys, so (1, 2) and (2, 1) give unrelated streams.
    """
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def derive_seed(*keys: int) -> int:
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1, dtype=np.uint32)[0])


def gaussian(shape: tuple[int, ...], *keys: int, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Standard normal tensor drawn from rng(*keys); identical on every platform numpy supports."""
    arr = rng(*keys).standard_normal(shape)
    return torch.from_numpy(arr).to(dtype)
