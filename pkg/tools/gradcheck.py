from __future__ import annotations

import argparse
from dataclasses import dataclass

import numpy as np
import torch

from app.dit import ModelConfig, build_model
from common.seeding import rng
from worker.train import TrainBatch, TrainConfig, compute_losses

FD_STEP = 1e-4
TOLERANCE = 1e-3
REL_FLOOR = 1e-6


@dataclass
class GradcheckResult:
    samples: list[tuple[str, int, float, float, float]]  # (param, flat index, analytic, numeric, rel error)
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max((s[4] for s in self.samples), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def synthetic_batch(config: ModelConfig, size: int, seed: int) -> TrainBatch:
    """Random panels and binary garment masks at the config's layout, float64."""
    layout = config.layout
    g = rng(seed, 1)
    panels = torch.from_numpy(g.random((3, size, 3, layout.H, layout.W)))
    masks = torch.from_numpy((g.random((2, size, layout.H, layout.W)) < 0.5).astype(np.float64))
    return TrainBatch(reference=panels[0], target=panels[1], ground_truth=panels[2], mask_ref=masks[0], mask_tgt=masks[1])


def run_gradcheck(
    config: ModelConfig | None = None,
    samples: int = 50,
    seed: int = 0,
    lambda_fa: float = 0.1,
    h: float = FD_STEP,
    tolerance: float = TOLERANCE,
) -> GradcheckResult:
    """
    Compares autograd against central differences of flow_mse + λ·fa_loss for `samples` seeded parameter scalars,
    in float64 on the tiny configuration by default.
    """
    cfg = config or ModelConfig.tiny()
    model = build_model(cfg, seed=seed, dtype=torch.float64)
    train_cfg = TrainConfig(steps=1, batch=2, lambda_fa=lambda_fa, seed=seed)
    batch = synthetic_batch(cfg, train_cfg.batch, seed)

    def loss() -> torch.Tensor:
        return compute_losses(model, batch, train_cfg, step=0)[2]

    model.zero_grad(set_to_none=True)
    loss().backward()

    named = [(n, p) for n, p in model.named_parameters()]
    sizes = np.array([p.numel() for _, p in named])
    g = rng(seed, 2)
    # pick parameters in proportion to their size, then a uniform element
    picks = g.choice(len(named), size=samples, p=sizes / sizes.sum())

    out: list[tuple[str, int, float, float, float]] = []
    with torch.no_grad():
        for k in picks:
            name, p = named[int(k)]
            idx = int(g.integers(0, p.numel()))
            flat = p.view(-1)
            analytic = float(p.grad.view(-1)[idx])
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = float(loss())
            flat[idx] = orig - h
            down = float(loss())
            flat[idx] = orig
            numeric = (up - down) / (2 * h)
            out.append((name, idx, analytic, numeric, relative_error(analytic, numeric)))
    return GradcheckResult(samples=out, tolerance=tolerance)


def main() -> None:
    parser = argparse.ArgumentParser(description="Finite-difference check of the training loss gradient")
    parser.add_argument("--samples", type=int, default=50)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    res = run_gradcheck(samples=args.samples, seed=args.seed)
    mark = "✅" if res.passed else "❌"
    print(f"{mark} max relative error {res.max_rel_error:.3e} over {len(res.samples)} parameters (tol {res.tolerance:g})")
    raise SystemExit(0 if res.passed else 1)


if __name__ == "__main__":
    main()
