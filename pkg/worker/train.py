from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import pandas as pd
import torch
from tqdm.auto import tqdm

from app.checkpoint import Checkpoint, checkpoint_from_model, load_checkpoint, save_checkpoint
from app.dit import FitTransformer, ModelConfig, build_model, flow_pair, patchify
from app.focus_loss import DEFAULT_LAMBDA_FA, FocusWeights, focus_attention_loss, total_loss
from app.panels import concat_panels
from app.tryon import build_condition
from common.errors import NumericalError, ValidationError
from common.imageio import to_tensor
from common.jsonl import append_record, read_records, write_records
from common.seeding import derive_seed, rng
from worker.dataprep import Triplet, TripletManifest

METRICS_NAME = "metrics.jsonl"
FLOW_REGIONS = ("canvas", "fit")
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch: int = 16
    lr: float = 1e-4
    lambda_fa: float = DEFAULT_LAMBDA_FA
    seed: int = 0
    ckpt_interval: int = 1000
    flow_region: str = "canvas"
    t_dist: str = "uniform"

    def __post_init__(self) -> None:
        if self.steps < 1 or self.batch < 1 or not self.lr > 0:
            raise ValidationError(f"steps, batch and lr must be positive, got {self.steps}, {self.batch}, {self.lr}")
        if self.lambda_fa < 0:
            raise ValidationError(f"lambda_fa must be >= 0, got {self.lambda_fa}")
        if self.ckpt_interval < 1:
            raise ValidationError(f"ckpt_interval must be >= 1, got {self.ckpt_interval}")
        if self.flow_region not in FLOW_REGIONS:
            raise ValidationError(f"flow_region must be one of {FLOW_REGIONS}, got {self.flow_region!r}")
        if self.t_dist != "uniform":
            raise ValidationError(f"only uniform t sampling is supported, got {self.t_dist!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class TrainBatch:
    """Stacked tensors for one step: panels (B, 3, H, W), garment masks (B, H, W)."""

    reference: torch.Tensor
    target: torch.Tensor
    ground_truth: torch.Tensor
    mask_ref: torch.Tensor
    mask_tgt: torch.Tensor

    @property
    def size(self) -> int:
        return int(self.reference.shape[0])

    @classmethod
    def from_triplets(cls, triplets: list[Triplet], dtype: torch.dtype = torch.float32) -> "TrainBatch":
        if not triplets:
            raise ValidationError("training batch is empty")

        def stack(items: list) -> torch.Tensor:
            return torch.stack([to_tensor(a) for a in items]).to(dtype)

        return cls(
            reference=stack([t.reference.image for t in triplets]),
            target=stack([t.target.image for t in triplets]),
            ground_truth=stack([t.ground_truth.image for t in triplets]),
            mask_ref=torch.stack([torch.from_numpy(t.reference.garment_mask) for t in triplets]).to(dtype),
            mask_tgt=torch.stack([torch.from_numpy(t.target.garment_mask) for t in triplets]).to(dtype),
        )

    def select(self, idx: list[int]) -> "TrainBatch":
        i = torch.as_tensor(idx, dtype=torch.long)
        return TrainBatch(
            reference=self.reference[i],
            target=self.target[i],
            ground_truth=self.ground_truth[i],
            mask_ref=self.mask_ref[i],
            mask_tgt=self.mask_tgt[i],
        )


@dataclass
class StepResult:
    step: int
    flow_mse: float
    fa_loss: float
    total: float

    def to_dict(self) -> dict[str, Any]:
        return {"step": self.step, "flow_mse": self.flow_mse, "fa_loss": self.fa_loss, "total": self.total}


def make_optimizer(model: FitTransformer, lr: float) -> torch.optim.Adam:
    return torch.optim.Adam(model.parameters(), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)


def compute_losses(
    model: FitTransformer,
    batch: TrainBatch,
    config: TrainConfig,
    step: int,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    (flow_mse, fa_loss, total) for one batch. t and ε for sample i come from (seed, step, i), so the losses are a
    pure function of the parameters and the step index.
    """
    layout = model.config.layout
    dtype = batch.reference.dtype
    x = concat_panels(batch.reference, batch.target, batch.ground_truth)
    cond, mask = build_condition(batch.reference, batch.target, layout)

    z_rows, u_rows, t_rows = [], [], []
    for i in range(batch.size):
        t_i = float(rng(config.seed, step, i).random())
        fs = flow_pair(x[i], derive_seed(config.seed, step, i), t_i)
        z_rows.append(fs.z_t)
        u_rows.append(fs.u)
        t_rows.append(t_i)
    z_t = torch.stack(z_rows).to(dtype)
    u = torch.stack(u_rows).to(dtype)
    t = torch.tensor(t_rows, dtype=dtype)

    v_tokens, rec = model(patchify(z_t, layout.patch), t, cond, mask.unsqueeze(0), record=True)
    u_tokens = patchify(u, layout.patch)
    err = (v_tokens - u_tokens) ** 2
    if config.flow_region == "fit":
        err = err[:, model.ranges.slice("F").start - layout.text_tokens :]
    flow_mse = err.mean()

    assert rec is not None
    weights = FocusWeights.from_masks(batch.mask_ref, batch.mask_tgt, layout)
    fa = focus_attention_loss(rec, weights)
    return flow_mse, fa, total_loss(flow_mse, fa, config.lambda_fa)


def train_step(
    model: FitTransformer,
    optimizer: torch.optim.Optimizer,
    batch: TrainBatch,
    config: TrainConfig,
    step: int,
) -> StepResult:
    """One Adam update on flow_mse + λ·fa_loss. Scalars are those of the parameters before the update."""
    model.train()
    optimizer.zero_grad(set_to_none=True)
    try:
        flow_mse, fa, total = compute_losses(model, batch, config, step)
    except NumericalError as e:
        if e.step is not None:
            raise
        raise NumericalError(str(e), step=step) from e
    if not bool(torch.isfinite(total)):
        raise NumericalError(f"non-finite loss (flow_mse={float(flow_mse)}, fa_loss={float(fa)})", step=step)
    total.backward()
    optimizer.step()
    return StepResult(step=step, flow_mse=float(flow_mse.detach()), fa_loss=float(fa.detach()), total=float(total.detach()))


def batch_indices(n: int, config: TrainConfig, step: int) -> list[int]:
    return [int(i) for i in rng(config.seed, step).integers(0, n, size=config.batch)]


# ---- optimizer state <-> checkpoint --------------------------------------------


def _adam_state(model: FitTransformer, optimizer: torch.optim.Adam) -> tuple[int, dict[str, torch.Tensor], dict[str, torch.Tensor]]:
    step = 0
    exp_avg: dict[str, torch.Tensor] = {}
    exp_avg_sq: dict[str, torch.Tensor] = {}
    for name, p in model.named_parameters():
        state = optimizer.state.get(p)
        if not state:
            continue
        step = int(state["step"])
        exp_avg[name] = state["exp_avg"].detach().clone()
        exp_avg_sq[name] = state["exp_avg_sq"].detach().clone()
    return step, exp_avg, exp_avg_sq


def restore_adam_state(model: FitTransformer, optimizer: torch.optim.Adam, ck: Checkpoint) -> None:
    if ck.adam_step == 0:
        return
    names = [name for name, _ in model.named_parameters()]
    missing = [n for n in names if n not in ck.exp_avg or n not in ck.exp_avg_sq]
    if missing:
        raise ValidationError(f"checkpoint optimizer state is incomplete; missing moments for {missing[:5]}")
    sd = optimizer.state_dict()
    sd["state"] = {
        i: {
            "step": torch.tensor(float(ck.adam_step)),
            "exp_avg": ck.exp_avg[n].clone(),
            "exp_avg_sq": ck.exp_avg_sq[n].clone(),
        }
        for i, n in enumerate(names)
    }
    optimizer.load_state_dict(sd)


def snapshot(model: FitTransformer, optimizer: torch.optim.Adam, config: TrainConfig, step: int, model_seed: int) -> Checkpoint:
    ck = checkpoint_from_model(model, seed=model_seed, step=step, train=config.to_dict())
    ck.adam_step, ck.exp_avg, ck.exp_avg_sq = _adam_state(model, optimizer)
    return ck


def checkpoint_name(step: int) -> str:
    return f"step_{step:06d}.ckpt"


# ---- loop ----------------------------------------------------------------------


def load_training_data(manifest: TripletManifest) -> TrainBatch:
    if not manifest.records:
        raise ValidationError(f"triplet manifest {manifest.root} has no records")
    triplets = [manifest.load_triplet(r) for r in tqdm(manifest.records, desc="load", leave=False)]
    return TrainBatch.from_triplets(triplets)


def train_loop(
    manifest: TripletManifest,
    config: TrainConfig,
    ckpt_dir: str | Path,
    *,
    model_config: ModelConfig | None = None,
    resume: str | Path | None = None,
    provenance: dict[str, Any] | None = None,
) -> Path:
    """
    Trains for config.steps total steps (continuing from `resume` if given), checkpointing every ckpt_interval steps
    and at the end. Returns the final checkpoint path. The metrics log gets one record per step.
    """
    out = Path(ckpt_dir)
    data = load_training_data(manifest)

    if resume is not None:
        ck = load_checkpoint(resume)
        model = ck.build_model()
        start = ck.step
        model_seed = ck.seed
    else:
        cfg = model_config or ModelConfig()
        model = build_model(cfg, seed=config.seed)
        start = 0
        model_seed = config.seed
        ck = None

    layout = model.config.layout
    H, W = data.reference.shape[-2:]
    if (H, W) != (layout.H, layout.W):
        raise ValidationError(f"triplet images are {H}x{W}, model expects {layout.H}x{layout.W}")
    if start >= config.steps:
        raise ValidationError(f"checkpoint is already at step {start}, nothing to do for steps={config.steps}")

    optimizer = make_optimizer(model, config.lr)
    if ck is not None:
        restore_adam_state(model, optimizer, ck)

    metrics_path = out / METRICS_NAME
    header = {
        "kind": "header",
        "train": config.to_dict(),
        "model_config": model.config.to_dict(),
        "triplets": str(manifest.root),
        "resume_from": str(resume) if resume is not None else None,
        "start_step": start,
        "flags": provenance or {},
    }
    kept: list[dict[str, Any]] = []
    if resume is not None and metrics_path.exists():
        kept = [r for r in read_records(metrics_path)[1:] if int(r.get("step", -1)) < start]
    write_records(metrics_path, [header] + kept)

    last: Path | None = None
    bar = tqdm(range(start, config.steps), desc="train", initial=start, total=config.steps)
    for step in bar:
        batch = data.select(batch_indices(data.size, config, step))
        res = train_step(model, optimizer, batch, config, step)
        append_record(metrics_path, res.to_dict())
        bar.set_postfix(flow=f"{res.flow_mse:.4f}", fa=f"{res.fa_loss:.5f}")

        done = step + 1
        if done % config.ckpt_interval == 0 or done == config.steps:
            last = save_checkpoint(out / checkpoint_name(done), snapshot(model, optimizer, config, done, model_seed))
            tqdm.write(f"✅ checkpoint {last}")

    assert last is not None
    return last


def summarize_metrics(path: str | Path, window: int = 100) -> pd.DataFrame:
    """First/last `window`-step means of each logged scalar."""
    rows = [r for r in read_records(path) if r.get("kind") != "header"]
    if not rows:
        raise ValidationError(f"{path}: metrics log has no step records")
    df = pd.DataFrame(rows).set_index("step").sort_index()
    cols = ["flow_mse", "fa_loss", "total"]
    return pd.DataFrame({"first": df[cols].head(window).mean(), "last": df[cols].tail(window).mean()})
