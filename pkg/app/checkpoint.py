"""
Checkpoint file layout (format version 1):

    8 bytes   magic  b"TRYONCK1"
    8 bytes   header length N, unsigned little-endian
    N bytes   header, UTF-8 JSON:
                format_version, model_config (incl. layout), seed, step, adam_step,
                train (resolved train config or null),
                arrays: [{"name", "shape"}, ...] in storage order
    …         every array as little-endian float32, C order, concatenated in the declared order

Array names: model parameters use their state-dict names; Adam moments are stored as
"adam.exp_avg.<param>" and "adam.exp_avg_sq.<param>" (the Adam step count lives in the header).
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from app.dit import FitTransformer, ModelConfig
from common.errors import ArtifactIOError, ValidationError

MAGIC = b"TRYONCK1"
FORMAT_VERSION = 1
EXP_AVG = "adam.exp_avg."
EXP_AVG_SQ = "adam.exp_avg_sq."


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict[str, torch.Tensor]
    seed: int = 0
    step: int = 0
    train: dict[str, Any] | None = None
    adam_step: int = 0
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)

    def build_model(self) -> FitTransformer:
        model = FitTransformer(self.config)
        missing = set(model.state_dict()) ^ set(self.params)
        if missing:
            raise ValidationError(f"checkpoint does not match model config; mismatched arrays: {sorted(missing)[:5]}")
        model.load_state_dict({k: v.clone() for k, v in self.params.items()})
        return model


def _arrays(ck: Checkpoint) -> list[tuple[str, torch.Tensor]]:
    out = list(ck.params.items())
    out += [(EXP_AVG + k, v) for k, v in ck.exp_avg.items()]
    out += [(EXP_AVG_SQ + k, v) for k, v in ck.exp_avg_sq.items()]
    return out


def save_checkpoint(path: str | Path, ck: Checkpoint) -> Path:
    p = Path(path)
    arrays = _arrays(ck)
    header = {
        "format_version": FORMAT_VERSION,
        "model_config": ck.config.to_dict(),
        "seed": int(ck.seed),
        "step": int(ck.step),
        "adam_step": int(ck.adam_step),
        "train": ck.train,
        "arrays": [{"name": name, "shape": list(t.shape)} for name, t in arrays],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    try:
        p.parent.mkdir(parents=True, exist_ok=True)
        with p.open("wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(head)))
            f.write(head)
            for _, t in arrays:
                f.write(np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4").tobytes())
    except OSError as e:
        raise ArtifactIOError(p, e) from e
    return p


def load_checkpoint(path: str | Path) -> Checkpoint:
    p = Path(path)
    try:
        raw = p.read_bytes()
    except OSError as e:
        raise ArtifactIOError(p, e) from e

    if len(raw) < 16 or raw[:8] != MAGIC:
        raise ValidationError(f"{p}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValidationError(f"{p}: corrupt checkpoint header ({e})") from e
    if header.get("format_version") != FORMAT_VERSION:
        raise ValidationError(f"{p}: unsupported checkpoint format {header.get('format_version')}")

    config = ModelConfig.from_dict(header["model_config"])
    offset = 16 + n
    params: dict[str, torch.Tensor] = {}
    exp_avg: dict[str, torch.Tensor] = {}
    exp_avg_sq: dict[str, torch.Tensor] = {}
    for spec in header["arrays"]:
        shape = tuple(int(s) for s in spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(raw):
            raise ValidationError(f"{p}: corrupt checkpoint, array '{spec['name']}' is truncated")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape)
        t = torch.from_numpy(arr.copy())
        name = spec["name"]
        if name.startswith(EXP_AVG_SQ):
            exp_avg_sq[name[len(EXP_AVG_SQ) :]] = t
        elif name.startswith(EXP_AVG):
            exp_avg[name[len(EXP_AVG) :]] = t
        else:
            params[name] = t
        offset = end
    if offset != len(raw):
        raise ValidationError(f"{p}: corrupt checkpoint, {len(raw) - offset} trailing bytes")

    return Checkpoint(
        config=config,
        params=params,
        seed=int(header.get("seed", 0)),
        step=int(header.get("step", 0)),
        train=header.get("train"),
        adam_step=int(header.get("adam_step", 0)),
        exp_avg=exp_avg,
        exp_avg_sq=exp_avg_sq,
    )


def checkpoint_from_model(model: FitTransformer, *, seed: int, step: int = 0, train: dict[str, Any] | None = None) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        params={k: v.detach().to(torch.float32).clone() for k, v in model.state_dict().items()},
        seed=seed,
        step=step,
        train=train,
    )


def load_model(path: str | Path) -> tuple[FitTransformer, Checkpoint]:
    ck = load_checkpoint(path)
    model = ck.build_model()
    model.eval()
    return model, ck
