from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
from tqdm.auto import tqdm

from app.checkpoint import load_model
from app.dit import DEFAULT_SAMPLING_STEPS, FitTransformer
from app.panels import mask_to_token_weights
from app.tryon import attention_maps, reconstruction_mae, try_on, try_on_canvas
from common.imageio import load_rgb, save_gray, save_rgb, suffix_for
from common.jsonl import write_records
from worker.dataprep import read_manifest

PRED_DIR = "pred"
GT_DIR = "gt"
ATTN_SUMMARY_NAME = "summary.jsonl"
INFER_LOG_NAME = "infer.jsonl"


def infer_file(
    ckpt: str | Path,
    ref_path: str | Path,
    target_path: str | Path,
    out_path: str | Path,
    *,
    steps: int = DEFAULT_SAMPLING_STEPS,
    seed: int = 0,
    image_format: str = "png",
) -> Path:
    model, _ = load_model(ckpt)
    fit = try_on(model, load_rgb(ref_path), load_rgb(target_path), steps=steps, seed=seed)
    return save_rgb(out_path, fit, image_format)


def infer_triplets(
    model: FitTransformer,
    manifest_path: str | Path,
    out_dir: str | Path,
    *,
    steps: int = DEFAULT_SAMPLING_STEPS,
    seed: int = 0,
    image_format: str = "png",
    provenance: dict[str, Any] | None = None,
) -> int:
    """
    try_on for every record of a triplet manifest. Writes pred/<id> and gt/<id> with matching names so the two
    directories can be scored as pairs, plus infer.jsonl listing them with the reconstruction error of the sampled
    G/P panels (a sampler sanity check). Returns the number of records processed.
    """
    manifest = read_manifest(manifest_path)
    out = Path(out_dir)
    suffix = suffix_for(image_format)
    rows: list[dict[str, Any]] = []
    for rec in tqdm(manifest.records, desc="infer", disable=not manifest.records):
        ref = load_rgb(manifest.root / rec.reference.image_path)
        target = load_rgb(manifest.root / rec.target.image_path)
        gt = load_rgb(manifest.root / rec.ground_truth.image_path)
        canvas = try_on_canvas(model, ref, target, steps=steps, seed=seed)
        fit = canvas[2]
        ref_mae, target_mae = reconstruction_mae(canvas, ref, target)
        save_rgb(out / PRED_DIR / f"{rec.id}{suffix}", fit, image_format)
        save_rgb(out / GT_DIR / f"{rec.id}{suffix}", gt, image_format)
        rows.append(
            {
                "kind": "fit",
                "id": rec.id,
                "slot": rec.slot,
                "task": rec.kind,
                "ref_mae": round(ref_mae, 6),
                "target_mae": round(target_mae, 6),
            }
        )

    header = {"kind": "header", "triplets": str(manifest.root), "steps": steps, "seed": seed, "flags": provenance or {}}
    write_records(out / INFER_LOG_NAME, [header] + rows)
    return len(rows)


@dataclass
class AttentionDump:
    files: list[Path]
    summary: list[dict[str, Any]]


def _normalize(m: np.ndarray) -> np.ndarray:
    peak = float(m.max())
    return m / peak if peak > 0 else m


def attn_dump(
    model: FitTransformer,
    ref_image: np.ndarray,
    target_image: np.ndarray,
    layer: int,
    out_dir: str | Path,
    *,
    seed: int = 0,
    ref_mask: np.ndarray | None = None,
    target_mask: np.ndarray | None = None,
    image_format: str = "png",
    provenance: dict[str, Any] | None = None,
) -> AttentionDump:
    """
    Per head: head{h}_to_ref and head{h}_to_target grayscale maps (F queries averaged, each map scaled to max 1),
    plus summary.jsonl with the per-head key-block masses. Masks, when given, only feed the summary's
    forbidden-mass columns; the model never sees them.
    """
    maps = attention_maps(model, ref_image, target_image, layer, seed=seed)
    out = Path(out_dir)
    suffix = suffix_for(image_format, gray=True)
    layout = model.config.layout

    files: list[Path] = []
    for h in range(maps.to_ref.shape[0]):
        files.append(save_gray(out / f"head{h}_to_ref{suffix}", _normalize(maps.to_ref[h]), image_format))
        files.append(save_gray(out / f"head{h}_to_target{suffix}", _normalize(maps.to_target[h]), image_format))

    w_ref = w_tgt = None
    if ref_mask is not None:
        w_ref = mask_to_token_weights(torch.from_numpy(ref_mask.astype(np.float32)), layout).numpy()
    if target_mask is not None:
        w_tgt = mask_to_token_weights(torch.from_numpy(target_mask.astype(np.float32)), layout).numpy()

    summary: list[dict[str, Any]] = []
    for h in range(maps.to_ref.shape[0]):
        row: dict[str, Any] = {"kind": "head", "layer": layer, "head": h}
        row.update({f"mass_{name}": float(v[h]) for name, v in maps.block_mass.items()})
        row["ref_max_over_min"] = float(maps.to_ref[h].max() / maps.to_ref[h].min())
        row["target_max_over_min"] = float(maps.to_target[h].max() / maps.to_target[h].min())
        # the F-query mean commutes with the key sums
        if w_ref is not None:
            row["ref_off_garment_mass"] = float(maps.to_ref[h].reshape(-1) @ (1.0 - w_ref))
        if w_tgt is not None:
            row["target_garment_mass"] = float(maps.to_target[h].reshape(-1) @ w_tgt)
        summary.append(row)

    header = {"kind": "header", "layer": layer, "seed": seed, "grid": [layout.grid_h, layout.grid_w], "flags": provenance or {}}
    files.append(write_records(out / ATTN_SUMMARY_NAME, [header] + summary))
    return AttentionDump(files=files, summary=summary)

