from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from app.metrics import KID_REPORT_SCALE, FeatureEmbedder, fid, kid, ssim
from common.errors import ArtifactIOError, ValidationError
from common.imageio import load_rgb
from common.jsonl import write_records

METRICS = ("ssim", "fid", "kid")
IMAGE_SUFFIXES = (".png", ".ppm")
REPORT_NAME = "report.jsonl"
SUMMARY_NAME = "summary.txt"
KID_SUBSET_SIZE = 50
KID_SUBSETS = 100


@dataclass
class EvalReport:
    paired: bool
    rows: list[dict[str, Any]] = field(default_factory=list)  # one per scored pair (paired mode)
    summary: dict[str, Any] = field(default_factory=dict)
    missing: list[str] = field(default_factory=list)

    def table(self) -> pd.DataFrame:
        return pd.DataFrame([{"metric": k, "value": v} for k, v in self.summary.items()]).set_index("metric")


def parse_metrics(raw: str | list[str] | tuple[str, ...]) -> tuple[str, ...]:
    names = [m.strip().lower() for m in (raw.split(",") if isinstance(raw, str) else raw) if m.strip()]
    unknown = [m for m in names if m not in METRICS]
    if unknown or not names:
        raise ValidationError(f"unknown metrics {unknown or raw!r}; choose from {','.join(METRICS)}")
    return tuple(dict.fromkeys(names))


def list_images(directory: str | Path) -> dict[str, Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ArtifactIOError(d, "not a directory")
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def _check_sizes(paths: list[Path], images: list[np.ndarray]) -> None:
    expected = images[0].shape
    for path, img in zip(paths, images):
        if img.shape != expected:
            raise ValidationError(
                f"{path}: image is {img.shape[0]}x{img.shape[1]}, expected {expected[0]}x{expected[1]} like {paths[0]}"
            )


def _kid_x1e3(a: np.ndarray, b: np.ndarray, seed: int) -> float | None:
    # subsets must be strictly smaller than each set
    size = min(KID_SUBSET_SIZE, a.shape[0] - 1, b.shape[0] - 1)
    if size < 2:
        return None
    return kid(a, b, subset_size=size, subsets=KID_SUBSETS, seed=seed) * KID_REPORT_SCALE


def evaluate_dirs(
    pred_dir: str | Path,
    gt_dir: str | Path,
    metrics: tuple[str, ...] = METRICS,
    *,
    paired: bool = True,
    seed: int = 0,
    out_dir: str | Path | None = None,
    provenance: dict[str, Any] | None = None,
    embedder: FeatureEmbedder | None = None,
) -> EvalReport:
    """
    Paired mode: files are matched by name (stem); SSIM per pair, FID/KID over the matched sets.
    Unpaired mode: FID/KID between whole directories; SSIM is skipped.
    Unmatched names are listed in the report and excluded.
    """
    preds = list_images(pred_dir)
    gts = list_images(gt_dir)
    if not preds or not gts:
        raise ValidationError(f"no images found in {pred_dir if not preds else gt_dir}")

    report = EvalReport(paired=paired)
    if paired:
        names = sorted(preds.keys() & gts.keys())
        report.missing = sorted(preds.keys() ^ gts.keys())
        if not names:
            raise ValidationError(f"no file names in common between {pred_dir} and {gt_dir}")
        if report.missing:
            print(f"⚠️ {len(report.missing)} unmatched file(s) excluded: {', '.join(report.missing[:10])}")
        paths = [preds[n] for n in names] + [gts[n] for n in names]
    else:
        names = []
        paths = list(preds.values()) + list(gts.values())
    images = [load_rgb(p) for p in paths]
    _check_sizes(paths, images)
    n_pred = len(names) if paired else len(preds)
    pred_imgs, gt_imgs = images[:n_pred], images[n_pred:]

    summary: dict[str, Any] = {"n_pred": len(pred_imgs), "n_gt": len(gt_imgs), "missing": len(report.missing)}

    if "ssim" in metrics:
        if paired:
            for name, p, g in zip(names, pred_imgs, gt_imgs):
                report.rows.append({"kind": "pair", "id": name, "ssim": ssim(p, g)})
            summary["ssim_mean"] = float(np.mean([r["ssim"] for r in report.rows]))
        else:
            print("⚠️ ssim needs aligned pairs; skipped in unpaired mode")
    elif paired:
        report.rows = [{"kind": "pair", "id": name} for name in names]

    if "fid" in metrics or "kid" in metrics:
        emb = embedder or FeatureEmbedder()
        fa = emb.embed_arrays(pred_imgs)
        fb = emb.embed_arrays(gt_imgs)
        if "fid" in metrics:
            if min(len(fa), len(fb)) < 2:
                print("⚠️ fid needs at least 2 images per side; skipped")
                summary["fid"] = None
            else:
                summary["fid"] = fid(fa, fb)
        if "kid" in metrics:
            value = _kid_x1e3(fa, fb, seed)
            if value is None:
                print("⚠️ kid needs at least 3 images per side; skipped")
            summary["kid_x1e3"] = value

    report.summary = summary

    if out_dir is not None:
        out = Path(out_dir)
        header = {
            "kind": "header",
            "pred": str(pred_dir),
            "gt": str(gt_dir),
            "metrics": list(metrics),
            "paired": paired,
            "seed": seed,
            "missing": report.missing,
            "summary": summary,
            "flags": provenance or {},
        }
        write_records(out / REPORT_NAME, [header] + report.rows)
        text = report.table().to_string()
        try:
            (out / SUMMARY_NAME).write_text(text + "\n", encoding="utf-8")
        except OSError as e:
            raise ArtifactIOError(out / SUMMARY_NAME, e) from e

    return report
