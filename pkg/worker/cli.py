from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Callable

import torch

from app.checkpoint import load_model
from app.dit import DEFAULT_SAMPLING_STEPS, ModelConfig
from app.oracles import CheckpointOracle, CompositorOracle, TryOnOracle
from common.config import IMAGE_FORMATS, Settings, load_settings, read_config_file, resolve
from common.errors import EXIT_OK, TryOnError, ValidationError
from common.imageio import load_mask, load_rgb
from common.jsonl import dumps
from tools.gradcheck import run_gradcheck
from worker import dataprep, evaluate, infer, synth_gen, train

MODEL_PRESETS = ("default", "tiny")


def _model_config(name: str) -> ModelConfig:
    if name == "tiny":
        return ModelConfig.tiny()
    if name == "default":
        return ModelConfig()
    raise ValidationError(f"unknown model preset {name!r}; choose from {', '.join(MODEL_PRESETS)}")


def parse_oracle(spec: str) -> TryOnOracle:
    """compositor | checkpoint:PATH"""
    if spec == "compositor":
        return CompositorOracle()
    if spec.startswith("checkpoint:"):
        path = spec.split(":", 1)[1]
        if not path:
            raise ValidationError("oracle checkpoint:PATH needs a path")
        model, _ = load_model(path)
        return CheckpointOracle(model=model, name=spec)
    raise ValidationError(f"unknown oracle {spec!r}; expected compositor or checkpoint:PATH")


def parse_filter(spec: str, oracle: TryOnOracle) -> dataprep.Predicate:
    """none | cycle | cycle:THRESH"""
    if spec == "none":
        return dataprep.accept_all
    if spec == "cycle" or spec.startswith("cycle:"):
        raw = spec.split(":", 1)[1] if ":" in spec else "0.9"
        try:
            threshold = float(raw)
        except ValueError as e:
            raise ValidationError(f"cycle filter threshold must be a number, got {raw!r}") from e
        return dataprep.cycle_predicate(oracle, threshold)
    raise ValidationError(f"unknown filter {spec!r}; expected none or cycle:THRESH")


def _resolved(args: argparse.Namespace, defaults: dict[str, Any]) -> dict[str, Any]:
    cfg = resolve(defaults, read_config_file(getattr(args, "config", None)), vars(args))
    print(f"⚙️ {args.command}: {dumps({k: str(v) if isinstance(v, Path) else v for k, v in cfg.items()})}")
    return cfg


def _require(cfg: dict[str, Any], *keys: str) -> None:
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise ValidationError(f"missing required option(s): {', '.join('--' + k.replace('_', '-') for k in missing)}")


# ---- subcommands ---------------------------------------------------------------


def cmd_synth_gen(args: argparse.Namespace, settings: Settings) -> None:
    cfg = _resolved(
        args,
        {"n": 10, "seed": 0, "out": str(settings.out_root / "synth"), "height": 64, "width": 48, "image_format": settings.image_format},
    )
    m = synth_gen.generate_dataset(
        cfg["n"], cfg["seed"], cfg["out"], H=cfg["height"], W=cfg["width"], image_format=cfg["image_format"], provenance=cfg
    )
    print(f"✅ wrote {len(m.records)} persons to {m.root}")


def cmd_dataprep(args: argparse.Namespace, settings: Settings) -> None:
    cfg = _resolved(
        args,
        {
            "manifest": None,
            "oracle": "compositor",
            "filter": "none",
            "out": str(settings.out_root / "triplets"),
            "seed": 0,
            "flat_ratio": 0.0,
            "paired_eval": False,
            "image_format": settings.image_format,
        },
    )
    _require(cfg, "manifest")
    persons = synth_gen.read_manifest(cfg["manifest"])
    oracle = parse_oracle(cfg["oracle"])
    predicate = parse_filter(cfg["filter"], oracle)
    m = dataprep.prepare_triplets(
        persons,
        oracle,
        cfg["out"],
        seed=cfg["seed"],
        predicate=predicate,
        filter_name=cfg["filter"],
        flat_ratio=cfg["flat_ratio"],
        paired_eval=cfg["paired_eval"],
        image_format=cfg["image_format"],
        flags=cfg,
    )
    stats = m.filter_stats
    print(f"✅ {stats['kept']} triplets written to {m.root} ({stats['rejected']} rejected by filter '{stats['name']}')")
    if stats["rejected"]:
        print(f"⚠️ filter rejected {stats['rejected']} of {stats['built']} triplets")


def cmd_train(args: argparse.Namespace, settings: Settings) -> None:
    defaults = train.TrainConfig()
    cfg = _resolved(
        args,
        {
            "triplets": None,
            "steps": defaults.steps,
            "batch": defaults.batch,
            "lr": defaults.lr,
            "fa_weight": defaults.lambda_fa,
            "seed": defaults.seed,
            "ckpt_dir": str(settings.out_root / "ckpt"),
            "ckpt_interval": defaults.ckpt_interval,
            "flow_region": defaults.flow_region,
            "model": "default",
            "resume": None,
        },
    )
    _require(cfg, "triplets")
    tc = train.TrainConfig(
        steps=cfg["steps"],
        batch=cfg["batch"],
        lr=cfg["lr"],
        lambda_fa=cfg["fa_weight"],
        seed=cfg["seed"],
        ckpt_interval=cfg["ckpt_interval"],
        flow_region=cfg["flow_region"],
    )
    manifest = dataprep.read_manifest(cfg["triplets"])
    last = train.train_loop(
        manifest, tc, cfg["ckpt_dir"], model_config=_model_config(cfg["model"]), resume=cfg["resume"], provenance=cfg
    )
    summary = train.summarize_metrics(Path(cfg["ckpt_dir"]) / train.METRICS_NAME)
    print(summary.to_string())
    print(f"✅ final checkpoint {last}")


def cmd_infer(args: argparse.Namespace, settings: Settings) -> None:
    cfg = _resolved(
        args,
        {
            "ckpt": None,
            "ref": None,
            "target": None,
            "triplets": None,
            "steps": DEFAULT_SAMPLING_STEPS,
            "seed": 0,
            "out": None,
            "image_format": settings.image_format,
        },
    )
    _require(cfg, "ckpt")
    if cfg["triplets"]:
        out = cfg["out"] or str(settings.out_root / "infer")
        model, _ = load_model(cfg["ckpt"])
        n = infer.infer_triplets(
            model, cfg["triplets"], out, steps=cfg["steps"], seed=cfg["seed"], image_format=cfg["image_format"], provenance=cfg
        )
        print(f"✅ {n} fits written under {out}")
        return

    _require(cfg, "ref", "target")
    out = cfg["out"] or str(settings.out_root / "infer" / f"fit.{cfg['image_format']}")
    path = infer.infer_file(
        cfg["ckpt"], cfg["ref"], cfg["target"], out, steps=cfg["steps"], seed=cfg["seed"], image_format=cfg["image_format"]
    )
    print(f"✅ fit written to {path}")


def cmd_eval(args: argparse.Namespace, settings: Settings) -> None:
    cfg = _resolved(
        args,
        {"pred": None, "gt": None, "metrics": ",".join(evaluate.METRICS), "paired": True, "seed": 0, "out": str(settings.out_root / "eval")},
    )
    _require(cfg, "pred", "gt")
    report = evaluate.evaluate_dirs(
        cfg["pred"],
        cfg["gt"],
        evaluate.parse_metrics(cfg["metrics"]),
        paired=cfg["paired"],
        seed=cfg["seed"],
        out_dir=cfg["out"],
        provenance=cfg,
    )
    print(report.table().to_string())
    print(f"✅ report written to {Path(cfg['out']) / evaluate.REPORT_NAME}")


def cmd_attn_dump(args: argparse.Namespace, settings: Settings) -> None:
    cfg = _resolved(
        args,
        {
            "ckpt": None,
            "ref": None,
            "target": None,
            "layer": 0,
            "seed": 0,
            "ref_mask": None,
            "target_mask": None,
            "out": str(settings.out_root / "attn"),
            "image_format": settings.image_format,
        },
    )
    _require(cfg, "ckpt", "ref", "target")
    model, _ = load_model(cfg["ckpt"])
    dump = infer.attn_dump(
        model,
        load_rgb(cfg["ref"]),
        load_rgb(cfg["target"]),
        cfg["layer"],
        cfg["out"],
        seed=cfg["seed"],
        ref_mask=load_mask(cfg["ref_mask"]) if cfg["ref_mask"] else None,
        target_mask=load_mask(cfg["target_mask"]) if cfg["target_mask"] else None,
        image_format=cfg["image_format"],
        provenance=cfg,
    )
    print(f"✅ {len(dump.files)} files written to {cfg['out']}")


def cmd_gradcheck(args: argparse.Namespace, settings: Settings) -> None:
    # --config names a model preset here
    preset = args.config or "tiny"
    print(f"⚙️ gradcheck: {dumps({'config': preset, 'samples': args.samples, 'seed': args.seed})}")
    res = run_gradcheck(config=_model_config(preset), samples=args.samples, seed=args.seed)
    if not res.passed:
        worst = max(res.samples, key=lambda s: s[4])
        raise ValidationError(
            f"gradient check failed: max relative error {res.max_rel_error:.3e} > {res.tolerance:g} at {worst[0]}[{worst[1]}]"
        )
    print(f"✅ gradient check passed: max relative error {res.max_rel_error:.3e} over {len(res.samples)} parameters")


# ---- parser --------------------------------------------------------------------


def _leaf(sub: argparse._SubParsersAction, name: str, handler: Callable, summary: str) -> argparse.ArgumentParser:
    p = sub.add_parser(name, help=summary)
    p.add_argument("--config", type=str, default=None, help="Optional dotenv-style file of KEY=value option defaults")
    p.set_defaults(handler=handler)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tryon", description="Mask-free virtual try-on toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Procedural person dataset").add_subparsers(dest="action", required=True)
    p = _leaf(synth, "gen", cmd_synth_gen, "Generate a synthworld dataset")
    p.add_argument("--n", type=int, default=None, help="Number of persons")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--height", type=int, default=None)
    p.add_argument("--width", type=int, default=None)
    p.add_argument("--image-format", choices=IMAGE_FORMATS, default=None)

    p = _leaf(sub, "dataprep", cmd_dataprep, "Build pseudo-triplets with a try-on oracle")
    p.add_argument("--manifest", type=str, default=None, help="Person manifest (file or directory)")
    p.add_argument("--oracle", type=str, default=None, help="compositor | checkpoint:PATH")
    p.add_argument("--filter", type=str, default=None, help="none | cycle:THRESH")
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--flat-ratio", type=float, default=None, help="Fraction of pairs that also get garment-to-person triplets")
    p.add_argument("--paired-eval", action="store_true", default=None, help="Keep only the paired-test triplet slots")
    p.add_argument("--image-format", choices=IMAGE_FORMATS, default=None)

    p = _leaf(sub, "train", cmd_train, "Train the fit transformer")
    p.add_argument("--triplets", type=str, default=None, help="Triplet manifest (file or directory)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--fa-weight", type=float, default=None, help="Focus attention loss weight (0 disables it)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ckpt-dir", type=str, default=None)
    p.add_argument("--ckpt-interval", type=int, default=None)
    p.add_argument("--flow-region", choices=train.FLOW_REGIONS, default=None)
    p.add_argument("--model", choices=MODEL_PRESETS, default=None)
    p.add_argument("--resume", type=str, default=None, help="Continue from this checkpoint")

    p = _leaf(sub, "infer", cmd_infer, "Try a reference garment on a target person")
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--ref", type=str, default=None)
    p.add_argument("--target", type=str, default=None)
    p.add_argument("--triplets", type=str, default=None, help="Run every record of a triplet manifest")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--image-format", choices=IMAGE_FORMATS, default=None)

    p = _leaf(sub, "eval", cmd_eval, "Score predictions against ground truth")
    p.add_argument("--pred", type=str, default=None)
    p.add_argument("--gt", type=str, default=None)
    p.add_argument("--metrics", type=str, default=None, help="Comma-separated subset of ssim,fid,kid")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--paired", dest="paired", action="store_true", default=None)
    mode.add_argument("--unpaired", dest="paired", action="store_false", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", type=str, default=None)

    attn = sub.add_parser("attn", help="Attention diagnostics").add_subparsers(dest="action", required=True)
    p = _leaf(attn, "dump", cmd_attn_dump, "Write per-head attention heatmaps")
    p.add_argument("--ckpt", type=str, default=None)
    p.add_argument("--ref", type=str, default=None)
    p.add_argument("--target", type=str, default=None)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ref-mask", type=str, default=None, help="Optional reference garment mask for the summary")
    p.add_argument("--target-mask", type=str, default=None, help="Optional target garment mask for the summary")
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--image-format", choices=IMAGE_FORMATS, default=None)

    p = sub.add_parser("gradcheck", help="Finite-difference gradient check")
    p.add_argument("--config", choices=MODEL_PRESETS, default="tiny", help="Model preset")
    p.add_argument("--samples", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        settings = load_settings()
        if settings.torch_threads > 0:
            torch.set_num_threads(settings.torch_threads)
        args.handler(args, settings)
    except TryOnError as e:
        print(f"❌ {e}")
        print(json.dumps({"error": e.category, "message": str(e), "exit_code": e.exit_code}), file=sys.stderr)
        return e.exit_code
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
