"""Command-line entry point: synth, train, eval, bench.

Every failure exits nonzero and prints one machine-parsable line of the form
``ERROR[<code>]: <message>`` to stderr.  The output root defaults to the
``CROSSVIEW_REID_OUT`` environment variable (falling back to ``./runs``).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import config_reference, load_config
from .core import ViewId
from .data import (
    ALTITUDES,
    FrameStore,
    SynthSpec,
    generate_synthetic,
    read_manifest,
    write_manifest,
)
from .errors import (
    ConfigError,
    PreconditionError,
    ProtocolError,
    TrainingError,
    ValidationError,
)
from .evaluation import evaluate, measure_throughput
from .model import ModelConfig, ReIDModel
from .training import StageConfig, TrainingData, run_stage

EXIT_CODES = [
    (ConfigError, "config", 3),
    (PreconditionError, "precondition", 4),
    (ProtocolError, "protocol", 6),
    (TrainingError, "training", 7),
    (ValidationError, "validation", 8),
    (FileExistsError, "io", 5),
    (FileNotFoundError, "io", 5),
    (OSError, "io", 5),
]


def _output_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get("CROSSVIEW_REID_OUT", "runs"))


def cmd_synth(args) -> int:
    views = []
    for name in args.views.split(","):
        views.append(ViewId.parse(name))
    out_dir = Path(args.out)
    manifest_path = out_dir / "manifest.jsonl"
    if manifest_path.exists() and not args.force:
        raise FileExistsError(
            f"{manifest_path} already exists; pass --force to overwrite"
        )
    spec = SynthSpec(
        num_ids=args.ids,
        views=tuple(views),
        altitudes=tuple(args.altitudes),
        frames_per_tracklet=args.frames,
        tracklets_per_view=args.tracklets_per_view,
        image_h=args.image_h,
        image_w=args.image_w,
        seed=args.seed,
    )
    manifest = generate_synthetic(spec, out_dir)
    write_manifest(manifest, manifest_path)
    print(f"wrote {len(manifest.records)} tracklet records to {manifest_path}")
    return 0


def _stage_overrides(args) -> dict:
    keys = ("epochs", "batch_size", "base_lr", "warmup_epochs", "seed", "k_clips")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def cmd_train(args) -> int:
    overrides = {"data": {"manifest": args.data, "frames_dir": args.frames}}
    overrides[f"stage{args.stage}"] = _stage_overrides(args)
    cfg = load_config(args.config, overrides)
    if cfg.data.manifest is None or cfg.data.frames_dir is None:
        raise ConfigError("training needs a manifest and a frames directory")
    if args.stage == 2 and args.from_stage1 is None:
        raise PreconditionError("stage 2 requires --from-stage1 <checkpoint>")
    manifest = read_manifest(cfg.data.manifest)
    model_cfg = cfg.model
    num_ids = len(manifest.person_ids())
    if model_cfg.num_ids != num_ids:
        model_cfg = ModelConfig(**{**model_cfg.__dict__, "num_ids": num_ids})
    store = FrameStore(cfg.data.frames_dir, dtype=model_cfg.torch_dtype())
    data = TrainingData(manifest, store, t_frames=model_cfg.t_frames)
    stage_cfg: StageConfig = getattr(cfg, f"stage{args.stage}")
    model = ReIDModel(model_cfg)
    out_dir = _output_root(args)
    ckpt, history = run_stage(
        model, data, stage_cfg, cfg.loss, out_dir,
        from_stage1=args.from_stage1, resume_from=args.resume,
    )
    print(json.dumps({
        "checkpoint": str(ckpt),
        "epochs": len(history),
        "final_loss": history[-1]["loss"] if history else None,
    }))
    return 0


def cmd_eval(args) -> int:
    overrides = {
        "data": {"manifest": args.data, "frames_dir": args.frames},
        "eval": {
            "direction": args.direction, "altitude": args.altitude,
            "rerank": args.rerank, "k1": args.k1, "k2": args.k2,
            "lam": args.lam, "memory": args.memory, "export": args.export,
        },
    }
    cfg = load_config(args.config, overrides)
    if cfg.data.manifest is None or cfg.data.frames_dir is None:
        raise ConfigError("evaluation needs a manifest and a frames directory")
    manifest = read_manifest(cfg.data.manifest)
    store = FrameStore(cfg.data.frames_dir)
    report = evaluate(
        args.checkpoint, manifest, store,
        direction=cfg.eval.direction, altitude=cfg.eval.altitude,
        rerank=cfg.eval.rerank, memory_mode=cfg.eval.memory,
        k1=cfg.eval.k1, k2=cfg.eval.k2, lam=cfg.eval.lam,
        export_path=cfg.eval.export,
    )
    print(report.to_json())
    out_dir = _output_root(args)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = out_dir / "metrics.jsonl"
    with results.open("a", encoding="utf-8") as fh:
        fh.write(report.to_json() + "\n")
    return 0


def cmd_bench(args) -> int:
    clips_per_sec = measure_throughput(
        args.checkpoint, batch=args.batch, warmup=args.warmup,
        iters=args.iters, memory_mode=args.memory,
    )
    print(json.dumps({"clips_per_sec": clips_per_sec}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossview-reid",
        description="Cross-view video person re-identification toolkit.",
        epilog="Config file keys and defaults:\n" + config_reference(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cross-view dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ids", type=int, default=10)
    p.add_argument("--views", default="aerial,ground",
                   help="comma-separated subset of aerial,ground,wearable")
    p.add_argument("--altitudes", type=int, nargs="+", default=list(ALTITUDES))
    p.add_argument("--frames", type=int, default=12, help="frames per tracklet")
    p.add_argument("--tracklets-per-view", type=int, default=2)
    p.add_argument("--image-h", type=int, default=64)
    p.add_argument("--image-w", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", default=None, help="YAML config file")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--data", default=None, help="manifest path")
    p.add_argument("--frames", default=None, help="frame payload directory")
    p.add_argument("--out", default=None, help="output root")
    p.add_argument("--from-stage1", default=None, help="stage-1 checkpoint")
    p.add_argument("--resume", default=None, help="mid-stage checkpoint to resume")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--base-lr", dest="base_lr", type=float, default=None)
    p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int, default=None)
    p.add_argument("--k-clips", dest="k_clips", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval evaluation of a checkpoint")
    p.add_argument("--config", default=None)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default=None, help="manifest path")
    p.add_argument("--frames", default=None)
    p.add_argument("--direction", choices=("a2g", "g2a"), default=None)
    p.add_argument("--altitude", default=None, help="15|30|80|120|all")
    rer = p.add_mutually_exclusive_group()
    rer.add_argument("--rerank", dest="rerank", action="store_true", default=None)
    rer.add_argument("--no-rerank", dest="rerank", action="store_false")
    p.add_argument("--k1", type=int, default=None)
    p.add_argument("--k2", type=int, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--memory", choices=("topk", "off"), default=None)
    p.add_argument("--export", default=None, help="embedding CSV path")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="feed-forward throughput of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--memory", choices=("topk", "off"), default="topk")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CROSSVIEW_REID_LOG", "WARNING"))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse errors already printed usage
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - single mapping point to exit codes
        for klass, code, status in EXIT_CODES:
            if isinstance(exc, klass):
                print(f"ERROR[{code}]: {exc}", file=sys.stderr)
                return status
        print(f"ERROR[internal]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
