"""``cmda`` command line: generate, pretrain, selftrain, eval, dump-features, gap, show-config.

Outputs live under one root (``--out``, else ``$CMDA_OUT``, else ``runs``):

    <root>/data/{source,target,eval}.manifest   frame manifests
    <root>/pretrain/checkpoint.ckpt, metrics.jsonl
    <root>/oracle/...                           (pretrain --oracle)
    <root>/selftrain/checkpoint.ckpt, metrics.jsonl
    <root>/eval/<name>.json, <name>.csv

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import adapt
from .config import ConfigError, ExperimentConfig, dumps, load
from .diffcore import ContractError, NumericError
from .evaluation import EvalReport, UndefinedResultError, closed_gap
from .scene import (FrameFormatError, dataset_stats, generate_dataset, load_manifest_frames, save_frame,
                    write_manifest)

log = logging.getLogger("cmda")

ENV_OUT = "CMDA_OUT"
SPLITS = ("source", "target", "eval")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def out_root(args) -> Path:
    return Path(args.out or os.environ.get(ENV_OUT) or "runs")


def load_config(args) -> ExperimentConfig:
    cfg = load(args.config) if args.config else ExperimentConfig()
    if args.seed:
        cfg = cfg.with_seed(args.seed)
    return cfg


def data_dir(args) -> Path:
    return Path(args.data) if getattr(args, "data", None) else out_root(args) / "data"


def manifest_path(args, split: str) -> Path:
    return data_dir(args) / f"{split}.manifest"


def read_split(args, split: str):
    path = manifest_path(args, split)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path} (run 'cmda generate' first)")
    return load_manifest_frames(path)


# ------------------------------------------------------------------ commands


def cmd_generate(args) -> int:
    cfg = load_config(args)
    root = data_dir(args)
    ds = cfg.dataset
    plan = (("source", cfg.source.to_spec(), ds.source_frames, "source", ds.camera, 0),
            ("target", cfg.target.to_spec(), ds.target_frames, "target", False, 0),
            ("eval", cfg.target.to_spec(), ds.eval_frames, "target", False, 1))
    for split, spec, count, domain, camera, stream in plan:
        (root / split).mkdir(parents=True, exist_ok=True)
        frames = generate_dataset(spec, count, domain, with_camera=camera, stream=stream, prefix=split,
                                  workers=args.workers, image_size=ds.image_size)
        entries = []
        for f in frames:
            rel = Path(split) / f"{f.id}.cmda"
            save_frame(f, root / rel)
            entries.append((domain, rel.as_posix()))
        write_manifest(root / f"{split}.manifest", entries)
        st = dataset_stats(frames)
        print(f"{split}: frames={st['frames']} mean_points={st['mean_points']:.1f} "
              f"mean_objects={st['mean_objects']:.2f}")
    return 0


def _pretrain_checkpoint(args, stage_dir: str) -> Path:
    return out_root(args) / stage_dir / "checkpoint.ckpt"


def cmd_pretrain(args) -> int:
    cfg = load_config(args)
    oracle = args.oracle
    stage_dir = out_root(args) / ("oracle" if oracle else "pretrain")
    stage_dir.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config("pretrain")
    if oracle:
        tcfg = replace(tcfg, weights=replace(tcfg.weights, cmki=0.0))
        frames = read_split(args, "target")
    else:
        frames = read_split(args, "source")
    eval_frames = read_split(args, "eval") if manifest_path(args, "eval").exists() else []
    model = adapt.CMDAModel(cfg.model)
    state = adapt.make_state(model, tcfg)
    metrics = adapt.MetricsLog(stage_dir / "metrics.jsonl")
    rep = adapt.run_pretrain(state, frames, eval_frames, cfg.eval, metrics,
                             label="Oracle" if oracle else "Direct Transfer")
    adapt.save_checkpoint(stage_dir / "checkpoint.ckpt", state, {"oracle": oracle, "config": dumps(cfg)})
    print(f"{'oracle' if oracle else 'pretrain'}: steps={state.step} checkpoint={stage_dir / 'checkpoint.ckpt'}")
    if rep is not None:
        print(_fmt_report(rep))
    return 0


def cmd_selftrain(args) -> int:
    cfg = load_config(args)
    stage_dir = out_root(args) / "selftrain"
    ckpt = stage_dir / "checkpoint.ckpt"
    tcfg = cfg.train_config("selftrain")
    if args.resume:
        if not ckpt.exists():
            raise FileNotFoundError(f"self-training checkpoint not found: {ckpt} (nothing to resume)")
        state = adapt.load_checkpoint(ckpt, tcfg)
        metrics = adapt.MetricsLog(stage_dir / "metrics.jsonl", truncate=False)
    else:
        pre = Path(args.checkpoint) if args.checkpoint else _pretrain_checkpoint(args, "pretrain")
        if not pre.exists():
            raise FileNotFoundError(f"pretrain checkpoint not found: expected {pre} (run 'cmda pretrain' first)")
        model, meta = adapt.load_model(pre)
        if meta["stage"] != "pretrain":
            raise UsageError(f"{pre}: expected a pretrain-stage checkpoint, got stage {meta['stage']!r}")
        state = adapt.make_state(model, tcfg)
        stage_dir.mkdir(parents=True, exist_ok=True)
        metrics = adapt.MetricsLog(stage_dir / "metrics.jsonl")
    if args.rounds is not None:
        state.cfg = replace(state.cfg, rounds=min(args.rounds, tcfg.rounds))
    source = read_split(args, "source")
    target = read_split(args, "target")
    eval_frames = read_split(args, "eval") if manifest_path(args, "eval").exists() else []

    def checkpoint(st):
        adapt.save_checkpoint(ckpt, st, {"config": dumps(cfg)})

    adapt.run_selftrain(state, source, target, eval_frames, cfg.eval, metrics, on_round=checkpoint)
    if state.round == 0:
        checkpoint(state)
    for row in metrics.rows:
        print(json.dumps(row, sort_keys=True))
    print(f"selftrain: round={state.round} steps={state.step} checkpoint={ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args)
    default = "pretrain" if args.mode == "direct" else "selftrain"
    ckpt = Path(args.checkpoint) if args.checkpoint else _pretrain_checkpoint(args, default)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, meta = adapt.load_model(ckpt)
    oracle = bool(meta.get("extra", {}).get("oracle"))
    if args.mode == "direct":
        if meta["stage"] != "pretrain" or oracle:
            raise UsageError(f"direct mode needs a source-pretrained checkpoint; {ckpt} is "
                             f"{'an oracle' if oracle else 'a ' + meta['stage']} checkpoint")
        label = "Direct Transfer"
    else:
        label = "Oracle" if oracle else "standard"
    manifest = Path(args.manifest) if args.manifest else manifest_path(args, "eval")
    frames = load_manifest_frames(manifest)
    rep = adapt.evaluate_model(model, frames, cfg.eval, label, workers=args.workers)
    out_dir = out_root(args) / "eval"
    out_dir.mkdir(parents=True, exist_ok=True)
    name = args.name or ("oracle" if oracle else args.mode)
    rep.to_json(out_dir / f"{name}.json")
    rep.to_csv(out_dir / f"{name}.csv")
    print(_fmt_report(rep))
    print(f"report={out_dir / (name + '.json')}")
    return 0


def cmd_gap(args) -> int:
    reps = {k: EvalReport.from_json(getattr(args, k)) for k in ("direct", "oracle", "model")}
    for metric in ("bev_ap", "ap_3d"):
        vals = {k: getattr(r, metric) for k, r in reps.items()}
        if any(v is None for v in vals.values()):
            print(f"{metric}: absent (a report has no ground truth)")
            continue
        g = closed_gap(100 * vals["model"], 100 * vals["direct"], 100 * vals["oracle"])
        print(f"{metric}: direct={100 * vals['direct']:.2f} model={100 * vals['model']:.2f} "
              f"oracle={100 * vals['oracle']:.2f} closed_gap={g:.2f}%")
    return 0


def pooled_features(model: adapt.CMDAModel, frame) -> np.ndarray:
    from . import diffcore as dc

    with dc.no_grad():
        f = model.lidar_bev(frame.points).data
    return f.reshape(-1, f.shape[-1]).mean(axis=0)


def cmd_dump_features(args) -> int:
    ckpt = Path(args.checkpoint) if args.checkpoint else _pretrain_checkpoint(args, "pretrain")
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, _ = adapt.load_model(ckpt)
    frames = load_manifest_frames(Path(args.manifest) if args.manifest else manifest_path(args, "eval"))
    path = Path(args.csv) if args.csv else out_root(args) / "features.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        width = model.lidar.out_channels
        w.writerow(["frame_id", "domain"] + [f"f{k}" for k in range(width)])
        for fr in frames:
            w.writerow([fr.id, fr.domain] + [repr(float(v)) for v in pooled_features(model, fr)])
    print(f"features={path} rows={len(frames)}")
    return 0


def cmd_show_config(args) -> int:
    sys.stdout.write(dumps(load_config(args)))
    return 0


def _fmt_report(rep: EvalReport) -> str:
    def pct(v):
        return "absent" if v is None else f"{100 * v:.2f}"

    return (f"{rep.label}: BEV AP={pct(rep.bev_ap)} 3D AP={pct(rep.ap_3d)} (R40, IoU {rep.iou_thresh}) "
            f"gt={rep.n_gt} det={rep.n_det} tp={rep.tp_3d} fp={rep.fp_3d}")


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="experiment config file (sectioned key = value)")
    common.add_argument("--seed", type=int, default=0, help="offset added to every seed in the config")
    common.add_argument("--out", help=f"output root (default: ${ENV_OUT} or ./runs)")
    common.add_argument("--workers", type=int, default=1, help="parallel workers for generation and eval")
    common.add_argument("--data", help="dataset directory (default: <out>/data)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="cmda", description="Cross-modal, cross-domain LiDAR detection experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", parents=[common], help="write synthetic source/target/eval frames")

    sp = sub.add_parser("pretrain", parents=[common], help="source pretraining (Direct Transfer model)")
    sp.add_argument("--oracle", action="store_true", help="train on labelled target frames instead")

    sp = sub.add_parser("selftrain", parents=[common], help="self-training from a pretrain checkpoint")
    sp.add_argument("--checkpoint", help="pretrain checkpoint (default: <out>/pretrain/checkpoint.ckpt)")
    sp.add_argument("--resume", action="store_true", help="continue from <out>/selftrain/checkpoint.ckpt")
    sp.add_argument("--rounds", type=int, help="stop after this many rounds in total")

    sp = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a manifest")
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest", help="default: <data>/eval.manifest")
    sp.add_argument("--mode", choices=("direct", "standard"), default="standard")
    sp.add_argument("--name", help="report file stem (default: the mode, or 'oracle')")

    sp = sub.add_parser("dump-features", parents=[common], help="pooled BEV features per frame as CSV")
    sp.add_argument("--checkpoint")
    sp.add_argument("--manifest")
    sp.add_argument("--csv", help="output CSV (default: <out>/features.csv)")

    sp = sub.add_parser("gap", help="closed gap from three report JSON files")
    sp.add_argument("--direct", required=True)
    sp.add_argument("--oracle", required=True)
    sp.add_argument("--model", required=True)

    sub.add_parser("show-config", parents=[common], help="print the effective config")
    return p


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "selftrain": cmd_selftrain,
    "eval": cmd_eval,
    "dump-features": cmd_dump_features,
    "gap": cmd_gap,
    "show-config": cmd_show_config,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, UsageError, ContractError) as err:
        print(f"cmda: error: {err}", file=sys.stderr)
        return 1
    except (OSError, FrameFormatError, NumericError, UndefinedResultError, ValueError) as err:
        print(f"cmda: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
