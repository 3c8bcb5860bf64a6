"""``lmd`` command-line interface.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from typing import List, Optional

from . import diffcore as dc
from .datagen import (Dataset, DatasetFormatError, LongTailSpec, _atomic_write, save_dataset,
                      synth_longtail)
from .diffcore import NumericError
from .harness import plots
from .harness.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .harness.config import (ConfigError, RunConfig, apply_overrides, config_hash, dumps,
                             load_config, parse_text)
from .harness.pipeline import (StageFailure, ablation_matrix, export_features, groups_for,
                               load_splits, stage1_config)
from .icc import run_icc
from .metrics import dumps_fixed, evaluate
from .rrl import train_stage1

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


def _set_pairs(args) -> dict:
    pairs = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return apply_overrides(cfg, _set_pairs(args))


def _with(cfg: RunConfig, **pairs) -> RunConfig:
    return apply_overrides(cfg, {k: str(v) for k, v in pairs.items() if v is not None})


def _checkpoint_config(args):
    state, meta = load_checkpoint(args.ckpt)
    if "config" not in meta:
        raise CheckpointError("checkpoint has no embedded run configuration")
    cfg = parse_text(meta["config"])
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    cfg = apply_overrides(cfg, _set_pairs(args))
    return state, meta, cfg


def _split(cfg: RunConfig, seed: int, which: str) -> Dataset:
    train, val, test = load_splits(cfg, seed)
    return {"train": train, "val": val, "test": test}[which]


# commands ----------------------------------------------------------------------------------

def cmd_gen(args) -> None:
    spec = LongTailSpec(args.classes, args.n0, args.imbalance, args.dim, args.sep,
                        args.noise_dims, args.seed, args.sigma)
    ds = synth_longtail(spec)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples, class counts {ds.class_counts.tolist()} -> {args.out}")


def cmd_stage1(args) -> None:
    cfg = _with(_base_config(args), **{"data.path": args.data})
    train, val, _ = load_splits(cfg, args.seed)
    s1 = stage1_config(cfg, args.seed)
    state, trace = train_stage1(train, val, s1)
    os.makedirs(args.out, exist_ok=True)
    meta = {"stage": "stage1", "seed": args.seed, "config_hash": config_hash(cfg),
            "config": dumps(cfg)}
    save_checkpoint(state, os.path.join(args.out, "model.ckpt"), meta)
    _atomic_write(os.path.join(args.out, "stage1_trace.json"),
                  dumps_fixed(trace.to_dict()).encode())
    plots.plot_stage1_trace(trace, os.path.join(args.out, "stage1_trace.png"))
    print(f"stage 1 done: final loss {trace.total[-1]:.6f}, val BACC {trace.val_bacc[-1]:.4f}")


def cmd_stage2(args) -> None:
    state, meta, cfg = _checkpoint_config(args)
    cfg = _with(cfg, **{"stage2.iterations": args.iters, "stage2.R": args.r_virtual,
                        "stage2.lambda_e": args.lambda_e, "stage2.mahalanobis_mode": args.mode})
    seed = int(meta["seed"])
    train, val, _ = load_splits(cfg, seed)
    state, trace = run_icc(train, val, state, replace(cfg.stage2, seed=seed),
                           groups_for(cfg, train))
    os.makedirs(args.out, exist_ok=True)
    meta = {"stage": "stage2", "seed": seed, "config_hash": config_hash(cfg),
            "config": dumps(cfg)}
    save_checkpoint(state, os.path.join(args.out, "model.ckpt"), meta)
    _atomic_write(os.path.join(args.out, "icc_trace.json"), dumps_fixed(trace.to_dict()).encode())
    plots.plot_icc_traces([trace], os.path.join(args.out, "icc_trace.png"), [f"seed {seed}"])
    print("stage 2 done: val BACC per iteration "
          + " ".join(f"{v:.4f}" for v in trace.val_bacc))


def cmd_eval(args) -> None:
    state, meta, cfg = _checkpoint_config(args)
    if args.groups:
        cfg = _with(cfg, **{"data.groups_file": args.groups})
    seed = int(meta["seed"])
    train, val, test = load_splits(cfg, seed)
    ds = {"train": train, "val": val, "test": test}[args.split]
    report = evaluate(dc.predict_proba(state, ds.features), ds.labels, groups_for(cfg, train),
                      seed=seed, config_hash=config_hash(cfg))
    _atomic_write(args.out, report.to_json().encode())
    g = report.group_bacc
    print(f"BACC {report.bacc:.4f}  head {g['head']:.4f}  medium {g['medium']:.4f}  "
          f"tail {g['tail']:.4f}  -> {args.out}")


def cmd_ablate(args) -> None:
    cfg = _base_config(args)
    if args.data:
        cfg = _with(cfg, **{"data.path": args.data})
    if args.seeds:
        cfg = _with(cfg, **{"run.seeds": args.seeds})
    variants = args.variants.split(",") if args.variants else None
    table = ablation_matrix(cfg, args.out, **({"variants": variants} if variants else {}))
    plots.plot_group_bacc(table.rows, os.path.join(args.out, "ablation_groups.png"))
    icc = [(v, t) for v, traces in table.icc_traces.items() for t in traces[:1]]
    if icc:
        plots.plot_icc_traces([t for _, t in icc], os.path.join(args.out, "icc_traces.png"),
                              [v for v, _ in icc])
    first = next(iter(table.stage1_traces))
    plots.plot_stage1_trace(table.stage1_traces[first][0],
                            os.path.join(args.out, "stage1_trace.png"))
    sys.stdout.write(table.to_text())


def cmd_export(args) -> None:
    state, meta, cfg = _checkpoint_config(args)
    ds = _split(cfg, int(meta["seed"]), args.split)
    export_features(state, ds, args.out)
    print(f"wrote {len(ds)} rows -> {args.out}")


# parser ------------------------------------------------------------------------------------

def _add_config(p) -> None:
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic long-tailed dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--n0", type=int, default=1000, help="head class size")
    p.add_argument("--imbalance", type=float, default=100.0)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--noise-dims", type=int, default=4)
    p.add_argument("--sep", type=float, default=4.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help=".lmds binary or .csv")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("stage1", help="relation-aware representation learning")
    _add_config(p)
    p.add_argument("--data", help="dataset file (default: synthetic from config)")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_stage1)

    p = sub.add_parser("stage2", help="iterative classifier calibration")
    _add_config(p)
    p.add_argument("--ckpt", required=True, help="stage-1 checkpoint")
    p.add_argument("--iters", type=int)
    p.add_argument("--r-virtual", type=int, help="virtual features per class")
    p.add_argument("--lambda-e", type=float)
    p.add_argument("--mode", choices=("inverse", "as_printed"))
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_stage2)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--groups", help="class=group assignment file")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True, help="report JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run every variant and tabulate")
    _add_config(p)
    p.add_argument("--data")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--variants", help="comma-separated subset of variants")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-features", help="write encoder features as CSV")
    _add_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)
    return parser


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageFailure):
        if exc.stage == "data":
            return EXIT_DATA
        exc = exc.cause
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (DatasetFormatError, CheckpointError, OSError)):
        return EXIT_DATA
    if isinstance(exc, ValueError):
        return EXIT_CONFIG
    raise exc


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except Exception as exc:  # mapped onto the documented exit codes
        code = exit_code_for(exc)
        print(f"lmd {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
