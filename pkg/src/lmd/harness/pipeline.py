"""End-to-end runs: data, stage 1, stage 2, evaluation, reports.

Variants:

=============  ==========================================  ==========================
name           stage 1                                     stage 2
=============  ==========================================  ==========================
full           configured (CE + relation terms)            ICC
no_rrl         CE only, no teacher                         ICC
no_icc         configured                                  none
no_vfc         configured                                  ICC, real resampled banks
no_fdc         configured                                  ICC with ``lambda_e = 0``
ce             CE only, no teacher                         none
rs             CE only, class-balanced batches             none
decoupling     CE only, no teacher                         classifier retrain on
                                                           class-balanced real features
=============  ==========================================  ==========================
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .. import diffcore as dc
from ..datagen import Dataset, _atomic_write, load_dataset, split, synth_longtail
from ..icc import IccConfig, IccTrace, m_step, resampled_real_bank, run_icc
from ..metrics import GROUPS, GroupSpec, MetricsReport, dumps_fixed, evaluate
from ..rrl import Stage1Config, Stage1Trace, train_stage1
from .checkpoint import save_checkpoint
from .config import VARIANTS, RunConfig, config_hash, to_items

logger = logging.getLogger(__name__)

SUMMARY_METRICS = ("bacc", "auc", "f1", "precision", "recall", "kappa", *GROUPS)
CLASSIFIER_SEED_OFFSET = 1_000_003


class StageFailure(RuntimeError):
    """A stage aborted; ``cause`` holds the original exception."""

    def __init__(self, variant: str, seed: int, stage: str, cause: BaseException):
        super().__init__(f"{variant} seed {seed}: {stage} failed: {cause}")
        self.variant, self.seed, self.stage, self.cause = variant, seed, stage, cause

    def record(self) -> dict:
        return {"status": "failed", "variant": self.variant, "seed": self.seed,
                "stage": self.stage, "error": f"{type(self.cause).__name__}: {self.cause}"}


@dataclass
class SeedRun:
    variant: str
    seed: int
    report: MetricsReport
    state: dc.ModelState
    stage1_trace: Stage1Trace
    icc_trace: Optional[IccTrace] = None
    stage1_state: Optional[dc.ModelState] = None


@dataclass
class PipelineResult:
    variant: str
    config_hash: str
    runs: List[SeedRun] = field(default_factory=list)

    @property
    def reports(self) -> List[MetricsReport]:
        return [r.report for r in self.runs]

    def aggregate(self) -> dict:
        return aggregate(self.reports)


# data ------------------------------------------------------------------------------

def load_splits(cfg: RunConfig, seed: int) -> Tuple[Dataset, Dataset, Dataset]:
    """Train/val/test for one seed: from ``data.path`` if set, else synthetic."""
    d = cfg.data
    ds = load_dataset(d.path) if d.path else synth_longtail(d.spec(seed))
    return split(ds, d.split, seed=seed)


def groups_for(cfg: RunConfig, train: Dataset) -> GroupSpec:
    if cfg.data.groups_file:
        g = GroupSpec.from_file(cfg.data.groups_file)
        g.validate(train.num_classes)
        return g
    return GroupSpec.tertiles(train.class_counts)


# per-variant stage settings -------------------------------------------------------------

def stage1_config(cfg: RunConfig, seed: int) -> Stage1Config:
    s1 = replace(cfg.stage1, seed=seed)
    v = cfg.variant
    if v in ("no_rrl", "ce", "decoupling"):
        return replace(s1, lambda1=0.0, use_teacher=False)
    if v == "rs":
        return replace(s1, lambda1=0.0, use_teacher=False, sampling="class_balanced")
    return s1


def stage2_config(cfg: RunConfig, seed: int) -> Optional[IccConfig]:
    """ICC settings for this variant, or ``None`` when there is no ICC stage."""
    v = cfg.variant
    if v in ("no_icc", "ce", "rs", "decoupling"):
        return None
    s2 = replace(cfg.stage2, seed=seed)
    if v == "no_vfc":
        return replace(s2, use_vfc=False)
    if v == "no_fdc":
        return replace(s2, lambda_e=0.0)
    return s2


def decouple_classifier(train: Dataset, state: dc.ModelState, cfg: IccConfig) -> dc.ModelState:
    """Freeze the encoder; retrain a fresh classifier on class-balanced real features."""
    state = state.copy()
    _, _, feat_dim, k = state.dims
    fresh = dc.init_classifier(feat_dim, k, seed=cfg.seed + CLASSIFIER_SEED_OFFSET)
    for name, t in fresh.items():
        state.classifier_params[name].data = t.data
    feats = dc.features_of(state, train.features)
    bank = resampled_real_bank(feats, train.labels, k, cfg.R, seed=cfg.seed + 103)
    m_step(bank, state, replace(cfg, seed=cfg.seed + 107))
    return state


def _stage1_key(cfg: RunConfig, s1: Stage1Config) -> str:
    items = {k: v for k, v in to_items(cfg).items() if k.startswith("data.")}
    return repr((sorted(items.items()), s1))


# running ---------------------------------------------------------------------------

def run_seed(cfg: RunConfig, seed: int, cache: Optional[dict] = None) -> SeedRun:
    """One seed of one variant.  ``cache`` shares identical stage-1 runs."""
    variant = cfg.variant
    stage = "data"
    try:
        train, val, test = load_splits(cfg, seed)
        groups = groups_for(cfg, train)
        stage = "stage1"
        s1 = stage1_config(cfg, seed)
        key = _stage1_key(cfg, s1)
        if cache is not None and key in cache:
            state1, trace1 = cache[key]
        else:
            state1, trace1 = train_stage1(train, val, s1)
            if cache is not None:
                cache[key] = (state1, trace1)
        stage = "stage2"
        icc_trace = None
        s2 = stage2_config(cfg, seed)
        if variant == "decoupling":
            state = decouple_classifier(train, state1, replace(cfg.stage2, seed=seed))
        elif s2 is not None:
            state, icc_trace = run_icc(train, val, state1, s2, groups)
        else:
            state = state1
        stage = "eval"
        report = evaluate(dc.predict_proba(state, test.features), test.labels, groups,
                          seed=seed, config_hash=config_hash(cfg))
    except Exception as exc:
        raise StageFailure(variant, seed, stage, exc) from exc
    return SeedRun(variant, seed, report, state, trace1, icc_trace, state1)


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("LMD_THREADS", "1")))
    except ValueError:
        return 1


def _map_seeds(fn, cfg: RunConfig, seeds: Sequence[int]):
    workers = min(_threads(), len(seeds))
    if workers <= 1:
        return [fn(cfg, s) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, [cfg] * len(seeds), seeds))


def _run_one(cfg: RunConfig, seed: int) -> SeedRun:
    return run_seed(cfg, seed)


def run_pipeline(cfg: RunConfig, out_dir: Optional[str] = None) -> PipelineResult:
    """All seeds of ``cfg.variant``; writes reports under ``out_dir`` if given."""
    try:
        runs = _map_seeds(_run_one, cfg, cfg.seeds)
    except StageFailure as exc:
        if out_dir:
            write_failure(out_dir, exc)
        raise
    result = PipelineResult(cfg.variant, config_hash(cfg), runs)
    if out_dir:
        write_result(out_dir, result, cfg)
    return result


def run_baseline_decoupling(cfg: RunConfig, out_dir: Optional[str] = None) -> PipelineResult:
    return run_pipeline(cfg.for_variant("decoupling"), out_dir)


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    """Mean and sample standard deviation (0 for a single seed) of each summary metric."""
    out = {}
    for name in SUMMARY_METRICS:
        vals = np.array([_metric(r, name) for r in reports], dtype=float)
        out[name] = {"mean": float(np.mean(vals)),
                     "std": float(np.std(vals, ddof=1)) if vals.size > 1 else 0.0}
    out["n_seeds"] = len(reports)
    out["seeds"] = [r.seed for r in reports]
    return out


def _metric(report: MetricsReport, name: str) -> float:
    if name in GROUPS:
        return report.group_bacc[name]
    return report.to_json_dict()[name]


# ablation table ---------------------------------------------------------------------------

@dataclass
class AblationTable:
    rows: Dict[str, dict]
    per_seed: Dict[str, List[MetricsReport]]
    stage1_traces: Dict[str, List[Stage1Trace]] = field(default_factory=dict)
    icc_traces: Dict[str, List[IccTrace]] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"rows": self.rows,
                "per_seed": {v: [r.to_json_dict() for r in reps]
                             for v, reps in self.per_seed.items()}}

    def to_text(self) -> str:
        cols = SUMMARY_METRICS
        name_w = max(len("variant"), *(len(v) for v in self.rows))
        header = "variant".ljust(name_w) + "".join(f"{c:>17}" for c in cols)
        lines = [header, "-" * len(header)]
        for v, row in self.rows.items():
            cells = "".join(f"{row[c]['mean']:>9.4f} ±{row[c]['std']:.4f}"[:17].rjust(17)
                            for c in cols)
            lines.append(v.ljust(name_w) + cells)
        return "\n".join(lines) + "\n"


def _seed_all_variants(cfg: RunConfig, seed: int, variants: Sequence[str]) -> List[SeedRun]:
    cache: dict = {}
    runs = []
    for v in variants:
        run = run_seed(cfg.for_variant(v), seed, cache)
        run.state = run.stage1_state = None  # keep the result pickle small
        runs.append(run)
    return runs


def ablation_matrix(cfg: RunConfig, out_dir: Optional[str] = None,
                    variants: Sequence[str] = VARIANTS) -> AblationTable:
    """Every variant over the same seeds and data; stage 1 is shared where identical."""
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}")
    seeds = list(cfg.seeds)
    workers = min(_threads(), len(seeds))
    try:
        if workers <= 1:
            by_seed = [_seed_all_variants(cfg, s, variants) for s in seeds]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                by_seed = list(pool.map(_seed_all_variants, [cfg] * len(seeds), seeds,
                                        [tuple(variants)] * len(seeds)))
    except StageFailure as exc:
        if out_dir:
            write_failure(out_dir, exc)
        raise
    table = AblationTable({}, {}, {}, {})
    for i, v in enumerate(variants):
        runs = [by_seed[j][i] for j in range(len(seeds))]
        table.per_seed[v] = [r.report for r in runs]
        table.rows[v] = aggregate(table.per_seed[v])
        table.stage1_traces[v] = [r.stage1_trace for r in runs]
        table.icc_traces[v] = [r.icc_trace for r in runs if r.icc_trace is not None]
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        _atomic_write(os.path.join(out_dir, "ablation.json"),
                      dumps_fixed(table.to_json_dict()).encode())
        _atomic_write(os.path.join(out_dir, "ablation.txt"), table.to_text().encode())
        _write_manifest(out_dir, {"status": "ok", "variants": list(variants), "seeds": seeds,
                                  "config_hash": config_hash(cfg)})
    return table


# features ------------------------------------------------------------------------------

def export_features(state: dc.ModelState, ds: Dataset, path: str) -> None:
    """CSV with one column per feature dimension (``z0..``) and a ``label`` column."""
    feats = dc.features_of(state, ds.features)
    header = ",".join([f"z{i}" for i in range(feats.shape[1])] + ["label"])
    lines = [header] + [",".join([*(f"{v:.9g}" for v in row), str(int(y))])
                        for row, y in zip(feats, ds.labels)]
    _atomic_write(path, ("\n".join(lines) + "\n").encode())


def load_features(path: str) -> Tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :-1], data[:, -1].astype(np.int64)


# output files ------------------------------------------------------------------------------

def _write_manifest(out_dir: str, record: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    _atomic_write(os.path.join(out_dir, "manifest.json"),
                  (json.dumps(record, indent=2, sort_keys=True) + "\n").encode())


def write_failure(out_dir: str, exc: StageFailure) -> None:
    _write_manifest(out_dir, exc.record())


def write_result(out_dir: str, result: PipelineResult, cfg: RunConfig) -> None:
    base = os.path.join(out_dir, result.variant)
    for run in result.runs:
        d = os.path.join(base, f"seed_{run.seed}")
        os.makedirs(d, exist_ok=True)
        _atomic_write(os.path.join(d, "report.json"), run.report.to_json().encode())
        _atomic_write(os.path.join(d, "stage1_trace.json"),
                      dumps_fixed(run.stage1_trace.to_dict()).encode())
        if run.icc_trace is not None:
            _atomic_write(os.path.join(d, "icc_trace.json"),
                          dumps_fixed(run.icc_trace.to_dict()).encode())
            _atomic_write(os.path.join(d, "icc_timing.json"),
                          dumps_fixed({"wall_clock": run.icc_trace.wall_clock}).encode())
        if run.state is not None:
            save_checkpoint(run.state, os.path.join(d, "model.ckpt"),
                            {"stage": "final", "seed": run.seed, "variant": result.variant,
                             "config_hash": result.config_hash})
    _atomic_write(os.path.join(base, "aggregate.json"), dumps_fixed(result.aggregate()).encode())
    _write_manifest(out_dir, {"status": "ok", "variant": result.variant,
                              "seeds": list(cfg.seeds), "config_hash": result.config_hash})


__all__ = [
    "AblationTable", "PipelineResult", "SeedRun", "StageFailure", "ablation_matrix",
    "aggregate", "decouple_classifier", "export_features", "groups_for", "load_features",
    "load_splits", "run_baseline_decoupling", "run_pipeline", "run_seed", "stage1_config",
    "stage2_config", "write_result",
]
