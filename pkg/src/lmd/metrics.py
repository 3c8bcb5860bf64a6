"""Balanced evaluation: confusion, BACC, macro P/R/F1, OvR AUC, quadratic kappa,
head/medium/tail aggregation and the report JSON."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

GROUPS = ("head", "medium", "tail")


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    """``M[i, j]`` counts samples with true class i predicted as j."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape:
        raise ValueError("y_true and y_pred differ in length")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= num_classes):
            raise ValueError(f"{name} has labels outside [0, {num_classes})")
    flat = np.bincount(y_true * num_classes + y_pred, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def per_class_recall(confusion) -> np.ndarray:
    """Recall per class; NaN where the class has no true samples."""
    cm = np.asarray(confusion, dtype=np.float64)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm) / support, np.nan)


def balanced_accuracy(confusion) -> float:
    recall = per_class_recall(confusion)
    present = ~np.isnan(recall)
    if not present.all():
        warnings.warn(f"classes {np.flatnonzero(~present).tolist()} have no samples; "
                      "excluded from BACC", stacklevel=2)
    if not present.any():
        return 0.0
    return float(np.mean(recall[present]))


def macro_f1_precision_recall(confusion):
    """Unweighted class means of F1, precision and recall.

    Zero denominators (never-predicted or absent classes) count as 0.
    """
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    col, row = cm.sum(axis=0), cm.sum(axis=1)
    if np.any(col == 0):
        warnings.warn("some classes are never predicted; precision set to 0", stacklevel=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(col > 0, tp / col, 0.0)
        recall = np.where(row > 0, tp / row, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return float(f1.mean()), float(precision.mean()), float(recall.mean())


def binary_auc(scores, positive) -> float:
    """Rank-based (Mann-Whitney) AUC; ties count one half."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_ovr_macro(scores, y_true) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    aucs, skipped = [], []
    for k in range(scores.shape[1]):
        pos = y_true == k
        if pos.all() or not pos.any():
            skipped.append(k)
            continue
        aucs.append(binary_auc(scores[:, k], pos))
    if skipped:
        warnings.warn(f"AUC skipped classes {skipped} (no positives or no negatives)",
                      stacklevel=2)
    return float(np.mean(aucs)) if aucs else 0.0


def quadratic_weighted_kappa(confusion) -> float:
    observed = np.asarray(confusion, dtype=np.float64)
    k = observed.shape[0]
    if k < 2 or observed.sum() == 0:
        warnings.warn("kappa undefined for this confusion matrix; returning 0", stacklevel=2)
        return 0.0
    i, j = np.indices((k, k))
    weights = (i - j) ** 2 / (k - 1) ** 2
    expected = np.outer(observed.sum(axis=1), observed.sum(axis=0)) / observed.sum()
    denom = np.sum(weights * expected)
    if denom == 0:
        warnings.warn("kappa denominator is zero; returning 0", stacklevel=2)
        return 0.0
    return float(1.0 - np.sum(weights * observed) / denom)


@dataclass(frozen=True)
class GroupSpec:
    assignment: Dict[int, str]

    def __post_init__(self):
        bad = {c: g for c, g in self.assignment.items() if g not in GROUPS}
        if bad:
            raise ValueError(f"unknown group names: {bad}")

    def validate(self, num_classes: int) -> None:
        if sorted(self.assignment) != list(range(num_classes)):
            raise ValueError("every class must be assigned to exactly one group")

    def members(self, group: str):
        return sorted(c for c, g in self.assignment.items() if g == group)

    @classmethod
    def tertiles(cls, train_counts: Sequence[int]) -> "GroupSpec":
        """Split classes by training frequency into three near-equal bands.

        Band sizes follow ``np.array_split`` (extra classes go to the head
        side); a class whose count equals the last count of the previous band
        joins that band.
        """
        counts = np.asarray(train_counts)
        order = sorted(range(len(counts)), key=lambda c: (-counts[c], c))
        sizes = [len(b) for b in np.array_split(np.arange(len(order)), 3)]
        assignment, pos = {}, 0
        for group, size in zip(GROUPS, sizes):
            band = order[pos:pos + size]
            pos += size
            for c in band:
                assignment[c] = group
        for prev, nxt in (("head", "medium"), ("medium", "tail")):
            prev_members = [c for c in order if assignment[c] == prev]
            if not prev_members:
                continue
            floor = counts[prev_members[-1]]
            for c in order:
                if assignment[c] == nxt and counts[c] == floor:
                    assignment[c] = prev
        return cls(assignment)

    @classmethod
    def from_file(cls, path: str) -> "GroupSpec":
        """Read ``class=group`` lines."""
        assignment = {}
        with open(path) as fh:
            for line in fh:
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                c, g = (s.strip() for s in line.split("=", 1))
                if int(c) in assignment:
                    raise ValueError(f"class {c} assigned twice")
                assignment[int(c)] = g
        return cls(assignment)


def group_bacc(confusion, groups: GroupSpec) -> Dict[str, float]:
    recall = per_class_recall(confusion)
    out = {}
    for g in GROUPS:
        vals = [recall[c] for c in groups.members(g) if not np.isnan(recall[c])]
        out[g] = float(np.mean(vals)) if vals else float("nan")
    out["overall"] = balanced_accuracy(confusion)
    return out


@dataclass
class MetricsReport:
    confusion: np.ndarray
    auc_macro: float
    bacc: float
    f1_macro: float
    kappa_quadratic: float
    precision_macro: float
    recall_macro: float
    group_bacc: Dict[str, float]
    n_eval: int
    seed: Optional[int] = None
    config_hash: str = ""
    extra: Dict[str, float] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "auc": self.auc_macro,
            "bacc": self.bacc,
            "f1": self.f1_macro,
            "kappa": self.kappa_quadratic,
            "precision": self.precision_macro,
            "recall": self.recall_macro,
            "group_bacc": {g: self.group_bacc[g] for g in (*GROUPS, "overall")},
            "confusion": np.asarray(self.confusion).astype(int).tolist(),
            "n_eval": int(self.n_eval),
            "seed": self.seed,
            "config_hash": self.config_hash,
        }

    def to_json(self) -> str:
        return dumps_fixed(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, d: Mapping) -> "MetricsReport":
        return cls(
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            auc_macro=float(d["auc"]),
            bacc=float(d["bacc"]),
            f1_macro=float(d["f1"]),
            kappa_quadratic=float(d["kappa"]),
            precision_macro=float(d["precision"]),
            recall_macro=float(d["recall"]),
            group_bacc={k: float(v) for k, v in d["group_bacc"].items()},
            n_eval=int(d["n_eval"]),
            seed=d.get("seed"),
            config_hash=d.get("config_hash", ""),
        )


def evaluate(scores, y_true, groups: GroupSpec, seed=None, config_hash: str = "") -> MetricsReport:
    """Full report from class scores (rows stochastic) and true labels."""
    scores = np.asarray(scores, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.int64)
    k = scores.shape[1]
    groups.validate(k)
    cm = confusion_matrix(y_true, scores.argmax(axis=1), k)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        f1, precision, recall = macro_f1_precision_recall(cm)
        return MetricsReport(
            confusion=cm,
            auc_macro=auc_ovr_macro(scores, y_true),
            bacc=balanced_accuracy(cm),
            f1_macro=f1,
            kappa_quadratic=quadratic_weighted_kappa(cm),
            precision_macro=precision,
            recall_macro=recall,
            group_bacc=group_bacc(cm, groups),
            n_eval=int(y_true.size),
            seed=seed,
            config_hash=config_hash,
        )


def _fmt(value) -> str:
    if isinstance(value, bool) or value is None:
        return "true" if value is True else "false" if value is False else "null"
    if isinstance(value, (float, np.floating)):
        if not np.isfinite(value):
            return "null"
        text = f"{float(value):.6f}"
        return "0.000000" if text == "-0.000000" else text
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, Mapping):
        return "{" + ", ".join(f"{_fmt(str(k))}: {_fmt(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialise {type(value).__name__}")


def dumps_fixed(obj) -> str:
    """JSON text with every float written with exactly six decimals."""
    return _fmt(obj) + "\n"
