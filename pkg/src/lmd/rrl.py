"""Stage 1: relation-aware representation learning.

A student MLP sees a strongly perturbed view, an EMA teacher sees a weakly
perturbed view.  The student is trained with cross-entropy plus three
consistency terms (prediction KL, sample Gram, channel Gram) weighted by
``lambda1``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from . import diffcore as dc
from .datagen import (Dataset, PerturbConfig, check_perturb_order, instance_batches, perturb,
                      sampler_class_balanced)
from .diffcore import NumericError, Tensor
from .metrics import balanced_accuracy, confusion_matrix

logger = logging.getLogger(__name__)

TERMS = ("ce", "prob", "sample", "channel", "total")


@dataclass
class Stage1Config:
    lambda1: float = 10.0
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.01
    max_grad_norm: Optional[float] = None
    ema_momentum: float = 0.99
    hidden: int = 64
    feature_dim: int = 32
    perturb_strong: PerturbConfig = field(default_factory=PerturbConfig.strong)
    perturb_weak: PerturbConfig = field(default_factory=PerturbConfig.weak)
    # "student_first": KL(student || teacher); "teacher_first": KL(teacher || student)
    kl_direction: str = "student_first"
    ce_view: str = "weak"
    use_teacher: bool = True
    sampling: str = "instance"
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 < 0:
            raise ValueError("lambda1 must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.kl_direction not in ("student_first", "teacher_first"):
            raise ValueError(f"unknown kl_direction {self.kl_direction!r}")
        if self.ce_view not in ("weak", "strong"):
            raise ValueError(f"unknown ce_view {self.ce_view!r}")
        if self.sampling not in ("instance", "class_balanced"):
            raise ValueError(f"unknown sampling {self.sampling!r}")
        check_perturb_order(self.perturb_weak, self.perturb_strong)


@dataclass
class Stage1Trace:
    ce: List[float] = field(default_factory=list)
    prob: List[float] = field(default_factory=list)
    sample: List[float] = field(default_factory=list)
    channel: List[float] = field(default_factory=list)
    total: List[float] = field(default_factory=list)
    val_bacc: List[float] = field(default_factory=list)

    def append(self, terms: Dict[str, float], val_bacc: float) -> None:
        for name in TERMS:
            getattr(self, name).append(float(terms[name]))
        self.val_bacc.append(float(val_bacc))

    def __len__(self) -> int:
        return len(self.total)

    def to_dict(self) -> dict:
        return {name: list(getattr(self, name)) for name in (*TERMS, "val_bacc")}

    @classmethod
    def from_dict(cls, d: dict) -> "Stage1Trace":
        return cls(**{k: [float(v) for v in d[k]] for k in (*TERMS, "val_bacc")})

    def last_fraction_slope(self, fraction: float = 0.1) -> float:
        """Least-squares slope of the total loss over the final ``fraction`` of epochs."""
        n = max(2, int(np.ceil(len(self.total) * fraction)))
        y = np.asarray(self.total[-n:])
        if y.size < 2:
            return 0.0
        return float(np.polyfit(np.arange(y.size), y, 1)[0])


def loss_prob(student_logits: Tensor, teacher_logits: Tensor,
              direction: str = "student_first") -> Tensor:
    """Prediction consistency; the teacher side never receives gradient."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError(f"logit shapes differ: {student_logits.shape} vs {teacher_logits.shape}")
    p_student = dc.softmax_rows(student_logits)
    p_teacher = dc.softmax_rows(teacher_logits.detach())
    if direction == "student_first":
        return dc.kl_rows(p_student, p_teacher)
    return dc.kl_rows(p_teacher, p_student)


def _check_pair(z_s: Tensor, z_w: Tensor) -> None:
    if z_s.data.ndim != 2 or z_s.shape != z_w.shape:
        raise ValueError(f"feature shapes differ: {z_s.shape} vs {z_w.shape}")


def loss_sample(z_s: Tensor, z_w: Tensor) -> Tensor:
    """``sum((z_s z_s^T - z_w z_w^T)^2) / B`` with ``z_w`` held fixed."""
    _check_pair(z_s, z_w)
    diff = dc.gram_sample(z_s) - dc.gram_sample(z_w.detach())
    return dc.total(dc.square(diff)) * (1.0 / z_s.shape[0])


def loss_channel(z_s: Tensor, z_w: Tensor) -> Tensor:
    """``sum((z_s^T z_s - z_w^T z_w)^2) / C`` with ``z_w`` held fixed."""
    _check_pair(z_s, z_w)
    diff = dc.gram_channel(z_s) - dc.gram_channel(z_w.detach())
    return dc.total(dc.square(diff)) * (1.0 / z_s.shape[1])


def loss_stage1(x_strong: np.ndarray, x_weak: np.ndarray, labels: np.ndarray,
                state: dc.ModelState, cfg: Stage1Config):
    """Total stage-1 loss and its float breakdown.

    ``total = CE + lambda1 * (sample + channel + prob / 2)``.
    """
    enc, cls = state.encoder_params, state.classifier_params
    z_s = dc.encode(enc, x_strong)
    logits_s = dc.classify(cls, z_s)
    if cfg.ce_view == "strong":
        ce = dc.cross_entropy(logits_s, labels)
    else:
        ce = dc.cross_entropy(dc.classify(cls, dc.encode(enc, x_weak)), labels)
    if not cfg.use_teacher or cfg.lambda1 == 0:
        terms = {"ce": ce.item(), "prob": 0.0, "sample": 0.0, "channel": 0.0, "total": ce.item()}
        return ce, terms
    t_enc = dc.frozen(state.teacher_encoder_params)
    t_cls = dc.frozen(state.teacher_classifier_params)
    z_t = dc.encode(t_enc, x_weak)
    logits_t = dc.classify(t_cls, z_t)
    prob = loss_prob(logits_s, logits_t, cfg.kl_direction)
    samp = loss_sample(z_s, z_t)
    chan = loss_channel(z_s, z_t)
    reg = samp + chan + prob * 0.5
    total = ce + reg * cfg.lambda1
    terms = {"ce": ce.item(), "prob": prob.item(), "sample": samp.item(),
             "channel": chan.item(), "total": total.item()}
    return total, terms


def val_bacc(state: dc.ModelState, ds: Optional[Dataset]) -> float:
    if ds is None or len(ds) == 0:
        return float("nan")
    pred = dc.predict_proba(state, ds.features).argmax(axis=1)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return balanced_accuracy(confusion_matrix(ds.labels, pred, ds.num_classes))


def train_stage1(train_ds: Dataset, val_ds: Optional[Dataset], cfg: Stage1Config,
                 state: Optional[dc.ModelState] = None):
    """Fixed-budget stage-1 training.  Returns ``(state, trace)``.

    Each step: perturbed views, forward, backward, SGD on the student
    encoder and classifier, then the EMA teacher update.
    """
    if state is None:
        state = dc.init_model(train_ds.dim, train_ds.num_classes, cfg.hidden, cfg.feature_dim,
                              seed=cfg.seed, ema_momentum=cfg.ema_momentum)
    sgd = dc.SgdConfig(cfg.lr, cfg.max_grad_norm)
    strong = cfg.perturb_strong.with_seed(cfg.seed * 2 + 1)
    weak = cfg.perturb_weak.with_seed(cfg.seed * 2 + 2)
    trace = Stage1Trace()
    n = len(train_ds)
    steps_per_epoch = int(np.ceil(n / cfg.batch_size))
    balanced = sampler_class_balanced(train_ds, cfg.batch_size, cfg.seed) \
        if cfg.sampling == "class_balanced" else None
    step = 0
    for epoch in range(cfg.epochs):
        sums = dict.fromkeys(TERMS, 0.0)
        if balanced is None:
            batches = instance_batches(n, cfg.batch_size, cfg.seed, epoch)
        else:
            batches = (next(balanced) for _ in range(steps_per_epoch))
        for idx in batches:
            x = train_ds.features[idx]
            y = train_ds.labels[idx]
            try:
                loss, terms = loss_stage1(perturb(x, strong, step), perturb(x, weak, step),
                                          y, state, cfg)
                loss.backward()
                dc.sgd_step(state, "both", sgd)
            except NumericError as exc:
                raise NumericError(
                    f"stage 1 diverged at epoch {epoch} step {step}: {exc}; "
                    f"last terms {trace.to_dict() if len(trace) else 'n/a'}") from exc
            if cfg.use_teacher:
                dc.ema_update(state)
            for k in TERMS:
                sums[k] += terms[k] * len(idx)
            step += 1
        trace.append({k: v / n for k, v in sums.items()}, val_bacc(state, val_ds))
        logger.debug("stage1 epoch %d total=%.4f val_bacc=%.4f",
                     epoch, trace.total[-1], trace.val_bacc[-1])
    return state, trace
