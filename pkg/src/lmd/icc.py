"""Stage 2: iterative classifier calibration.

Each EM iteration estimates class-conditional Gaussians of the current
encoder's features, draws an equal number of virtual features per class,
retrains the classifier on them with the encoder frozen (M-step), then
fine-tunes the encoder with the classifier frozen under cross-entropy plus an
attraction/repulsion Mahalanobis regulariser (E-step).
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np
from scipy.linalg import cho_solve

from . import diffcore as dc
from .datagen import Dataset, class_balanced_indices, instance_batches
from .diffcore import NumericError, Tensor
from .metrics import GroupSpec, balanced_accuracy, confusion_matrix, group_bacc

logger = logging.getLogger(__name__)

SAMPLING_MODES = ("uniform", "class_balanced")
MAHALANOBIS_MODES = ("inverse", "as_printed")


@dataclass
class IccConfig:
    iterations: int = 5
    R: int = 50_000
    lambda_e: float = 1e-4
    lr_classifier: float = 1e-5
    lr_encoder: float = 1e-6
    m_epochs: int = 10
    e_epochs: int = 5
    batch_size: int = 128
    m_batch_size: int = 1024
    max_grad_norm: Optional[float] = None
    mahalanobis_mode: str = "inverse"
    e_step_sampling: str = "uniform"
    m_step_stats_sampling: str = "class_balanced"
    moment_momentum: float = 0.9
    ridge: float = 1e-4
    use_vfc: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.lambda_e < 0:
            raise ValueError("lambda_e must be >= 0")
        if self.m_epochs < 0 or self.e_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.mahalanobis_mode not in MAHALANOBIS_MODES:
            raise ValueError(f"unknown mahalanobis_mode {self.mahalanobis_mode!r}")
        for name in ("e_step_sampling", "m_step_stats_sampling"):
            if getattr(self, name) not in SAMPLING_MODES:
                raise ValueError(f"unknown {name} {getattr(self, name)!r}")
        if not 0.0 <= self.moment_momentum < 1.0:
            raise ValueError("moment_momentum must lie in [0, 1)")


# moments ---------------------------------------------------------------------

def psd_cholesky(s: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular ``L`` with ``L L^T = s`` for symmetric PSD ``s``.

    Falls back to a pivot-free semidefinite factorisation (zero columns for
    vanishing pivots) when LAPACK rejects a singular matrix.
    """
    try:
        return np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        pass
    n = s.shape[0]
    low = np.zeros_like(s)
    scale = max(float(np.max(np.abs(np.diag(s)), initial=0.0)), 1.0)
    for j in range(n):
        d = s[j, j] - low[j, :j] @ low[j, :j]
        if d <= tol * scale:
            continue
        low[j, j] = np.sqrt(d)
        low[j + 1:, j] = (s[j + 1:, j] - low[j + 1:, :j] @ low[j, :j]) / low[j, j]
    return low


@dataclass
class ClassMoments:
    mu: np.ndarray
    sigma: np.ndarray
    chol: np.ndarray
    ridge_abs: np.ndarray
    sample_counts: np.ndarray
    ridge: float = 1e-4
    ema_momentum: float = 0.9
    _metric_cache: Dict[str, np.ndarray] = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_classes(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]

    @classmethod
    def from_sigma(cls, mu, sigma, counts, ridge: float = 1e-4,
                   ema_momentum: float = 0.9) -> "ClassMoments":
        """Symmetrise, add the per-class ridge and factor."""
        mu = np.asarray(mu, dtype=np.float64)
        sigma = np.asarray(sigma, dtype=np.float64)
        sigma = 0.5 * (sigma + np.swapaxes(sigma, 1, 2))
        c = mu.shape[1]
        ridge_abs = np.empty(len(mu))
        chol = np.empty_like(sigma)
        eye = np.eye(c)
        for k in range(len(mu)):
            tr = float(np.trace(sigma[k]))
            ridge_abs[k] = ridge * tr / c if tr > 0 else ridge
            chol[k] = psd_cholesky(sigma[k] + ridge_abs[k] * eye)
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(sigma))):
            raise NumericError("class moments are not finite")
        return cls(mu, sigma, chol, ridge_abs, np.asarray(counts, dtype=np.int64), ridge,
                   ema_momentum)

    def regularized(self, k: int) -> np.ndarray:
        return self.sigma[k] + self.ridge_abs[k] * np.eye(self.dim)

    def metric(self, mode: str) -> np.ndarray:
        """Stacked K x C x C matrices used inside the quadratic forms."""
        if mode not in MAHALANOBIS_MODES:
            raise ValueError(f"unknown mahalanobis_mode {mode!r}")
        if mode not in self._metric_cache:
            if mode == "as_printed":
                mats = self.sigma.copy()
            else:
                eye = np.eye(self.dim)
                mats = np.stack([cho_solve((self.chol[k], True), eye)
                                 for k in range(self.num_classes)])
            self._metric_cache[mode] = 0.5 * (mats + np.swapaxes(mats, 1, 2))
        return self._metric_cache[mode]


def estimate_class_moments(features, labels, num_classes: Optional[int] = None,
                           mode: str = "uniform", seed: int = 0, ridge: float = 1e-4,
                           ema_momentum: float = 0.9, n_draws: Optional[int] = None
                           ) -> ClassMoments:
    """Per-class mean and unbiased covariance of ``features``.

    ``uniform`` uses every sample of each class once.  ``class_balanced``
    computes the same statistics over a stream of ``n_draws`` (default N)
    class-balanced draws: class uniform, then an instance uniform within it.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    k = int(num_classes if num_classes is not None else labels.max() + 1)
    if mode not in SAMPLING_MODES:
        raise ValueError(f"unknown sampling mode {mode!r}")
    present = np.bincount(labels, minlength=k)
    if np.any(present == 0):
        raise ValueError(f"classes {np.flatnonzero(present == 0).tolist()} have no samples")
    if mode == "class_balanced":
        rng = np.random.default_rng([seed, 17])
        idx = class_balanced_indices(labels, k, n_draws or len(labels), rng)
        feats, labs = features[idx], labels[idx]
    else:
        feats, labs = features, labels
    c = features.shape[1]
    mu = np.zeros((k, c))
    sigma = np.zeros((k, c, c))
    counts = np.bincount(labs, minlength=k)
    for cls in range(k):
        x = feats[labs == cls]
        if x.shape[0] == 0:
            # class missed by the resampling stream: fall back to its real samples
            x = features[labels == cls]
        mu[cls] = x.mean(axis=0)
        if x.shape[0] < 2:
            warnings.warn(f"class {cls} has {x.shape[0]} sample(s); covariance set to ridge*I",
                          stacklevel=2)
            sigma[cls] = ridge * np.eye(c)
        else:
            d = x - mu[cls]
            sigma[cls] = d.T @ d / (x.shape[0] - 1)
    return ClassMoments.from_sigma(mu, sigma, counts, ridge, ema_momentum)


def ema_moments(prev: ClassMoments, new: ClassMoments,
                momentum: Optional[float] = None) -> ClassMoments:
    m = prev.ema_momentum if momentum is None else momentum
    if prev.mu.shape != new.mu.shape:
        raise ValueError("moment shapes differ")
    mu = m * prev.mu + (1.0 - m) * new.mu
    sigma = m * prev.sigma + (1.0 - m) * new.sigma
    return ClassMoments.from_sigma(mu, sigma, new.sample_counts, new.ridge, prev.ema_momentum)


# virtual features -------------------------------------------------------------

@dataclass
class VirtualFeatureBank:
    features: np.ndarray
    labels: np.ndarray
    per_class: int

    def __len__(self) -> int:
        return len(self.labels)


def vfc_sample(moments: ClassMoments, R: int, seed: int) -> VirtualFeatureBank:
    """``R`` draws of ``mu_k + L_k xi`` per class, with per-class derived seeds."""
    k, c = moments.num_classes, moments.dim
    feats = np.empty((R * k, c))
    for cls in range(k):
        xi = np.random.default_rng([seed, 23, cls]).standard_normal((R, c))
        feats[cls * R:(cls + 1) * R] = moments.mu[cls] + xi @ moments.chol[cls].T
    labels = np.repeat(np.arange(k), R)
    return VirtualFeatureBank(feats, labels, R)


def resampled_real_bank(features, labels, num_classes: int, per_class: int,
                        seed: int) -> VirtualFeatureBank:
    """Class-balanced resampling of real features; stands in for VFC when disabled."""
    rng = np.random.default_rng([seed, 29])
    idx = class_balanced_indices(labels, num_classes, per_class * num_classes, rng)
    order = np.argsort(labels[idx], kind="stable")
    idx = idx[order]
    return VirtualFeatureBank(np.asarray(features)[idx], np.asarray(labels)[idx], per_class)


# M-step ----------------------------------------------------------------------------

def m_step(bank: VirtualFeatureBank, state: dc.ModelState, cfg: IccConfig,
           history: Optional[List[float]] = None) -> float:
    """Train the classifier on the bank; the encoder is not touched."""
    sgd = dc.SgdConfig(cfg.lr_classifier, cfg.max_grad_norm)
    cls = state.classifier_params
    n = len(bank)
    last = float("nan")
    for epoch in range(cfg.m_epochs):
        acc = 0.0
        for idx in instance_batches(n, cfg.m_batch_size, cfg.seed + 31, epoch):
            loss = dc.cross_entropy(dc.classify(cls, bank.features[idx]), bank.labels[idx])
            loss.backward()
            try:
                dc.sgd_step(state, "classifier", sgd)
            except NumericError as exc:
                raise NumericError(f"M-step diverged in epoch {epoch}: {exc}") from exc
            acc += loss.item() * len(idx)
        last = acc / n
        if history is not None:
            history.append(last)
    return last


# E-step ------------------------------------------------------------------------------

def _class_forms(z: Tensor, labels, moments: ClassMoments, mode: str):
    labels = np.asarray(labels, dtype=np.int64)
    k = moments.num_classes
    if k < 2:
        raise ValueError("repulsion needs at least two classes")
    mats = moments.metric(mode)
    b = z.shape[0]
    psi = phi = None
    for cls in range(k):
        q = dc.quadratic_form(z, moments.mu[cls], mats[cls])
        own = (labels == cls).astype(np.float64)
        a = dc.total(q * own)
        r = dc.total(q * (1.0 - own))
        psi = a if psi is None else psi + a
        phi = r if phi is None else phi + r
    return psi * (1.0 / b), phi * (1.0 / (b * (k - 1)))


def attraction_psi(z: Tensor, labels, moments: ClassMoments, mode: str = "inverse") -> Tensor:
    """Mean quadratic-form distance of each feature to its own class mean."""
    return _class_forms(dc.as_tensor(z), labels, moments, mode)[0]


def repulsion_phi(z: Tensor, labels, moments: ClassMoments, mode: str = "inverse") -> Tensor:
    """Mean quadratic-form distance of each feature to the other K-1 class means."""
    return _class_forms(dc.as_tensor(z), labels, moments, mode)[1]


def fdc_loss(x: np.ndarray, y: np.ndarray, state: dc.ModelState, moments: ClassMoments,
             cfg: IccConfig):
    """``lambda_e * (psi - phi) + CE`` with the classifier frozen.

    Returns the loss tensor and a float breakdown with keys psi, phi, ce, total.
    """
    z = dc.encode(state.encoder_params, x)
    ce = dc.cross_entropy(dc.classify(dc.frozen(state.classifier_params), z), y)
    psi, phi = _class_forms(z, y, moments, cfg.mahalanobis_mode)
    loss = (psi - phi) * cfg.lambda_e + ce
    parts = {"psi": psi.item(), "phi": phi.item(), "ce": ce.item()}
    parts["total"] = loss.item()
    return loss, parts


def e_step(train_ds: Dataset, state: dc.ModelState, moments: ClassMoments, cfg: IccConfig,
           history: Optional[List[float]] = None) -> float:
    """Fine-tune the encoder under the FDC loss; the classifier is not touched."""
    sgd = dc.SgdConfig(cfg.lr_encoder, cfg.max_grad_norm)
    n = len(train_ds)
    steps = int(np.ceil(n / cfg.batch_size))
    rng = np.random.default_rng([cfg.seed, 37])
    last = float("nan")
    for epoch in range(cfg.e_epochs):
        if cfg.e_step_sampling == "uniform":
            batches = instance_batches(n, cfg.batch_size, cfg.seed + 41, epoch)
        else:
            batches = (class_balanced_indices(train_ds.labels, train_ds.num_classes,
                                              cfg.batch_size, rng) for _ in range(steps))
        acc, seen = 0.0, 0
        for idx in batches:
            loss, parts = fdc_loss(train_ds.features[idx], train_ds.labels[idx], state,
                                   moments, cfg)
            loss.backward()
            try:
                dc.sgd_step(state, "encoder", sgd)
            except NumericError as exc:
                raise NumericError(f"E-step diverged in epoch {epoch}: {exc}; "
                                   f"last breakdown {parts}") from exc
            acc += parts["total"] * len(idx)
            seen += len(idx)
        last = acc / seen
        if history is not None:
            history.append(last)
    return last


# driver ----------------------------------------------------------------------------------

@dataclass
class IccTrace:
    iterations: List[dict] = field(default_factory=list)
    wall_clock: List[float] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.iterations)

    @property
    def val_bacc(self) -> List[float]:
        return [it["val_bacc"] for it in self.iterations]

    def to_dict(self, with_timing: bool = False) -> dict:
        d = {"iterations": self.iterations}
        if with_timing:
            d["wall_clock"] = self.wall_clock
        return d


def _val_metrics(state, val_ds: Optional[Dataset], groups: Optional[GroupSpec]) -> dict:
    if val_ds is None or len(val_ds) == 0:
        return {"val_bacc": float("nan")}
    pred = dc.predict_proba(state, val_ds.features).argmax(axis=1)
    cm = confusion_matrix(val_ds.labels, pred, val_ds.num_classes)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        out = {"val_bacc": balanced_accuracy(cm)}
        if groups is not None:
            out.update({f"val_{g}": v for g, v in group_bacc(cm, groups).items()
                        if g != "overall"})
    return out


def run_icc(train_ds: Dataset, val_ds: Optional[Dataset], stage1_state: dc.ModelState,
            cfg: IccConfig, groups: Optional[GroupSpec] = None):
    """EM calibration starting from a stage-1 encoder.  Returns ``(state, trace)``.

    The classifier is re-initialised; each iteration runs moments -> EMA ->
    bank -> M-step -> E-step.
    """
    if cfg.iterations < 1:
        raise ValueError("iterations must be >= 1")
    state = stage1_state.copy()
    _, _, feat_dim, k = state.dims
    fresh = dc.init_classifier(feat_dim, k, seed=cfg.seed + 1_000_003)
    for name, t in fresh.items():
        state.classifier_params[name].data = t.data
    if groups is None:
        groups = GroupSpec.tertiles(train_ds.class_counts)
    trace = IccTrace()
    moments = None
    t0 = time.perf_counter()
    for j in range(cfg.iterations):
        feats = dc.features_of(state, train_ds.features)
        new = estimate_class_moments(feats, train_ds.labels, k, cfg.m_step_stats_sampling,
                                     seed=cfg.seed + 101 * j, ridge=cfg.ridge,
                                     ema_momentum=cfg.moment_momentum)
        moments = new if moments is None else ema_moments(moments, new)
        if cfg.use_vfc:
            bank = vfc_sample(moments, cfg.R, seed=cfg.seed + 103 * j)
        else:
            bank = resampled_real_bank(feats, train_ds.labels, k, cfg.R, seed=cfg.seed + 103 * j)
        m_loss = m_step(bank, state, replace(cfg, seed=cfg.seed + 107 * j))
        del bank
        e_loss = e_step(train_ds, state, moments, replace(cfg, seed=cfg.seed + 109 * j)) \
            if cfg.e_epochs > 0 else float("nan")
        record = {"iteration": j + 1, "m_loss": m_loss, "e_loss": e_loss}
        record.update(_val_metrics(state, val_ds, groups))
        trace.iterations.append(record)
        trace.wall_clock.append(time.perf_counter() - t0)
        logger.debug("icc iteration %d: %s", j + 1, record)
    return state, trace
