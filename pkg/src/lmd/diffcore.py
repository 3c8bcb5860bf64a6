"""Dense float64 tensors with a small reverse-mode tape, loss primitives,
SGD and EMA parameter mirroring.

The graph is rebuilt on every forward pass: each op returns a new
``Tensor`` holding references to its parents and a closure that pushes the
upstream gradient into them.  ``Tensor.backward`` walks the graph in reverse
topological order.  Nothing persists between forward passes.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PROB_EPS = 1e-12
_STOCHASTIC_TOL = 1e-6
_SYMMETRY_TOL = 1e-9


class ShapeError(ValueError):
    pass


class NumericError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN/Inf."""


class StateError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


class Tensor:
    """A float64 array that can take part in reverse-mode differentiation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: Sequence["Tensor"] = (),
        backward: Optional[Callable[[np.ndarray], None]] = None,
        name: Optional[str] = None,
    ):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(parents)
        self._backward = backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def tape_id(self) -> Optional[int]:
        return id(self) if self._backward is not None else None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Stop-gradient view sharing the same buffer."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        if not self.requires_grad:
            raise StateError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=np.float64)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            _check_finite(g, f"gradient of {node.name or 'node'}")
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def _topological(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward, name: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, parents=parents if needs else (),
                  backward=backward if needs else None, name=name)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"cannot subtract shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(out, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, (a, b), backward, "mul")


def square(x: Tensor) -> Tensor:
    def backward(g):
        return (2.0 * x.data * g,)

    return _make(x.data * x.data, (x,), backward, "square")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a 0-d tensor."""

    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.sum(x.data), (x,), backward, "sum")


def mean(x: Tensor) -> Tensor:
    n = x.data.size

    def backward(g):
        return (np.full(x.shape, float(g) / n),)

    return _make(np.mean(x.data), (x,), backward, "mean")


def transpose(x: Tensor) -> Tensor:
    def backward(g):
        return (g.T,)

    return _make(x.data.T.copy(), (x,), backward, "transpose")


def index_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def backward(g):
        out = np.zeros_like(x.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(x.data[idx], (x,), backward, "index_rows")


# linear algebra -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward, "matmul")


def gram_sample(z: Tensor) -> Tensor:
    """Sample relations ``z @ z.T`` (B x B)."""
    if z.data.ndim != 2:
        raise ShapeError(f"gram_sample expects a 2-D tensor, got {z.shape}")
    out = z.data @ z.data.T

    def backward(g):
        return ((g + g.T) @ z.data,)

    return _make(out, (z,), backward, "gram_sample")


def gram_channel(z: Tensor) -> Tensor:
    """Channel relations ``z.T @ z`` (C x C)."""
    if z.data.ndim != 2:
        raise ShapeError(f"gram_channel expects a 2-D tensor, got {z.shape}")
    out = z.data.T @ z.data

    def backward(g):
        return (z.data @ (g + g.T),)

    return _make(out, (z,), backward, "gram_channel")


def quadratic_form(x, mu, a) -> Tensor:
    """Row-wise ``(x_i - mu) A (x_i - mu)^T`` for a symmetric ``A``."""
    x, mu, a = as_tensor(x), as_tensor(mu), as_tensor(a)
    if x.data.ndim != 2 or mu.shape != (x.shape[1],) or a.shape != (x.shape[1], x.shape[1]):
        raise ShapeError(f"quadratic_form shapes x={x.shape} mu={mu.shape} a={a.shape}")
    if np.max(np.abs(a.data - a.data.T), initial=0.0) > _SYMMETRY_TOL:
        raise ValueError("quadratic_form requires a symmetric matrix")
    d = x.data - mu.data
    ad = d @ a.data
    out = np.einsum("bc,bc->b", ad, d)

    def backward(g):
        gx = 2.0 * g[:, None] * ad
        return gx, -gx.sum(axis=0), (d * g[:, None]).T @ d

    return _make(out, (x, mu, a), backward, "quadratic_form")


# probabilities --------------------------------------------------------------

def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(z: Tensor) -> Tensor:
    if z.data.ndim != 2 or z.shape[1] < 1:
        raise ShapeError(f"softmax_rows expects B x K with K >= 1, got {z.shape}")
    s = _softmax(z.data)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=1, keepdims=True)),)

    return _make(s, (z,), backward, "softmax")


def log_softmax_rows(z: Tensor) -> Tensor:
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _make(out, (z,), backward, "log_softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch mean of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy shapes logits={logits.shape} labels={labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    b = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(b)
    loss = np.mean(logz - shifted[rows, labels])

    def backward(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / b),)

    return _make(loss, (logits,), backward, "cross_entropy")


def kl_rows(p: Tensor, q: Tensor) -> Tensor:
    """Batch mean of ``sum_k p log(p / q)``; ``q`` clamped below at 1e-12.

    Pass ``q.detach()`` (or ``p.detach()``) to stop gradients on that side.
    """
    if p.shape != q.shape or p.data.ndim != 2:
        raise ShapeError(f"kl_rows shapes differ: {p.shape} vs {q.shape}")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < -_STOCHASTIC_TOL) or np.any(
            np.abs(t.data.sum(axis=1) - 1.0) > _STOCHASTIC_TOL
        ):
            raise ValueError(f"kl_rows: rows of {name} are not stochastic")
    b = p.shape[0]
    pc = np.clip(p.data, 0.0, None)
    qc = np.maximum(q.data, PROB_EPS)
    logp = np.log(np.maximum(pc, PROB_EPS))
    log_ratio = np.where(pc > 0, logp - np.log(qc), 0.0)
    out = np.sum(pc * log_ratio) / b

    def backward(g):
        scale = float(g) / b
        gp = np.where(pc > 0, log_ratio + 1.0, 0.0) * scale
        gq = np.where(q.data > PROB_EPS, -pc / qc, 0.0) * scale
        return gp, gq

    return _make(out, (p, q), backward, "kl_rows")


# model state ------------------------------------------------------------------

ENCODER_NAMES = ("enc.w1", "enc.b1", "enc.w2", "enc.b2")
CLASSIFIER_NAMES = ("cls.w", "cls.b")


@dataclass
class SgdConfig:
    learning_rate: float
    max_grad_norm: Optional[float] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.max_grad_norm is not None and not self.max_grad_norm > 0:
            raise ValueError("max_grad_norm must be positive when given")


@dataclass
class ModelState:
    """Student MLP encoder + linear classifier, and their EMA teacher mirror."""

    encoder_params: Dict[str, Tensor]
    classifier_params: Dict[str, Tensor]
    teacher_encoder_params: Dict[str, Tensor]
    teacher_classifier_params: Dict[str, Tensor]
    ema_momentum: float = 0.99

    def __post_init__(self):
        if not 0.0 < self.ema_momentum < 1.0:
            raise ValueError("ema_momentum must lie in (0, 1)")
        for student, teacher in (
            (self.encoder_params, self.teacher_encoder_params),
            (self.classifier_params, self.teacher_classifier_params),
        ):
            if list(student) != list(teacher):
                raise ShapeError("teacher and student parameter names differ")
            for name in student:
                if student[name].shape != teacher[name].shape:
                    raise ShapeError(f"teacher/student shape mismatch for {name}")
                teacher[name].requires_grad = False
                teacher[name].grad = None

    @property
    def dims(self) -> tuple:
        """(input_dim, hidden, feature_dim, num_classes)."""
        w1 = self.encoder_params["enc.w1"].shape
        w2 = self.encoder_params["enc.w2"].shape
        return w1[0], w1[1], w2[1], self.classifier_params["cls.w"].shape[1]

    def named_tensors(self) -> Dict[str, Tensor]:
        out = {}
        out.update(self.encoder_params)
        out.update(self.classifier_params)
        out.update({f"teacher.{k}": v for k, v in self.teacher_encoder_params.items()})
        out.update({f"teacher.{k}": v for k, v in self.teacher_classifier_params.items()})
        return out

    def copy(self) -> "ModelState":
        def dup(params, grad):
            return {k: Tensor(v.data.copy(), requires_grad=grad) for k, v in params.items()}

        return ModelState(
            dup(self.encoder_params, True),
            dup(self.classifier_params, True),
            dup(self.teacher_encoder_params, False),
            dup(self.teacher_classifier_params, False),
            self.ema_momentum,
        )

    def params_for(self, which: str) -> Dict[str, Tensor]:
        if which == "encoder":
            return dict(self.encoder_params)
        if which == "classifier":
            return dict(self.classifier_params)
        if which == "both":
            return {**self.encoder_params, **self.classifier_params}
        raise ValueError(f"unknown parameter group {which!r}")

    def zero_grad(self) -> None:
        for t in self.params_for("both").values():
            t.grad = None


def _init_linear(rng: np.random.Generator, fan_in: int, fan_out: int):
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    return w, np.zeros(fan_out)


def init_encoder(input_dim: int, hidden: int, feature_dim: int, seed: int) -> Dict[str, Tensor]:
    rng = np.random.default_rng([seed, 1])
    w1, b1 = _init_linear(rng, input_dim, hidden)
    w2, b2 = _init_linear(rng, hidden, feature_dim)
    arrays = dict(zip(ENCODER_NAMES, (w1, b1, w2, b2)))
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def init_classifier(feature_dim: int, num_classes: int, seed: int) -> Dict[str, Tensor]:
    rng = np.random.default_rng([seed, 2])
    bound = 1.0 / np.sqrt(feature_dim)
    w = rng.uniform(-bound, bound, size=(feature_dim, num_classes))
    arrays = {"cls.w": w, "cls.b": np.zeros(num_classes)}
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


def init_model(
    input_dim: int,
    num_classes: int,
    hidden: int = 64,
    feature_dim: int = 32,
    seed: int = 0,
    ema_momentum: float = 0.99,
) -> ModelState:
    """Random student with the teacher initialised as an exact copy."""
    enc = init_encoder(input_dim, hidden, feature_dim, seed)
    cls = init_classifier(feature_dim, num_classes, seed)
    return ModelState(
        enc,
        cls,
        {k: Tensor(v.data.copy()) for k, v in enc.items()},
        {k: Tensor(v.data.copy()) for k, v in cls.items()},
        ema_momentum,
    )


def encode(params: Dict[str, Tensor], x) -> Tensor:
    x = as_tensor(x)
    h = relu(matmul(x, params["enc.w1"]) + params["enc.b1"])
    return matmul(h, params["enc.w2"]) + params["enc.b2"]


def classify(params: Dict[str, Tensor], z) -> Tensor:
    return matmul(as_tensor(z), params["cls.w"]) + params["cls.b"]


def frozen(params: Dict[str, Tensor]) -> Dict[str, Tensor]:
    """Stop-gradient copies of a parameter set (buffers shared)."""
    return {k: v.detach() for k, v in params.items()}


def predict_proba(state: ModelState, x: np.ndarray, batch: int = 4096) -> np.ndarray:
    enc, cls = frozen(state.encoder_params), frozen(state.classifier_params)
    out = []
    for start in range(0, len(x), batch):
        logits = classify(cls, encode(enc, x[start:start + batch]))
        out.append(_softmax(logits.data))
    return np.concatenate(out, axis=0) if out else np.zeros((0, state.dims[3]))


def features_of(state: ModelState, x: np.ndarray, batch: int = 4096) -> np.ndarray:
    enc = frozen(state.encoder_params)
    chunks = [encode(enc, x[s:s + batch]).data for s in range(0, len(x), batch)]
    return np.concatenate(chunks, axis=0) if chunks else np.zeros((0, state.dims[2]))


def sgd_step(state: ModelState, which: str, cfg: SgdConfig) -> float:
    """Plain SGD on the selected student parameters; returns the pre-clip grad norm."""
    params = state.params_for(which)
    missing = [k for k, v in params.items() if v.grad is None]
    if missing:
        raise StateError(f"no gradient for {', '.join(missing)}")
    norm = float(np.sqrt(sum(float(np.sum(v.grad * v.grad)) for v in params.values())))
    scale = 1.0
    if cfg.max_grad_norm is not None and norm > cfg.max_grad_norm:
        scale = cfg.max_grad_norm / norm
    for v in params.values():
        v.data -= cfg.learning_rate * scale * v.grad
        _check_finite(v.data, v.name or "parameter")
        v.grad = None
    return norm


def ema_update(state: ModelState) -> None:
    m = state.ema_momentum
    for student, teacher in (
        (state.encoder_params, state.teacher_encoder_params),
        (state.classifier_params, state.teacher_classifier_params),
    ):
        for name, t in teacher.items():
            t.data = m * t.data + (1.0 - m) * student[name].data


def params_digest(params: Dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def iter_params(*groups: Dict[str, Tensor]) -> Iterable[Tensor]:
    for g in groups:
        yield from g.values()
