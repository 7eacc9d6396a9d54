"""Dense float64 kernels with explicit backward rules, the Adam update,
inverted dropout, and a central-difference gradient checker.

Matrices are plain 2-D row-major numpy float64 arrays. Every stochastic
operation takes an explicit ``numpy.random.Generator``; nothing in this
module touches global RNG state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError, ProtocolError, ShapeError, StoreError

Matrix = np.ndarray

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def require_finite(name: str, m: np.ndarray) -> None:
    if not np.all(np.isfinite(m)):
        raise DataError(f"{name} contains non-finite entries")


def matmul(a: Matrix, b: Matrix) -> Matrix:
    """Matrix product with an explicit shape check."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    out = a @ b
    require_finite("matmul output", out)
    return out


def row_softmax(m: Matrix) -> Matrix:
    """Softmax along the last axis, stabilized by max subtraction.

    Rows of the output are nonnegative and sum to 1.
    """
    m = np.asarray(m, dtype=np.float64)
    shifted = m - m.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def row_softmax_backward(out: Matrix, grad: Matrix) -> Matrix:
    """Gradient through ``row_softmax`` given its output and upstream grad."""
    dot = np.sum(out * grad, axis=-1, keepdims=True)
    return out * (grad - dot)


def sigmoid(m: Matrix) -> Matrix:
    """Numerically stable logistic function, entries in (0, 1)."""
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(-np.abs(m))
    return np.where(m >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(out: Matrix, grad: Matrix) -> Matrix:
    return grad * out * (1.0 - out)


def relu(m: Matrix) -> Matrix:
    return np.maximum(np.asarray(m, dtype=np.float64), 0.0)


def relu_backward(pre: Matrix, grad: Matrix) -> Matrix:
    """Gradient through relu given the pre-activation values."""
    return grad * (pre > 0)


def softplus(m: Matrix) -> Matrix:
    """log(1 + exp(m)) without overflow."""
    return np.logaddexp(0.0, np.asarray(m, dtype=np.float64))


def cosine_rows(a: Matrix, b: Matrix) -> Matrix:
    """Pairwise cosine similarity between the rows of two matrices.

    ``out[i, j]`` is the cosine of ``a[i]`` and ``b[j]``. Rows with zero
    norm get similarity 0 everywhere (never NaN), so all-zero padding
    embeddings stay inert.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"cosine_rows expects 2-D inputs, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"row width mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.outer(na, nb)
    valid = denom > 0
    sims = np.zeros_like(denom)
    np.divide(a @ b.T, denom, out=sims, where=valid)
    np.clip(sims, -1.0, 1.0, out=sims)
    return sims


def cosine_rows_backward(a: Matrix, b: Matrix, sims: Matrix, grad: Matrix):
    """Gradients of ``cosine_rows`` w.r.t. both inputs.

    Zero-norm rows receive zero gradient, matching the forward convention.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = np.outer(na, nb)
    valid = denom > 0
    scaled = np.where(valid, grad / np.where(valid, denom, 1.0), 0.0)
    gs = grad * sims
    da = scaled @ b - (gs.sum(axis=1) / np.where(na > 0, na * na, 1.0))[:, None] * a
    db = scaled.T @ a - (gs.sum(axis=0) / np.where(nb > 0, nb * nb, 1.0))[:, None] * b
    return da, db


def dropout_mask(shape, p: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted-dropout mask: entries are 0 with probability p, else 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    if p == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= p
    return keep / (1.0 - p)


def dropout(m: Matrix, p: float, training: bool, rng: np.random.Generator | None = None) -> Matrix:
    """Inverted dropout; identity when not training."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {p}")
    m = np.asarray(m, dtype=np.float64)
    if not training or p == 0.0:
        return m.copy()
    if rng is None:
        raise ConfigError("dropout in training mode needs an rng")
    return m * dropout_mask(m.shape, p, rng)


@dataclass
class ParamStore:
    """Named trainable arrays with paired gradient slots and Adam state.

    Gradient slots start out empty (None); ``accumulate`` allocates them
    lazily and ``adam_step`` clears them again after applying the update.
    Single writer: callers must serialize mutation externally.
    """

    params: dict = field(default_factory=dict)
    grads: dict = field(default_factory=dict)
    moment1: dict = field(default_factory=dict)
    moment2: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise StoreError(f"parameter {name!r} already registered")
        arr = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = arr
        self.grads[name] = None
        self.moment1[name] = np.zeros_like(arr)
        self.moment2[name] = np.zeros_like(arr)
        return arr

    def names(self):
        return list(self.params)

    def accumulate(self, name: str, delta: np.ndarray) -> None:
        param = self.params.get(name)
        if param is None:
            raise StoreError(f"unknown parameter {name!r}")
        if param.shape != np.shape(delta):
            raise ShapeError(
                f"gradient shape {np.shape(delta)} does not match parameter "
                f"{name!r} of shape {param.shape}"
            )
        if self.grads[name] is None:
            self.grads[name] = np.zeros_like(param)
        self.grads[name] += delta

    def accumulate_rows(self, name: str, row_ids, delta_rows) -> None:
        """Scatter-add row gradients; repeated ids accumulate."""
        param = self.params.get(name)
        if param is None:
            raise StoreError(f"unknown parameter {name!r}")
        if self.grads[name] is None:
            self.grads[name] = np.zeros_like(param)
        np.add.at(self.grads[name], np.asarray(row_ids, dtype=np.intp), delta_rows)

    def ensure_grads(self) -> None:
        for name, param in self.params.items():
            if self.grads[name] is None:
                self.grads[name] = np.zeros_like(param)

    def scale_grads(self, factor: float) -> None:
        for name, g in self.grads.items():
            if g is not None:
                g *= factor

    def clear_grads(self) -> None:
        for name in self.grads:
            self.grads[name] = None

    def copy_params(self) -> dict:
        return {name: arr.copy() for name, arr in self.params.items()}

    def load_params(self, values: dict) -> None:
        for name, param in self.params.items():
            if name not in values:
                raise StoreError(f"missing parameter {name!r} in snapshot")
            if values[name].shape != param.shape:
                raise ShapeError(f"snapshot shape mismatch for {name!r}")
            param[...] = values[name]


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> None:
    """Apply one bias-corrected Adam update and clear all gradients.

    Raises StoreError if any parameter is missing its gradient.
    """
    for name in store.params:
        if store.grads[name] is None:
            raise StoreError(f"gradient missing for parameter {name!r}")
    store.step += 1
    t = store.step
    corr1 = 1.0 - beta1**t
    corr2 = 1.0 - beta2**t
    for name, param in store.params.items():
        g = store.grads[name]
        m = store.moment1[name]
        v = store.moment2[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        param -= lr * (m / corr1) / (np.sqrt(v / corr2) + eps)
    store.clear_grads()


@dataclass
class GradCheckReport:
    """Per-parameter relative error between analytic and numeric gradients.

    The error for a parameter is its largest absolute deviation divided by
    the largest gradient magnitude seen in that parameter, so well-scaled
    parameters are judged relative to their own dominant gradient.
    """

    errors: dict
    tolerance: float
    passed: bool

    def worst(self):
        if not self.errors:
            return None
        return max(self.errors.items(), key=lambda kv: kv[1])


def check_gradients(
    closure: Callable[[], float],
    store: ParamStore,
    tolerance: float = 1e-4,
    step: float = 1e-4,
) -> GradCheckReport:
    """Compare the closure's analytic gradients against central differences.

    The closure must compute a scalar loss from ``store.params`` and
    accumulate d(loss)/d(param) into ``store.grads``. It must be
    deterministic (dropout off, fixed inputs); two initial evaluations that
    disagree raise ProtocolError.
    """
    store.clear_grads()
    loss_a = float(closure())
    store.ensure_grads()
    analytic = {name: store.grads[name].copy() for name in store.params}
    store.clear_grads()
    loss_b = float(closure())
    if loss_a != loss_b:
        raise ProtocolError(
            f"closure is not deterministic: {loss_a!r} vs {loss_b!r} on repeat evaluation"
        )

    errors = {}
    for name, param in store.params.items():
        flat = param.reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            store.clear_grads()
            loss_plus = float(closure())
            flat[i] = orig - step
            store.clear_grads()
            loss_minus = float(closure())
            flat[i] = orig
            fd[i] = (loss_plus - loss_minus) / (2.0 * step)
        a = analytic[name].reshape(-1)
        scale = max(float(np.max(np.abs(a), initial=0.0)), float(np.max(np.abs(fd), initial=0.0)))
        diff = float(np.max(np.abs(a - fd), initial=0.0))
        errors[name] = diff if scale < 1e-12 else diff / scale
    store.clear_grads()
    passed = all(err <= tolerance for err in errors.values())
    return GradCheckReport(errors=errors, tolerance=tolerance, passed=passed)
