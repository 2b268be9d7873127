"""Dense/sparse kernels with explicit backward passes, plus Adam.

Tensors are plain ``float64`` numpy arrays. Sparse operands are scipy CSR
matrices with sorted column indices, so every row reduction runs in ascending
column order and results are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit, log_softmax

SIGMOID_EPS = 1e-7

Rng = np.random.Generator


class NonFiniteError(FloatingPointError):
    """A loss or parameter left the finite range during training."""


def make_rng(seed: int) -> Rng:
    # PCG64 streams are specified bit-for-bit, independent of platform.
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class Parameter:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def copy(self) -> "Parameter":
        other = Parameter(self.value.copy(), step_count=self.step_count)
        other.grad[...] = self.grad
        other.adam_m[...] = self.adam_m
        other.adam_v[...] = self.adam_v
        return other


def spmm(a, b: np.ndarray) -> np.ndarray:
    """Sparse (CSR) times dense product."""
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"spmm shape mismatch: {a.shape} x {b.shape}")
    if sp.issparse(a):
        a = a if sp.isspmatrix_csr(a) else sp.csr_matrix(a)
        if not a.has_sorted_indices:
            a = a.sorted_indices()
        return np.asarray(a @ b)
    return np.asarray(a, dtype=np.float64) @ b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(x > 0, upstream, 0.0)


def softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function clamped to ``[eps, 1 - eps]``."""
    return np.clip(expit(x), SIGMOID_EPS, 1.0 - SIGMOID_EPS)


def masked_cross_entropy(logits: np.ndarray, labels: np.ndarray, mask) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over ``mask`` and its gradient w.r.t. ``logits``."""
    mask = np.asarray(mask, dtype=np.int64).ravel()
    if mask.size == 0:
        raise ValueError("masked_cross_entropy needs a nonempty mask")
    labels = np.asarray(labels)
    rows = logits[mask]
    logp = log_softmax(rows, axis=1)
    target = labels[mask]
    loss = -float(np.mean(logp[np.arange(mask.size), target]))
    grad_rows = np.exp(logp)
    grad_rows[np.arange(mask.size), target] -= 1.0
    grad = np.zeros_like(logits)
    grad[mask] = grad_rows / mask.size
    return loss, grad


def adam_step(param: Parameter, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; clears ``param.grad`` afterwards."""
    param.step_count += 1
    t = param.step_count
    g = param.grad
    param.adam_m *= beta1
    param.adam_m += (1.0 - beta1) * g
    param.adam_v *= beta2
    param.adam_v += (1.0 - beta2) * (g * g)
    m_hat = param.adam_m / (1.0 - beta1**t)
    v_hat = param.adam_v / (1.0 - beta2**t)
    param.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    param.grad[...] = 0.0


def glorot_init(rows: int, cols: int, rng: Rng) -> np.ndarray:
    if rows <= 0 or cols <= 0:
        raise ValueError(f"glorot_init needs positive dims, got {rows}x{cols}")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def check_finite(name: str, value) -> None:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"{name} became non-finite")
