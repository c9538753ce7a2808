"""Dense linear-algebra and loss primitives shared by the backbone and chips.

Tensors are stored float32; dot products and loss sums accumulate in float64
before rounding back to storage precision. All functions are pure except
``adam_step``, which updates its own param/state arguments in place.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

LOG_EPS = 1e-12


def as_f32(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float32)


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """m @ v with float64 accumulation, float32 result."""
    m = np.asarray(m)
    v = np.asarray(v)
    if m.ndim != 2 or v.ndim != 1:
        raise ContractViolation(f"matvec expects a matrix and a vector, got {m.shape} and {v.shape}")
    if m.shape[1] != v.shape[0]:
        raise ContractViolation(f"matvec dimension mismatch: {m.shape} x {v.shape}")
    return (m.astype(np.float64) @ v.astype(np.float64)).astype(np.float32)


def softmax(v: np.ndarray) -> np.ndarray:
    """Max-subtracted softmax; overflow-safe for arbitrarily large inputs."""
    v = np.asarray(v)
    if v.ndim != 1 or v.shape[0] < 1:
        raise ContractViolation(f"softmax expects a non-empty vector, got shape {v.shape}")
    z = v.astype(np.float64)
    z = z - z.max()
    e = np.exp(z)
    return (e / e.sum()).astype(np.float32)


def relu(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v)
    return np.maximum(v, np.float32(0.0))


def nll_loss(probs: np.ndarray, label: int) -> float:
    """Negative log-likelihood of ``label`` under a distribution ``probs``."""
    probs = np.asarray(probs)
    if probs.ndim != 1:
        raise ContractViolation(f"nll_loss expects a vector of probabilities, got shape {probs.shape}")
    if not 0 <= label < probs.shape[0]:
        raise ContractViolation(f"label {label} out of range for {probs.shape[0]} classes")
    # upper clip keeps the loss nonnegative when probs[label] == 1 exactly
    p = min(float(probs[label]) + LOG_EPS, 1.0)
    return -float(np.log(p))


@dataclass
class AdamHyper:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    """First/second moment buffers, same shape and dtype as the parameter."""

    m: np.ndarray
    v: np.ndarray

    @classmethod
    def zeros_like(cls, param: np.ndarray) -> "AdamState":
        return cls(m=np.zeros_like(param), v=np.zeros_like(param))


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, hyper: AdamHyper, t: int) -> None:
    """One bias-corrected Adam update, in place on ``param`` and ``state``."""
    if param.shape != grad.shape or param.shape != state.m.shape or param.shape != state.v.shape:
        raise ContractViolation(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, "
            f"moments {state.m.shape}/{state.v.shape}"
        )
    if t < 1:
        raise ContractViolation(f"adam_step requires step count t >= 1, got {t}")
    state.m *= hyper.beta1
    state.m += (1.0 - hyper.beta1) * grad
    state.v *= hyper.beta2
    state.v += (1.0 - hyper.beta2) * np.square(grad)
    m_hat = state.m / (1.0 - hyper.beta1**t)
    v_hat = state.v / (1.0 - hyper.beta2**t)
    param -= hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
