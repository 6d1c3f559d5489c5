"""
Dense numerical kernel for the conditioned VAE.

Everything the hand-derived backpropagation needs lives here: products with
shape checks, activations, normalization, dropout, parameter initialization,
the Adam update and a central-difference gradient checker.

Random numbers come from ``RngStream``: numpy's ``Generator`` over the PCG64
bit generator, seeded through ``SeedSequence(seed, spawn_key=(crc32(name),))``.
Normal draws use numpy's ziggurat ``standard_normal``. Both choices are part
of the reproducibility contract of splits, initialization, dropout and noise.
"""

import logging
import zlib
from dataclasses import dataclass
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

from cvaerec.core.exceptions import DimensionError, NonFiniteError

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float64


class RngStream:
    """Named, reproducible random stream (PCG64 + ziggurat normals)"""

    ALGORITHM = "PCG64/SeedSequence; normals: ziggurat"

    def __init__(self, seed: int, name: str = "root"):
        self.seed = int(seed)
        self.name = name
        sequence = np.random.SeedSequence(self.seed, spawn_key=(zlib.crc32(name.encode("utf-8")),))
        self.generator = np.random.Generator(np.random.PCG64(sequence))

    def child(self, name: str) -> "RngStream":
        return RngStream(self.seed, f"{self.name}/{name}")

    def uniform(self, low: float, high: float, size: Any = None) -> np.ndarray:
        return self.generator.uniform(low, high, size)

    def standard_normal(self, size: Any = None, dtype: Any = DEFAULT_DTYPE) -> np.ndarray:
        return self.generator.standard_normal(size, dtype=dtype)

    def random(self, size: Any = None) -> np.ndarray:
        return self.generator.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def integers(self, low: int, high: int, size: Any = None) -> np.ndarray:
        return self.generator.integers(low, high, size)

    def choice(self, a: Any, size: Any = None, replace: bool = True, p: Any = None) -> np.ndarray:
        return self.generator.choice(a, size=size, replace=replace, p=p)

    def get_state(self) -> Dict[str, Any]:
        return self.generator.bit_generator.state

    def set_state(self, state: Dict[str, Any]) -> None:
        self.generator.bit_generator.state = state


# ---------------------------------------------------------------------------
# Products
# ---------------------------------------------------------------------------

def _as_2d(x: np.ndarray, name: str) -> np.ndarray:
    if x.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {x.shape}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """A · B"""
    _as_2d(a, "A")
    _as_2d(b, "B")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} · {b.shape}")
    return a @ b


def matmul_tn(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Aᵀ · B"""
    _as_2d(a, "A")
    _as_2d(b, "B")
    if a.shape[0] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape}ᵀ · {b.shape}")
    return a.T @ b


def matmul_nt(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """A · Bᵀ"""
    _as_2d(a, "A")
    _as_2d(b, "B")
    if a.shape[1] != b.shape[1]:
        raise DimensionError(f"inner dimensions differ: {a.shape} · {b.shape}ᵀ")
    return a @ b.T


# ---------------------------------------------------------------------------
# Activations and normalization
# ---------------------------------------------------------------------------

def tanh_forward(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_backward(y: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient through tanh given its output y"""
    return upstream * (1.0 - y * y)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise (last axis) log-softmax, max-subtracted"""
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def l2_normalize(x: np.ndarray) -> np.ndarray:
    """Row-wise unit Euclidean norm; zero rows stay zero"""
    norms = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    safe = np.where(norms > 0.0, norms, 1.0)
    return x / safe


def dropout_forward(x: np.ndarray, p: float, rng: Optional[RngStream],
                    training: bool) -> Tuple[np.ndarray, np.ndarray]:
    """
    Inverted dropout. Returns (y, mask) with y = x ⊙ mask; kept entries of the
    mask hold 1/(1-p), dropped entries 0. Inference returns a mask of ones.
    """
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {p}")
    if not training or p == 0.0:
        mask = np.ones_like(x)
        return x * mask, mask
    if rng is None:
        raise ValueError("training-mode dropout needs an RngStream")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / (1.0 - p)
    return x * mask, mask


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------

def xavier_uniform(rows: int, cols: int, rng: RngStream, dtype: Any = DEFAULT_DTYPE) -> np.ndarray:
    if rows <= 0 or cols <= 0:
        raise DimensionError(f"weight dimensions must be positive, got ({rows}, {cols})")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, (rows, cols)).astype(dtype)


def bias_init(length: int, rng: RngStream, std: float = 0.001, dtype: Any = DEFAULT_DTYPE) -> np.ndarray:
    if length <= 0:
        raise DimensionError(f"bias length must be positive, got {length}")
    return (rng.standard_normal(length) * std).astype(dtype)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    """Per-parameter Adam moments"""
    first_moment: np.ndarray
    second_moment: np.ndarray
    step: int = 0
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    @classmethod
    def for_param(cls, param: np.ndarray, lr: float = 0.001, beta1: float = 0.9,
                  beta2: float = 0.999, eps_hat: float = 1e-8) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), 0, lr, beta1, beta2, eps_hat)


def adam_update(param: np.ndarray, grad: np.ndarray, state: AdamState) -> Tuple[np.ndarray, AdamState]:
    """Bias-corrected Adam step, in place on param and state"""
    if param.shape != grad.shape:
        raise DimensionError(f"gradient shape {grad.shape} does not match parameter {param.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.size(grad) - np.count_nonzero(np.isfinite(grad)))
        raise NonFiniteError(f"non-finite gradient ({bad} entries) at Adam step {state.step + 1}")

    state.step += 1
    state.first_moment *= state.beta1
    state.first_moment += (1.0 - state.beta1) * grad
    state.second_moment *= state.beta2
    state.second_moment += (1.0 - state.beta2) * (grad * grad)

    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    m_hat = state.first_moment / bc1
    v_hat = state.second_moment / bc2
    param -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps_hat)
    return param, state


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[], float], params: Dict[str, np.ndarray],
               analytic_grads: Dict[str, np.ndarray], h: float = 1e-5) -> float:
    """
    Max relative error between analytic gradients and central differences.

    ``f`` is evaluated with the arrays in ``params`` perturbed in place, so it
    must read them by reference. Relative error per coordinate is
    |a - n| / max(|a|, |n|, 1e-8).
    """
    worst = 0.0
    worst_at = None
    for name, param in params.items():
        grad = analytic_grads[name]
        flat = param.reshape(-1)
        flat_grad = grad.reshape(-1)
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + h
            f_plus = f()
            flat[idx] = original - h
            f_minus = f()
            flat[idx] = original
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = float(flat_grad[idx])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
                worst_at = (name, idx, analytic, numeric)
    if worst_at is not None:
        logger.debug(f"grad_check worst coordinate {worst_at}: rel error {worst:.3e}")
    return worst
