"""Dense float64 numeric kernels: activations, losses, Adam, init, grad checking.

Everything here is a pure function of its explicit inputs; randomness only
enters through an :class:`RngStream`, and optimizer state lives in an
:class:`AdamState` owned by exactly one training loop.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "AdamOptimizer",
    "AdamState",
    "RngStream",
    "activation",
    "adam_step",
    "grad_check",
    "grad_check_model",
    "init_uniform",
    "mae",
    "mse",
    "relu",
    "require_finite",
    "sigmoid",
    "softmax",
    "softmax_lastaxis",
]


def _first_nonfinite(x: np.ndarray):
    bad = ~np.isfinite(x)
    if bad.any():
        return tuple(int(i) for i in np.unravel_index(int(np.argmax(bad)), x.shape))
    return None


def require_finite(name: str, x) -> np.ndarray:
    """Return ``x`` as a float64 array, raising if any entry is NaN/Inf."""
    arr = np.asarray(x, dtype=np.float64)
    idx = _first_nonfinite(arr)
    if idx is not None:
        raise ValueError(f"{name} has a non-finite entry at index {idx}")
    return arr


def sigmoid(x):
    # exp(-|x|) never overflows, so both branches are safe for any finite x
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + z), z / (1.0 + z))


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": np.tanh, "relu": relu}


def activation(kind: str, x) -> np.ndarray:
    """Elementwise sigmoid / tanh / relu, shape preserved."""
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    arr = require_finite(f"{kind} input", x)
    return _ACTIVATIONS[kind](arr)


def softmax(v) -> np.ndarray:
    """Stable softmax of a nonempty 1-D vector (max-subtracted)."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"softmax expects a nonempty 1-D vector, got shape {arr.shape}")
    require_finite("softmax input", arr)
    e = np.exp(arr - arr.max())
    return e / e.sum()


def softmax_lastaxis(x: np.ndarray) -> np.ndarray:
    """Batched stable softmax over the last axis (internal, unchecked)."""
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mse(pred, target) -> float:
    """Mean of squared elementwise differences over all entries."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"mse shape mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("mse of empty arrays")
    d = p - t
    return float(np.mean(d * d))


def mae(pred, target) -> float:
    """Mean absolute difference of two nonempty equal-length vectors."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.ndim != 1 or t.ndim != 1:
        raise ValueError("mae expects 1-D vectors")
    if p.shape != t.shape:
        raise ValueError(f"mae length mismatch: {p.shape[0]} vs {t.shape[0]}")
    if p.size == 0:
        raise ValueError("mae of empty vectors")
    return float(np.mean(np.abs(p - t)))


@dataclass
class AdamState:
    """Adam moments for one parameter tensor.

    Update rule (bias-corrected): theta <- theta - lr * m_hat / (sqrt(v_hat) + eps).
    """

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, param, lr: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        param = np.asarray(param, dtype=np.float64)
        return cls(m=np.zeros_like(param), v=np.zeros_like(param),
                   t=0, lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params, grads, state: AdamState, name: str = "parameters") -> np.ndarray:
    """One Adam update. Returns the new parameter array; mutates ``state``."""
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape or p.shape != state.m.shape:
        raise ValueError(
            f"adam_step shape mismatch for {name}: params {p.shape}, "
            f"grads {g.shape}, state {state.m.shape}")
    idx = _first_nonfinite(g)
    if idx is not None:
        raise ValueError(f"non-finite gradient for {name} at index {idx}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


class AdamOptimizer:
    """Adam over a dict of named tensors, updating them in place.

    The dict values are the live model arrays; ``step`` writes the update back
    through them so the owning model sees new values without rebinding.
    """

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self._params = params
        self._states = {name: AdamState.like(p, lr=lr, beta1=beta1, beta2=beta2, eps=eps)
                        for name, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, p in self._params.items():
            p[...] = adam_step(p, grads[name], self._states[name], name=name)


@dataclass(frozen=True)
class RngStream:
    """Deterministic RNG stream keyed by (seed, stream label).

    The same (seed, stream) always yields the same draw sequence; ``derive``
    produces independent sub-streams without consuming any randomness.
    """

    seed: int
    stream: str = ""

    def derive(self, label: str) -> "RngStream":
        base = f"{self.stream}/{label}" if self.stream else label
        return RngStream(self.seed, base)

    def generator(self) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.seed}:{self.stream}".encode("utf-8")).digest()
        return np.random.Generator(np.random.PCG64(int.from_bytes(digest[:16], "little")))


def _as_generator(rng) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise TypeError(f"expected RngStream or numpy Generator, got {type(rng)!r}")


def init_uniform(rows: int, cols: int, rng) -> np.ndarray:
    """Xavier-uniform (rows x cols) matrix: bound sqrt(6 / (rows + cols))."""
    if rows < 1 or cols < 1:
        raise ValueError(f"init_uniform needs positive dimensions, got {rows}x{cols}")
    bound = math.sqrt(6.0 / (rows + cols))
    return _as_generator(rng).uniform(-bound, bound, size=(rows, cols))


def _rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(1.0, abs(a), abs(n))


def grad_check(f, params, analytic_grad, h: float = 1e-5) -> float:
    """Max relative error between ``analytic_grad`` and central differences of f.

    ``f`` is a scalar function of the parameter array; error per entry is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    p = np.array(params, dtype=np.float64)
    a = np.asarray(analytic_grad, dtype=np.float64)
    if p.shape != a.shape:
        raise ValueError(f"analytic gradient shape {a.shape} != params shape {p.shape}")
    worst = 0.0
    for idx in np.ndindex(p.shape):
        orig = p[idx]
        p[idx] = orig + h
        f_plus = float(f(p))
        p[idx] = orig - h
        f_minus = float(f(p))
        p[idx] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise ValueError(f"objective non-finite at probe index {idx}")
        numeric = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, _rel_err(float(a[idx]), numeric))
    return worst


def grad_check_model(loss_fn, params: dict[str, np.ndarray],
                     analytic: dict[str, np.ndarray], h: float = 1e-5) -> float:
    """Finite-difference check over a dict of live parameter tensors.

    ``loss_fn`` takes no arguments and must read the tensors in ``params``;
    each entry is perturbed in place.
    """
    worst = 0.0
    for name, p in params.items():
        a = np.asarray(analytic[name], dtype=np.float64)
        if a.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}: {a.shape} vs {p.shape}")
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            f_plus = float(loss_fn())
            p[idx] = orig - h
            f_minus = float(loss_fn())
            p[idx] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise ValueError(f"objective non-finite while probing {name}{idx}")
            numeric = (f_plus - f_minus) / (2.0 * h)
            worst = max(worst, _rel_err(float(a[idx]), numeric))
    return worst
