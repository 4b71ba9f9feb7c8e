"""Small dense numerical core: affine layers, a ReLU perceptron, softmax,
Adam, named random streams and a central-difference gradient checker.

Everything operates on plain numpy arrays. Matrices are stored row-major with
one sample per row, so ``AffineLayer.forward`` accepts either a vector or an
``(n, in)`` batch.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

FLOAT = np.float64


class NumericalError(ValueError):
    """Raised when a non-finite value reaches a numerical routine."""


def check_finite(x, name: str = "array") -> None:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {name}")


# ----------------------------------------------------------------------------
# random streams


def stream_id(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Philox generator keyed by ``(seed, stream)``.

    Philox is counter based, so the sequence for a given key is identical on
    every platform and independent of how many other streams were consumed.
    """
    key = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF, stream_id(stream)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# ----------------------------------------------------------------------------
# softmax


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=FLOAT)
    check_finite(v, "softmax input")
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(p: np.ndarray, grad: np.ndarray, axis: int = -1) -> np.ndarray:
    """Vector-Jacobian product of softmax given its output ``p``."""
    return p * (grad - np.sum(p * grad, axis=axis, keepdims=True))


def l2_normalize(x: np.ndarray) -> tuple[np.ndarray, float]:
    n = float(np.linalg.norm(x))
    if n == 0.0 or not np.isfinite(n):
        raise NumericalError("cannot normalize a zero-norm vector")
    return x / n, n


def l2_normalize_backward(u: np.ndarray, norm: float, grad: np.ndarray) -> np.ndarray:
    return (grad - u * np.dot(u, grad)) / norm


# ----------------------------------------------------------------------------
# layers


@dataclass
class AffineLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=FLOAT)
        self.bias = np.asarray(self.bias, dtype=FLOAT)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError(
                f"inconsistent affine shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    @classmethod
    def glorot(cls, n_in: int, n_out: int, rng: np.random.Generator) -> "AffineLayer":
        limit = np.sqrt(6.0 / (n_in + n_out))
        return cls(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out))

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=FLOAT)
        if x.shape[-1] != self.n_in:
            raise ValueError(f"expected input of width {self.n_in}, got {x.shape[-1]}")
        return x @ self.weight.T + self.bias

    def backward(self, x: np.ndarray, grad_out: np.ndarray):
        """Return ``(grad_x, grad_weight, grad_bias)`` for a batch ``x``."""
        x2 = np.atleast_2d(x)
        g2 = np.atleast_2d(grad_out)
        gw = g2.T @ x2
        gb = g2.sum(axis=0)
        gx = grad_out @ self.weight
        return gx, gw, gb

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def affine_forward(layer: AffineLayer, x) -> np.ndarray:
    return layer.forward(x)


@dataclass
class Mlp:
    """Two affine layers with a rectifier in between."""

    hidden: AffineLayer
    output: AffineLayer

    def __post_init__(self):
        if self.hidden.n_out != self.output.n_in:
            raise ValueError("hidden width must match output layer input width")

    @classmethod
    def glorot(cls, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator) -> "Mlp":
        return cls(AffineLayer.glorot(n_in, n_hidden, rng), AffineLayer.glorot(n_hidden, n_out, rng))

    def forward(self, x, cache: dict | None = None) -> np.ndarray:
        pre = self.hidden.forward(x)
        h = np.maximum(pre, 0.0)
        if cache is not None:
            cache["x"] = np.asarray(x, dtype=FLOAT)
            cache["pre"] = pre
            cache["h"] = h
        return self.output.forward(h)

    def backward(self, cache: dict, grad_out: np.ndarray):
        """Return ``(grad_x, grads)`` where grads is keyed like ``params('')``."""
        gh, gw2, gb2 = self.output.backward(cache["h"], grad_out)
        gpre = gh * (cache["pre"] > 0.0)
        gx, gw1, gb1 = self.hidden.backward(cache["x"], gpre)
        return gx, {"hidden.weight": gw1, "hidden.bias": gb1, "output.weight": gw2, "output.bias": gb2}

    def params(self, prefix: str) -> dict[str, np.ndarray]:
        return {**self.hidden.params(f"{prefix}.hidden"), **self.output.params(f"{prefix}.output")}


def mlp_forward(m: Mlp, x) -> np.ndarray:
    return m.forward(x)


# ----------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float | dict[str, float],
) -> dict[str, np.ndarray]:
    """Update ``params`` in place and return them.

    ``lr`` may be a mapping from parameter name to learning rate, which is how
    per-group rates are expressed.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter group {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        rate = lr[name] if isinstance(lr, dict) else lr
        p -= rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


# ----------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]  # max relative error per parameter group
    tol: float
    flagged: list[tuple[str, tuple, float, float]]  # (group, index, analytic, numeric)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return not self.flagged


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(1e-8, abs(a) + abs(n))


def grad_check(
    loss_fn: Callable[[dict[str, np.ndarray]], tuple[float, dict[str, np.ndarray]]],
    params: dict[str, np.ndarray],
    h: float = 1e-4,
    tol: float = 1e-4,
    value_fn: Callable[[dict[str, np.ndarray]], float] | None = None,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, entry by entry.

    ``loss_fn(params)`` must return ``(loss, grads)``. ``value_fn``, when given,
    is a cheaper forward-only loss used for the perturbed evaluations.
    Parameters are perturbed in place and restored afterwards.
    """
    _, analytic = loss_fn(params)
    value = value_fn or (lambda p: loss_fn(p)[0])
    analytic = {k: np.array(v, dtype=FLOAT, copy=True) for k, v in analytic.items()}
    errors: dict[str, float] = {}
    flagged = []
    for name, p in params.items():
        worst = 0.0
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            p[idx] = orig + h
            lp = value(params)
            p[idx] = orig - h
            lm = value(params)
            p[idx] = orig
            num = (lp - lm) / (2.0 * h)
            a = float(analytic[name][idx])
            err = relative_error(a, num)
            worst = max(worst, err)
            if err > tol:
                flagged.append((name, idx, a, num))
        errors[name] = worst
    return GradCheckReport(errors, tol, flagged)
