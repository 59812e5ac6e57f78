"""Layer-wise generalization diagnostics.

Covers first-order parameter importance and the cumulative federation
sensitivity built from it, gradient variance, Hessian traces (Hutchinson
estimate and a coordinate-wise oracle) and linear CKA.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ._rng import make_rng
from .exceptions import CapacityError, InvalidSpecError, NumericError, ShapeError, UndefinedSimilarityError
from .nn import LossKind, Network, get_layer_params, loss_and_gradients, relu_masks, set_layer_params

EXACT_TRACE_LIMIT = 5000


@dataclass
class SensitivityProfile:
    """Cumulative federation sensitivity per layer.

    ``cumulative[l]`` is the sum of ``mean_importance[k]`` for ``k <= l``.
    """

    cumulative: np.ndarray
    mean_importance: np.ndarray
    n_batches: int

    def __post_init__(self):
        self.cumulative = np.asarray(self.cumulative, dtype=np.float64)
        self.mean_importance = np.asarray(self.mean_importance, dtype=np.float64)

    @property
    def n_layers(self) -> int:
        return self.cumulative.shape[0]

    def pct_of_first(self) -> np.ndarray:
        first = self.cumulative[0]
        if first == 0.0:
            return np.full(self.n_layers, np.nan)
        return 100.0 * self.cumulative / first

    @classmethod
    def from_importance(cls, importance, n_batches: int = 1) -> "SensitivityProfile":
        importance = np.asarray(importance, dtype=np.float64)
        return cls(np.cumsum(importance), importance, n_batches)


@dataclass
class LayerSpectrumSummary:
    gradient_variance: np.ndarray
    hessian_trace: np.ndarray
    param_counts: np.ndarray

    @property
    def size_normalized_variance(self) -> np.ndarray:
        return self.gradient_variance / self.param_counts


def layer_importance(params, grads) -> float:
    """Mean squared first-order importance ``(1/n) * sum((theta * grad)**2)``."""
    theta = np.asarray(params, dtype=np.float64).reshape(-1)
    g = np.asarray(grads, dtype=np.float64).reshape(-1)
    if theta.shape != g.shape:
        raise ShapeError(f"{theta.size} parameters but {g.size} gradients")
    if theta.size == 0:
        raise ShapeError("empty parameter vector")
    prod = theta * g
    return float(np.dot(prod, prod) / theta.size)


def federation_sensitivity(per_batch: Sequence[Sequence[tuple]], mode: str = "mean") -> SensitivityProfile:
    """Sensitivity profile from per-batch ``[(params_k, grads_k) for each layer]`` snapshots.

    ``mode="mean"`` averages each layer's importance over all snapshots;
    ``mode="last"`` uses the final snapshot only.
    """
    if mode not in ("mean", "last"):
        raise InvalidSpecError(f"unknown sensitivity mode {mode!r}")
    if len(per_batch) == 0:
        raise InvalidSpecError("need at least one batch snapshot")
    n_layers = len(per_batch[0])
    if any(len(snap) != n_layers for snap in per_batch):
        raise ShapeError("snapshots disagree on the number of layers")
    used = per_batch[-1:] if mode == "last" else per_batch
    totals = np.zeros(n_layers)
    for snapshot in used:
        totals += [layer_importance(p, g) for p, g in snapshot]
    return SensitivityProfile.from_importance(totals / len(used), len(used))


def gradient_variance(grads) -> float:
    g = np.asarray(grads, dtype=np.float64).reshape(-1)
    if g.size == 0:
        raise ShapeError("empty gradient vector")
    return float(np.mean((g - g.mean()) ** 2))


def layer_gradient_fn(net: Network, batch, labels, kind: LossKind, k: int, freeze_gating: bool = True) -> Callable:
    """Map a flat parameter vector for layer ``k`` to that layer's loss gradient.

    With ``freeze_gating`` the relu on/off pattern is taken from ``net`` and
    held fixed, so finite differences never straddle an activation kink.
    """
    masks = relu_masks(net, batch) if freeze_gating else None

    def grad(theta):
        probe = set_layer_params(net, k, theta)
        _, grads = loss_and_gradients(probe, batch, labels, kind, masks)
        return grads.layer_vector(k)

    return grad


def default_step(theta) -> float:
    return 1e-4 * (1.0 + float(np.max(np.abs(theta))))


def hvp_central(grad_fn: Callable, theta, v, h: float) -> np.ndarray:
    hv = (grad_fn(theta + h * v) - grad_fn(theta - h * v)) / (2.0 * h)
    if not np.all(np.isfinite(hv)):
        raise NumericError("non-finite Hessian-vector product; try a smaller step h")
    return hv


def hutchinson_trace(grad_fn: Callable, theta, probes: int = 32, h: float | None = None, seed: int = 0) -> float:
    """Hutchinson estimate of the trace of the Jacobian of ``grad_fn`` at ``theta``.

    Probe ``i`` draws its Rademacher vector from its own seeded stream, so the
    result does not depend on evaluation order.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if probes < 1:
        raise InvalidSpecError("probes must be >= 1")
    h = default_step(theta) if h is None else h
    if not h > 0:
        raise InvalidSpecError("step h must be > 0")
    total = 0.0
    for i in range(probes):
        v = make_rng(seed, "hutchinson", i).choice(np.array([-1.0, 1.0]), size=theta.shape)
        total += float(v @ hvp_central(grad_fn, theta, v, h))
    return total / probes


def exact_trace(grad_fn: Callable, theta, h: float | None = None) -> float:
    """Sum of Hessian diagonal entries from per-coordinate central differences."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.size > EXACT_TRACE_LIMIT:
        raise CapacityError(f"{theta.size} parameters exceed the exact-trace limit of {EXACT_TRACE_LIMIT}")
    h = default_step(theta) if h is None else h
    if not h > 0:
        raise InvalidSpecError("step h must be > 0")
    total = 0.0
    e = np.zeros_like(theta)
    for j in range(theta.size):
        e[j] = 1.0
        total += hvp_central(grad_fn, theta, e, h)[j]
        e[j] = 0.0
    return float(total)


def hessian_trace_hutchinson(net, batch, labels, kind: LossKind, k: int, probes: int = 32, h=None, seed: int = 0) -> float:
    theta = get_layer_params(net, k)
    return hutchinson_trace(layer_gradient_fn(net, batch, labels, kind, k), theta, probes, h, seed)


def hessian_trace_exact(net, batch, labels, kind: LossKind, k: int, h=None) -> float:
    theta = get_layer_params(net, k)
    if theta.size > EXACT_TRACE_LIMIT:
        raise CapacityError(f"layer {k} has {theta.size} parameters; exact trace is limited to {EXACT_TRACE_LIMIT}")
    return exact_trace(layer_gradient_fn(net, batch, labels, kind, k), theta, h)


def layer_spectrum(net: Network, batch, labels, kind: LossKind = LossKind(), probes: int = 32, seed: int = 0) -> LayerSpectrumSummary:
    _, grads = loss_and_gradients(net, batch, labels, kind)
    variances = [gradient_variance(grads.layer_vector(k)) for k in range(net.n_layers)]
    traces = [hessian_trace_hutchinson(net, batch, labels, kind, k, probes, seed=seed) for k in range(net.n_layers)]
    return LayerSpectrumSummary(np.array(variances), np.array(traces), np.array(net.param_counts, dtype=np.float64))


def linear_cka(X, Y) -> float:
    """Linear centered kernel alignment between two representations of the same rows."""
    x = np.asarray(X, dtype=np.float64)
    y = np.asarray(Y, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if x.shape[0] != y.shape[0]:
        raise ShapeError(f"row counts differ: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise ShapeError("need at least two rows")
    x = x - x.mean(axis=0)
    y = y - y.mean(axis=0)
    norm_x = np.linalg.norm(x.T @ x)
    norm_y = np.linalg.norm(y.T @ y)
    if norm_x == 0.0 or norm_y == 0.0:
        raise UndefinedSimilarityError("CKA is undefined for a representation with zero variance")
    cross = np.linalg.norm(y.T @ x) ** 2
    return float(cross / (norm_x * norm_y))
