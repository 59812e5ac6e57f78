"""Dense feed-forward networks with exact backpropagation and AdamW.

All arithmetic is float64.  Networks, gradient sets and optimizer states are
plain dataclasses; the update functions return new objects and never mutate
their inputs, so a network can be snapshotted by simply keeping a reference.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._rng import make_rng
from .exceptions import InvalidLabelError, InvalidSpecError, NumericError, ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")


def _activate(z, name):
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(z, a, name):
    # derivative of the activation, evaluated from pre- (z) and post- (a) values
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return None


@dataclass
class DenseLayer:
    weights: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if self.weights.ndim != 2:
            raise ShapeError("weights must be a 2-d matrix [in x out]")
        if self.bias.shape[0] != self.weights.shape[1]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} does not match "
                f"{self.weights.shape[1]} output units"
            )
        if self.activation not in ACTIVATIONS:
            raise InvalidSpecError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise NumericError("layer parameters must be finite")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def copy(self) -> "DenseLayer":
        return DenseLayer(self.weights.copy(), self.bias.copy(), self.activation)


@dataclass
class Network:
    layers: list

    def __post_init__(self):
        self.layers = list(self.layers)
        if not self.layers:
            raise InvalidSpecError("a network needs at least one layer")
        for k in range(len(self.layers) - 1):
            if self.layers[k].out_dim != self.layers[k + 1].in_dim:
                raise ShapeError(
                    f"layer {k} outputs {self.layers[k].out_dim} units but layer "
                    f"{k + 1} expects {self.layers[k + 1].in_dim}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def layer_sizes(self) -> list:
        return [self.layers[0].in_dim] + [layer.out_dim for layer in self.layers]

    @property
    def param_counts(self) -> list:
        return [layer.n_params for layer in self.layers]

    @property
    def n_params(self) -> int:
        return sum(self.param_counts)

    def copy(self) -> "Network":
        return Network([layer.copy() for layer in self.layers])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([get_layer_params(self, k) for k in range(self.n_layers)])

    def same_architecture(self, other: "Network") -> bool:
        return self.layer_sizes == other.layer_sizes and [
            a.activation for a in self.layers
        ] == [b.activation for b in other.layers]


@dataclass
class GradientSet:
    """Per-layer gradients, shape-congruent with a :class:`Network`."""

    weights: list
    biases: list

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def layer_vector(self, k: int) -> np.ndarray:
        if not 0 <= k < self.n_layers:
            raise IndexError(f"layer index {k} out of range for {self.n_layers} layers")
        return np.concatenate([self.weights[k].ravel(), self.biases[k]])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.layer_vector(k) for k in range(self.n_layers)])

    def norm(self) -> float:
        return float(np.sqrt(sum(np.sum(w * w) + np.sum(b * b) for w, b in zip(self.weights, self.biases))))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(w)) and np.all(np.isfinite(b)) for w, b in zip(self.weights, self.biases))

    def check_congruent(self, net: Network) -> None:
        if self.n_layers != net.n_layers:
            raise ShapeError(f"gradient set has {self.n_layers} layers, network has {net.n_layers}")
        for k, layer in enumerate(net.layers):
            if self.weights[k].shape != layer.weights.shape or self.biases[k].shape != layer.bias.shape:
                raise ShapeError(f"gradient shapes for layer {k} do not match the network")


@dataclass(frozen=True)
class LossKind:
    """``cross_entropy`` or ``multiclass_focal`` with focusing parameter ``gamma``."""

    name: str = "cross_entropy"
    gamma: float = 2.0

    def __post_init__(self):
        if self.name not in ("cross_entropy", "multiclass_focal"):
            raise InvalidSpecError(f"unknown loss {self.name!r}")
        if not self.gamma >= 0:
            raise InvalidSpecError("focal gamma must be >= 0")

    @classmethod
    def cross_entropy(cls) -> "LossKind":
        return cls("cross_entropy")

    @classmethod
    def focal(cls, gamma: float = 2.0) -> "LossKind":
        return cls("multiclass_focal", float(gamma))


@dataclass
class AdamWState:
    m_weights: list
    m_biases: list
    v_weights: list
    v_biases: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01

    @classmethod
    def for_network(cls, net: Network, **hyper) -> "AdamWState":
        zeros_w = [np.zeros_like(layer.weights) for layer in net.layers]
        zeros_b = [np.zeros_like(layer.bias) for layer in net.layers]
        return cls(
            zeros_w,
            zeros_b,
            [z.copy() for z in zeros_w],
            [z.copy() for z in zeros_b],
            **hyper,
        )

    def copy(self) -> "AdamWState":
        return AdamWState(
            [m.copy() for m in self.m_weights],
            [m.copy() for m in self.m_biases],
            [v.copy() for v in self.v_weights],
            [v.copy() for v in self.v_biases],
            self.step,
            self.beta1,
            self.beta2,
            self.eps,
            self.weight_decay,
        )


def init_network(layer_sizes: Sequence[int], activations: Sequence[str] | None = None, seed: int = 0) -> Network:
    """Build a network with He-style uniform weights and zero biases.

    Weights of a layer with fan-in ``n`` are drawn from U(-sqrt(6/n), sqrt(6/n)).
    When ``activations`` is omitted, hidden layers use relu and the last layer
    is the identity (logits).
    """
    sizes = [int(s) for s in layer_sizes]
    if len(sizes) < 2:
        raise InvalidSpecError("need at least an input and an output size")
    if any(s <= 0 for s in sizes):
        raise InvalidSpecError(f"layer sizes must be positive, got {sizes}")
    n_layers = len(sizes) - 1
    if activations is None:
        activations = ["relu"] * (n_layers - 1) + ["identity"]
    activations = list(activations)
    if len(activations) != n_layers:
        raise InvalidSpecError(f"expected {n_layers} activations, got {len(activations)}")
    rng = make_rng(seed, "init_network")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append(DenseLayer(w, np.zeros(fan_out), act))
    return Network(layers)


def _as_batch(net: Network, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != net.in_dim:
        raise ShapeError(f"batch of shape {x.shape} does not fit input dimension {net.in_dim}")
    return x


def _forward_cache(net: Network, x: np.ndarray, relu_masks=None):
    pre, post = [], []
    a = x
    for k, layer in enumerate(net.layers):
        z = a @ layer.weights + layer.bias
        if relu_masks is not None and layer.activation == "relu":
            a = z * relu_masks[k]
        else:
            a = _activate(z, layer.activation)
        pre.append(z)
        post.append(a)
    return pre, post


def relu_masks(net: Network, batch) -> list:
    """Gating pattern (1.0 where a relu unit is active) for every layer; None for non-relu layers."""
    x = _as_batch(net, batch)
    pre, _ = _forward_cache(net, x)
    return [(z > 0.0).astype(np.float64) if layer.activation == "relu" else None for z, layer in zip(pre, net.layers)]


def forward(net: Network, batch):
    """Return ``(activations, logits)``.

    ``activations[k]`` is the post-activation output of layer ``k``; the last
    entry is the logits themselves.
    """
    x = _as_batch(net, batch)
    _, post = _forward_cache(net, x)
    return post, post[-1]


def _check_labels(labels, n_rows: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim == 0:
        y = y.reshape(1)
    if y.shape != (n_rows,):
        raise ShapeError(f"expected {n_rows} labels, got shape {y.shape}")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise InvalidLabelError("labels must be integer class indices")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InvalidLabelError(f"labels must lie in [0, {n_classes})")
    return y.astype(np.int64, copy=False)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def _loss_terms(logits: np.ndarray, y: np.ndarray, kind: LossKind):
    """Mean loss and its gradient with respect to the logits."""
    n = logits.shape[0]
    logp = log_softmax(logits)
    probs = np.exp(logp)
    rows = np.arange(n)
    logp_true = logp[rows, y]
    onehot = np.zeros_like(logits)
    onehot[rows, y] = 1.0
    if kind.name == "cross_entropy" or kind.gamma == 0.0:
        loss = 0.0 - logp_true.mean()
        dlogits = (probs - onehot) / n
        return float(loss), dlogits
    gamma = kind.gamma
    p_true = np.exp(logp_true)
    one_minus = -np.expm1(logp_true)
    loss = -(one_minus**gamma * logp_true).mean()
    # d/dz_j of -(1-p)^g log p = (onehot_j - s_j) * [g p (1-p)^(g-1) log p - (1-p)^g]
    with np.errstate(divide="ignore", invalid="ignore"):
        slope = np.where(one_minus > 0.0, gamma * p_true * one_minus ** (gamma - 1.0) * logp_true, 0.0)
    coef = slope - one_minus**gamma
    dlogits = (onehot - probs) * coef[:, None] / n
    return float(loss), dlogits


def loss(logits, labels, kind: LossKind = LossKind()) -> float:
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    if not np.all(np.isfinite(z)):
        raise NumericError("logits must be finite")
    y = _check_labels(labels, z.shape[0], z.shape[1])
    return _loss_terms(z, y, kind)[0]


def loss_and_gradients(net: Network, batch, labels, kind: LossKind = LossKind(), relu_masks=None):
    """Mean loss on the batch together with its exact :class:`GradientSet`.

    ``relu_masks`` (from :func:`relu_masks`) pins every relu unit's on/off
    state, which makes the network linear in each layer's parameters around a
    fixed activation region.
    """
    x = _as_batch(net, batch)
    y = _check_labels(labels, x.shape[0], net.out_dim)
    pre, post = _forward_cache(net, x, relu_masks)
    value, delta = _loss_terms(post[-1], y, kind)
    grads_w = [None] * net.n_layers
    grads_b = [None] * net.n_layers
    for k in range(net.n_layers - 1, -1, -1):
        layer = net.layers[k]
        if relu_masks is not None and relu_masks[k] is not None:
            dact = relu_masks[k]
        else:
            dact = _activation_grad(pre[k], post[k], layer.activation)
        dz = delta if dact is None else delta * dact
        a_prev = x if k == 0 else post[k - 1]
        grads_w[k] = a_prev.T @ dz
        grads_b[k] = dz.sum(axis=0)
        if k:
            delta = dz @ layer.weights.T
    return value, GradientSet(grads_w, grads_b)


def backward(net: Network, batch, labels, kind: LossKind = LossKind()) -> GradientSet:
    return loss_and_gradients(net, batch, labels, kind)[1]


def predict_proba(net: Network, batch) -> np.ndarray:
    _, logits = forward(net, batch)
    return np.exp(log_softmax(logits))


def predict(net: Network, batch) -> np.ndarray:
    _, logits = forward(net, batch)
    return np.argmax(logits, axis=1)


def adamw_step(net: Network, grads: GradientSet, state: AdamWState, lr: float, frozen=()):
    """One AdamW update; returns ``(new_net, new_state)``.

    Weight decay is decoupled: parameters are first shrunk by ``lr * weight_decay``
    and then moved by the bias-corrected Adam direction.  Layers listed in
    ``frozen`` are left untouched, moments included.
    """
    if lr < 0:
        raise InvalidSpecError("learning rate must be non-negative")
    grads.check_congruent(net)
    if not grads.is_finite():
        raise NumericError("non-finite gradient passed to adamw_step")
    frozen = set(frozen)
    new_state = state.copy()
    new_state.step = state.step + 1
    t = new_state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    decay = 1.0 - lr * state.weight_decay
    layers = []
    for k, layer in enumerate(net.layers):
        if k in frozen:
            layers.append(layer.copy())
            continue
        params = []
        for p, g, m_list, v_list in (
            (layer.weights, grads.weights[k], new_state.m_weights, new_state.v_weights),
            (layer.bias, grads.biases[k], new_state.m_biases, new_state.v_biases),
        ):
            m = b1 * m_list[k] + (1.0 - b1) * g
            v = b2 * v_list[k] + (1.0 - b2) * g * g
            m_list[k] = m
            v_list[k] = v
            update = (m / corr1) / (np.sqrt(v / corr2) + state.eps)
            params.append(p * decay - lr * update)
        layers.append(DenseLayer(params[0], params[1], layer.activation))
    return Network(layers), new_state


def get_layer_params(net: Network, k: int) -> np.ndarray:
    """Flat copy of layer ``k``'s parameters: row-major weights, then bias."""
    if not 0 <= k < net.n_layers:
        raise IndexError(f"layer index {k} out of range for {net.n_layers} layers")
    layer = net.layers[k]
    return np.concatenate([layer.weights.ravel(), layer.bias])


def set_layer_params(net: Network, k: int, vector) -> Network:
    if not 0 <= k < net.n_layers:
        raise IndexError(f"layer index {k} out of range for {net.n_layers} layers")
    vec = np.asarray(vector, dtype=np.float64).reshape(-1)
    layer = net.layers[k]
    if vec.size != layer.n_params:
        raise ShapeError(f"layer {k} has {layer.n_params} parameters, got a vector of {vec.size}")
    w = vec[: layer.weights.size].reshape(layer.weights.shape).copy()
    b = vec[layer.weights.size :].copy()
    layers = list(net.layers)
    layers[k] = DenseLayer(w, b, layer.activation)
    return Network(layers)
