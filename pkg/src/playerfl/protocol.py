"""Round-based cross-silo federated training.

Implements client updates, sample-weighted server aggregation, and the
algorithm suite: local training, FedAvg, FedProx, local adaptation, FedBABU,
and layer-wise partial federation driven by federation sensitivity (with a
random-split control).

Every client's batch order is drawn from a stream keyed by
``(seed, client_id, epoch)``, so algorithms that share a seed and initial
network see identical batches.  This is what makes the boundary cases of the
partial scheme reproduce FedAvg and local training exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._rng import make_rng
from .data import ClientPartition, LabeledDataset, client_weights, minibatches
from .diagnostics import SensitivityProfile, federation_sensitivity
from .evaluation import accuracy, macro_f1
from .exceptions import InvalidSpecError, PlayerFLError, ProtocolError, ShapeError
from .nn import (
    AdamWState,
    GradientSet,
    LossKind,
    Network,
    adamw_step,
    get_layer_params,
    loss,
    loss_and_gradients,
    forward,
    set_layer_params,
)

logger = logging.getLogger(__name__)

ALGORITHMS = (
    "local",
    "fedavg",
    "fedprox",
    "local_adaptation",
    "fedbabu",
    "player_fl",
    "player_fl_random",
)


@dataclass
class ClientState:
    client_id: int
    train: LabeledDataset
    val: LabeledDataset
    test: LabeledDataset
    network: Network
    optimizer: AdamWState
    epochs_completed: int = 0
    snapshots: list | None = field(default=None, repr=False)
    last_train_loss: float = float("nan")

    def __post_init__(self):
        if len(self.train) < 1:
            raise InvalidSpecError("a client needs at least one training sample")

    @property
    def n_samples(self) -> int:
        return len(self.train)


def make_clients(partition: ClientPartition, network: Network, **adamw) -> list:
    """One :class:`ClientState` per partition entry, all starting from ``network``."""
    return [
        ClientState(c, part.train, part.val, part.test, network, AdamWState.for_network(network, **adamw))
        for c, part in enumerate(partition.clients)
    ]


@dataclass(frozen=True)
class FederationPlan:
    """Layers ``0 .. transition_point - 1`` are federated; the rest stay local."""

    transition_point: int
    n_layers: int
    threshold: float = 10.0
    sensitivity: tuple | None = None

    def __post_init__(self):
        if not 0 <= self.transition_point <= self.n_layers:
            raise InvalidSpecError(
                f"transition point {self.transition_point} outside [0, {self.n_layers}]"
            )
        if not self.threshold > 1:
            raise InvalidSpecError("threshold must be > 1")

    @property
    def federated_layers(self) -> list:
        return list(range(self.transition_point))

    @property
    def local_layers(self) -> list:
        return list(range(self.transition_point, self.n_layers))

    def params_sent(self, param_counts: Sequence[int]) -> int:
        return int(sum(param_counts[: self.transition_point]))


@dataclass
class AlgorithmConfig:
    kind: str
    rounds: int = 20
    local_epochs: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 32
    loss: LossKind = LossKind()
    mu: float = 0.01
    threshold: float = 10.0
    adaptation_epochs: int = 5
    babu_finetune_epochs: int = 5
    random_seed: int | None = None
    sensitivity_mode: str = "mean"
    sensitivity_weighting: str = "unweighted"
    forced_transition: int | None = None

    def __post_init__(self):
        if self.kind not in ALGORITHMS:
            raise InvalidSpecError(f"unsupported algorithm {self.kind!r}")
        if self.rounds < 1 or self.local_epochs < 1:
            raise InvalidSpecError("rounds and local_epochs must be >= 1")
        if self.mu < 0:
            raise InvalidSpecError("mu must be >= 0")
        if not self.threshold > 1:
            raise InvalidSpecError("threshold must be > 1")
        if self.learning_rate < 0:
            raise InvalidSpecError("learning rate must be >= 0")
        if self.sensitivity_weighting not in ("unweighted", "weighted"):
            raise InvalidSpecError(f"unknown sensitivity weighting {self.sensitivity_weighting!r}")


@dataclass(frozen=True)
class RoundRecord:
    round: int
    client_id: int
    phase: str
    train_loss: float
    val_loss: float
    val_accuracy: float
    val_macro_f1: float
    params_sent: int


@dataclass
class RunOutput:
    networks: list
    best_networks: list
    best_rounds: list
    records: list
    plan: FederationPlan | None = None
    profiles: list = field(default_factory=list)
    call_counts: dict = field(default_factory=dict)


def _load_layers(net: Network, incoming: dict) -> Network:
    for k, vector in incoming.items():
        try:
            net = set_layer_params(net, k, vector)
        except (ShapeError, IndexError) as exc:
            raise ProtocolError(f"incoming parameters do not fit layer {k}: {exc}") from exc
    return net


def client_update(
    state: ClientState,
    incoming: dict | None = None,
    epochs: int = 1,
    lr: float = 1e-3,
    kind: LossKind = LossKind(),
    batch_size: int = 32,
    seed: int = 0,
    mu: float = 0.0,
    anchor: Network | None = None,
    frozen: Sequence[int] = (),
    record: bool = False,
) -> ClientState:
    """Load ``incoming`` layer vectors, then run ``epochs`` of AdamW on the train split.

    With ``mu > 0`` the loss gains ``(mu / 2) * ||theta - anchor||^2``.  When
    ``record`` is set and this is the client's first epoch, the per-batch
    parameters and loss gradients of that epoch are kept in ``snapshots``.
    """
    net = _load_layers(state.network, incoming or {})
    if mu > 0.0:
        if anchor is None:
            raise ProtocolError("a proximal term needs an anchor network")
        if not anchor.same_architecture(net):
            raise ProtocolError("anchor network architecture differs from the client's")
    opt = state.optimizer
    snapshots = state.snapshots
    epoch = state.epochs_completed
    losses = []
    for _ in range(epochs):
        capture = record and epoch == 0
        if capture:
            snapshots = []
        for xb, yb in minibatches(state.train, batch_size, seed, stream=("client", state.client_id, "epoch", epoch)):
            value, grads = loss_and_gradients(net, xb, yb, kind)
            if capture:
                snapshots.append(
                    [(get_layer_params(net, k), grads.layer_vector(k)) for k in range(net.n_layers)]
                )
            if mu > 0.0:
                grads, value = _add_proximal(net, grads, value, mu, anchor)
            net, opt = adamw_step(net, grads, opt, lr, frozen=frozen)
            losses.append(value)
        epoch += 1
    return replace(
        state,
        network=net,
        optimizer=opt,
        epochs_completed=epoch,
        snapshots=snapshots,
        last_train_loss=float(np.mean(losses)) if losses else float("nan"),
    )


def _add_proximal(net: Network, grads: GradientSet, value: float, mu: float, anchor: Network):
    gw, gb = [], []
    penalty = 0.0
    for k, (layer, ref) in enumerate(zip(net.layers, anchor.layers)):
        dw = layer.weights - ref.weights
        db = layer.bias - ref.bias
        gw.append(grads.weights[k] + mu * dw)
        gb.append(grads.biases[k] + mu * db)
        penalty += np.sum(dw * dw) + np.sum(db * db)
    return GradientSet(gw, gb), value + 0.5 * mu * penalty


def server_aggregate(params: Sequence, weights) -> np.ndarray:
    """Weighted average ``sum_c weights[c] * params[c]`` in fixed client order.

    Computed as ``params[0] + sum_c weights[c] * (params[c] - params[0])``,
    which equals the weighted sum when the weights total 1 and returns
    identical inputs unchanged, bit for bit.
    """
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if len(params) != w.size or w.size == 0:
        raise ProtocolError(f"{len(params)} parameter vectors but {w.size} weights")
    if abs(w.sum() - 1.0) > 1e-9:
        raise ProtocolError(f"client weights sum to {w.sum()!r}, not 1")
    if np.any(w < 0):
        raise ProtocolError("client weights must be non-negative")
    vectors = [np.asarray(p, dtype=np.float64).reshape(-1) for p in params]
    base = vectors[0]
    if any(v.shape != base.shape for v in vectors):
        raise ShapeError("client parameter vectors differ in length")
    out = base.copy()
    for wc, v in zip(w, vectors):
        out += wc * (v - base)
    return out


def calculate_fed_sensitivity(state: ClientState, mode: str = "mean") -> SensitivityProfile:
    if state.epochs_completed < 1 or not state.snapshots:
        raise ProtocolError(
            f"client {state.client_id} has no recorded first-epoch snapshots; train one epoch with record=True first"
        )
    return federation_sensitivity(state.snapshots, mode)


def aggregate_profiles(profiles: Sequence[SensitivityProfile], weights=None) -> np.ndarray:
    if not profiles:
        raise InvalidSpecError("need at least one sensitivity profile")
    n = profiles[0].n_layers
    if any(p.n_layers != n for p in profiles):
        raise ShapeError("sensitivity profiles differ in length")
    stacked = np.vstack([p.cumulative for p in profiles])
    if weights is None:
        return stacked.sum(axis=0)
    return np.asarray(weights, dtype=np.float64) @ stacked


def transition_point(total, threshold: float) -> int:
    """First 1-indexed layer ``p`` with ``F[p+1] / F[p] > threshold``, else ``L``."""
    f = np.asarray(total, dtype=np.float64)
    for p in range(1, f.size):
        lower, upper = f[p - 1], f[p]
        if lower == 0.0:
            ratio = np.inf if upper > 0.0 else 1.0
        else:
            ratio = upper / lower
        if ratio > threshold:
            return p
    return int(f.size)


def layer_split(profiles: Sequence[SensitivityProfile], t: float = 10.0, weights=None) -> FederationPlan:
    """Sum client profiles (unweighted unless ``weights`` given) and find the transition point."""
    if not t > 1:
        raise InvalidSpecError("threshold must be > 1")
    total = aggregate_profiles(profiles, weights)
    return FederationPlan(transition_point(total, t), total.size, t, tuple(float(x) for x in total))


def evaluate_network(net: Network, data: LabeledDataset, kind: LossKind = LossKind()) -> dict:
    _, logits = forward(net, data.features)
    pred = np.argmax(logits, axis=1)
    return {
        "loss": loss(logits, data.labels, kind),
        "accuracy": accuracy(pred, data.labels),
        "macro_f1": macro_f1(pred, data.labels, data.class_count),
    }


def _same_params(a: Network, b: Network) -> bool:
    return a.same_architecture(b) and all(
        np.array_equal(x.weights, y.weights) and np.array_equal(x.bias, y.bias)
        for x, y in zip(a.layers, b.layers)
    )


class _Tracker:
    """Round records plus the best-validation-loss network per client."""

    def __init__(self, clients, kind):
        self.kind = kind
        self.records = []
        self.best = [c.network for c in clients]
        self.best_loss = [np.inf] * len(clients)
        self.best_round = [0] * len(clients)
        self.current_round = 0

    def log(self, rnd, phase, clients, sent):
        for i, c in enumerate(clients):
            scores = evaluate_network(c.network, c.val, self.kind)
            self.records.append(
                RoundRecord(rnd, c.client_id, phase, c.last_train_loss, scores["loss"], scores["accuracy"], scores["macro_f1"], sent)
            )
            if scores["loss"] < self.best_loss[i]:
                self.best_loss[i] = scores["loss"]
                self.best[i] = c.network
                self.best_round[i] = rnd


def _choose_plan(config: AlgorithmConfig, clients, seed, counts):
    n_layers = clients[0].network.n_layers
    profiles = []
    if config.kind == "player_fl":
        profiles = [calculate_fed_sensitivity(c, config.sensitivity_mode) for c in clients]
        counts["sensitivity"] += 1
        weights = None
        if config.sensitivity_weighting == "weighted":
            weights = client_weights([c.n_samples for c in clients])
        plan = layer_split(profiles, config.threshold, weights)
        counts["split"] += 1
        if config.forced_transition is not None:
            plan = replace(plan, transition_point=int(config.forced_transition))
        return plan, profiles
    if config.forced_transition is not None:
        p = int(config.forced_transition)
    else:
        if n_layers < 2:
            raise ProtocolError("a random split needs at least two layers")
        stream_seed = seed if config.random_seed is None else config.random_seed
        p = int(make_rng(stream_seed, "player_fl_random").integers(1, n_layers))
    return FederationPlan(p, n_layers, config.threshold), profiles


def run_algorithm(config: AlgorithmConfig, clients: Sequence[ClientState], seed: int = 0) -> RunOutput:
    """Train every client under ``config.kind`` and return final and best models."""
    clients = list(clients)
    if not clients:
        raise ProtocolError("no clients")
    init = clients[0].network
    for c in clients[1:]:
        if not _same_params(c.network, init):
            raise ProtocolError("clients must start from an identical initial network")
    n_layers = init.n_layers
    counts = {"sensitivity": 0, "split": 0}
    weights = client_weights([c.n_samples for c in clients])
    param_counts = init.param_counts
    tracker = _Tracker(clients, config.loss)
    try:
        return _train(config, clients, seed, tracker, counts, weights, param_counts, n_layers)
    except PlayerFLError as exc:
        if getattr(exc, "round", None) is None:
            exc.round = tracker.current_round
        raise


def _train(config, clients, seed, tracker, counts, weights, param_counts, n_layers) -> RunOutput:
    kind = config.kind
    frozen = (n_layers - 1,) if kind == "fedbabu" else ()
    if kind == "local":
        fed_layers = []
    elif kind == "fedbabu":
        fed_layers = list(range(n_layers - 1))
    else:
        fed_layers = list(range(n_layers))
    partial = kind in ("player_fl", "player_fl_random")
    plan, profiles = None, []
    common = dict(
        epochs=config.local_epochs,
        lr=config.learning_rate,
        kind=config.loss,
        batch_size=config.batch_size,
        seed=seed,
    )

    for rnd in range(1, config.rounds + 1):
        tracker.current_round = rnd
        updated = []
        for c in clients:
            extra = {}
            if kind == "fedprox" and config.mu > 0.0:
                extra = dict(mu=config.mu, anchor=c.network)
            updated.append(client_update(c, frozen=frozen, record=partial and rnd == 1, **extra, **common))
        clients = updated
        if partial and plan is None:
            plan, profiles = _choose_plan(config, clients, seed, counts)
            fed_layers = plan.federated_layers
            logger.info("%s: transition point %d of %d layers", kind, plan.transition_point, n_layers)
        clients = _aggregate(clients, fed_layers, weights)
        sent = int(sum(param_counts[k] for k in fed_layers))
        tracker.log(rnd, "local" if not fed_layers else "federated", clients, sent)

    finetune_epochs, finetune_frozen = 0, ()
    if kind == "local_adaptation":
        finetune_epochs = config.adaptation_epochs
    elif kind == "fedbabu":
        finetune_epochs = config.babu_finetune_epochs
        finetune_frozen = tuple(range(n_layers - 1))
    for extra_epoch in range(finetune_epochs):
        tracker.current_round = config.rounds + extra_epoch + 1
        clients = [
            client_update(c, frozen=finetune_frozen, **{**common, "epochs": 1}) for c in clients
        ]
        tracker.log(config.rounds + extra_epoch + 1, "finetune", clients, 0)

    return RunOutput(
        networks=[c.network for c in clients],
        best_networks=tracker.best,
        best_rounds=tracker.best_round,
        records=tracker.records,
        plan=plan,
        profiles=profiles,
        call_counts=counts,
    )


def _aggregate(clients, fed_layers, weights):
    if not fed_layers:
        return clients
    incoming = {
        k: server_aggregate([get_layer_params(c.network, k) for c in clients], weights) for k in fed_layers
    }
    return [replace(c, network=_load_layers(c.network, incoming)) for c in clients]
