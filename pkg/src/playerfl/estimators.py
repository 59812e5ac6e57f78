"""scikit-learn compatible wrappers.

``NetworkClassifier`` trains a single dense network on pooled data.
``FederatedClassifier`` trains one model per client group under any of the
federated algorithms and routes predictions through the matching client's
personalized model.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import accuracy_score
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y, column_or_1d

from ._rng import make_rng
from .data import LabeledDataset, minibatches
from .nn import AdamWState, LossKind, adamw_step, init_network, loss_and_gradients, predict_proba
from .protocol import ALGORITHMS, AlgorithmConfig, ClientState, run_algorithm


def _loss_kind(name, gamma):
    return LossKind.focal(gamma) if name == "multiclass_focal" else LossKind.cross_entropy()


class NetworkClassifier(ClassifierMixin, BaseEstimator):
    def __init__(
        self,
        hidden_layer_sizes=(64, 64),
        epochs=20,
        learning_rate=1e-3,
        batch_size=32,
        loss="cross_entropy",
        focal_gamma=2.0,
        weight_decay=0.01,
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.loss = loss
        self.focal_gamma = focal_gamma
        self.weight_decay = weight_decay
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        sizes = [X.shape[1], *self.hidden_layer_sizes, len(self.classes_)]
        net = init_network(sizes, seed=self.random_state)
        opt = AdamWState.for_network(net, weight_decay=self.weight_decay)
        data = LabeledDataset(X, encoded, len(self.classes_))
        kind = _loss_kind(self.loss, self.focal_gamma)
        self.loss_curve_ = []
        for epoch in range(self.epochs):
            losses = []
            for xb, yb in minibatches(data, self.batch_size, self.random_state, stream=("epoch", epoch)):
                value, grads = loss_and_gradients(net, xb, yb, kind)
                net, opt = adamw_step(net, grads, opt, self.learning_rate)
                losses.append(value)
            self.loss_curve_.append(float(np.mean(losses)))
        self.network_ = net
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_array(X, dtype=np.float64)
        return predict_proba(self.network_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class FederatedClassifier(ClassifierMixin, BaseEstimator):
    """Per-client models trained with a federated algorithm.

    ``fit`` takes ``groups``, the client id of every row.  Each client's rows
    are split into training and validation parts; the validation part picks
    the best round.  ``predict`` needs ``groups`` as well, and every group
    must have been seen during ``fit``.
    """

    def __init__(
        self,
        algorithm="player_fl",
        hidden_layer_sizes=(256, 256, 256),
        rounds=20,
        local_epochs=1,
        learning_rate=0.03,
        batch_size=128,
        threshold=10.0,
        mu=0.01,
        adaptation_epochs=5,
        babu_finetune_epochs=5,
        loss="cross_entropy",
        focal_gamma=2.0,
        weight_decay=0.01,
        validation_fraction=0.1,
        random_state=0,
    ):
        self.algorithm = algorithm
        self.hidden_layer_sizes = hidden_layer_sizes
        self.rounds = rounds
        self.local_epochs = local_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.threshold = threshold
        self.mu = mu
        self.adaptation_epochs = adaptation_epochs
        self.babu_finetune_epochs = babu_finetune_epochs
        self.loss = loss
        self.focal_gamma = focal_gamma
        self.weight_decay = weight_decay
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        return AlgorithmConfig(
            kind=self.algorithm,
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            loss=_loss_kind(self.loss, self.focal_gamma),
            mu=self.mu,
            threshold=self.threshold,
            adaptation_epochs=self.adaptation_epochs,
            babu_finetune_epochs=self.babu_finetune_epochs,
        )

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_classification_targets(y)
        if groups is None:
            raise ValueError("FederatedClassifier.fit needs groups (one client id per row)")
        groups = column_or_1d(groups)
        if groups.shape[0] != X.shape[0]:
            raise ValueError("groups must have one entry per row of X")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        config = self._config()
        self.classes_, encoded = np.unique(y, return_inverse=True)
        self.n_features_in_ = X.shape[1]
        self.groups_ = np.unique(groups)
        n_classes = len(self.classes_)
        sizes = [X.shape[1], *self.hidden_layer_sizes, n_classes]
        theta0 = init_network(sizes, seed=self.random_state)
        clients = []
        for c, g in enumerate(self.groups_):
            rows = np.flatnonzero(groups == g)
            rows = rows[make_rng(self.random_state, "estimator_split", c).permutation(rows.size)]
            n_val = int(round(rows.size * self.validation_fraction))
            if rows.size < 2 or n_val < 1 or n_val >= rows.size:
                raise ValueError(f"group {g!r} has too few rows ({rows.size}) for a train/validation split")
            val = LabeledDataset(X[rows[:n_val]], encoded[rows[:n_val]], n_classes)
            train = LabeledDataset(X[rows[n_val:]], encoded[rows[n_val:]], n_classes)
            clients.append(
                ClientState(c, train, val, val, theta0, AdamWState.for_network(theta0, weight_decay=self.weight_decay))
            )
        out = run_algorithm(config, clients, self.random_state)
        self.networks_ = dict(zip(self.groups_.tolist(), out.best_networks))
        self.history_ = out.records
        self.federation_plan_ = out.plan
        self.transition_point_ = out.plan.transition_point if out.plan is not None else None
        self.sensitivity_ = np.array(out.plan.sensitivity) if out.plan is not None and out.plan.sensitivity else None
        return self

    def predict_proba(self, X, groups=None):
        check_is_fitted(self, "networks_")
        X = check_array(X, dtype=np.float64)
        if groups is None:
            if len(self.groups_) != 1:
                raise ValueError("predict needs groups when the model has more than one client")
            groups = np.repeat(self.groups_[0], X.shape[0])
        groups = column_or_1d(groups)
        if groups.shape[0] != X.shape[0]:
            raise ValueError("groups must have one entry per row of X")
        proba = np.empty((X.shape[0], len(self.classes_)))
        for g in np.unique(groups):
            if g not in self.networks_:
                raise ValueError(f"unknown group {g!r}")
            rows = groups == g
            proba[rows] = predict_proba(self.networks_[g], X[rows])
        return proba

    def predict(self, X, groups=None):
        proba = self.predict_proba(X, groups)
        return self.classes_[np.argmax(proba, axis=1)]

    def score(self, X, y, groups=None, sample_weight=None):
        return accuracy_score(y, self.predict(X, groups), sample_weight=sample_weight)
