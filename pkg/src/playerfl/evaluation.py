"""Per-client metrics, fairness, incentivization and rank statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.special import gammaincc
from scipy.stats import rankdata

from .exceptions import IncompleteResultsError, InvalidSpecError, ShapeError

HIGHER_BETTER = "higher_better"
LOWER_BETTER = "lower_better"

METRIC_DIRECTIONS = {
    "macro_f1": HIGHER_BETTER,
    "accuracy": HIGHER_BETTER,
    "test_loss": LOWER_BETTER,
}


def _check_direction(direction: str) -> None:
    if direction not in (HIGHER_BETTER, LOWER_BETTER):
        raise InvalidSpecError(f"unknown direction {direction!r}")


def confusion_matrix(predictions, labels, classes: int) -> np.ndarray:
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.shape != true.shape:
        raise ShapeError(f"{pred.size} predictions but {true.size} labels")
    if pred.size == 0:
        raise InvalidSpecError("empty prediction set")
    matrix = np.zeros((classes, classes), dtype=np.int64)
    np.add.at(matrix, (true, pred), 1)
    return matrix


def macro_f1(predictions, labels, classes: int) -> float:
    """Unweighted mean of per-class F1.

    Precision or recall with a zero denominator counts as 0, so a class that
    is neither predicted nor present contributes an F1 of 0.
    """
    cm = confusion_matrix(predictions, labels, classes)
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0)
    actual = cm.sum(axis=1)
    precision = np.divide(tp, predicted, out=np.zeros(classes), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros(classes), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2.0 * precision * recall, denom, out=np.zeros(classes), where=denom > 0)
    return float(f1.mean())


def accuracy(predictions, labels) -> float:
    pred = np.asarray(predictions).reshape(-1)
    true = np.asarray(labels).reshape(-1)
    if pred.shape != true.shape:
        raise ShapeError(f"{pred.size} predictions but {true.size} labels")
    if pred.size == 0:
        raise InvalidSpecError("empty prediction set")
    return float(np.mean(pred == true))


def fairness_variance(per_client) -> float:
    """Population variance of per-client scores; lower means fairer."""
    p = np.asarray(per_client, dtype=np.float64).reshape(-1)
    if p.size < 2:
        raise InvalidSpecError("fairness needs at least two clients")
    # shifting by the first score keeps identical inputs at exactly zero
    d = p - p[0]
    return float(np.mean((d - d.mean()) ** 2))


def incentivization_rate(P, S, G, direction: str = HIGHER_BETTER) -> float:
    """Percentage of clients whose score strictly beats both references."""
    _check_direction(direction)
    p, s, g = (np.asarray(v, dtype=np.float64).reshape(-1) for v in (P, S, G))
    if not (p.shape == s.shape == g.shape):
        raise ShapeError("P, S and G must have equal lengths")
    if p.size == 0:
        raise InvalidSpecError("no clients")
    if direction == HIGHER_BETTER:
        wins = (p > s) & (p > g)
    else:
        wins = (p < s) & (p < g)
    return float(100.0 * wins.sum() / p.size)


def rank_rows(scores, direction: str = HIGHER_BETTER) -> np.ndarray:
    """Mid-ranks within each row; rank 1 is the best score."""
    _check_direction(direction)
    table = np.asarray(scores, dtype=np.float64)
    if table.ndim != 2:
        raise ShapeError("scores must be a 2-d [blocks x algorithms] table")
    keyed = -table if direction == HIGHER_BETTER else table
    return np.vstack([rankdata(row, method="average") for row in keyed])


@dataclass
class FriedmanResult:
    statistic: float
    p_value: float
    mean_ranks: np.ndarray


def friedman_test(scores, direction: str = HIGHER_BETTER) -> FriedmanResult:
    """Friedman rank test over a ``[blocks x algorithms]`` score table.

    Uses mid-ranks and the chi-square approximation with ``k - 1`` degrees of
    freedom, without the tie-correction divisor.
    """
    table = np.asarray(scores, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] < 2 or table.shape[1] < 2:
        raise InvalidSpecError("Friedman test needs at least 2 blocks and 2 algorithms")
    n, k = table.shape
    ranks = rank_rows(table, direction)
    rank_sums = ranks.sum(axis=0)
    stat = 12.0 * n / (k * (k + 1)) * (np.sum(rank_sums**2) / n**2 - k * (k + 1) ** 2 / 4.0)
    stat = max(float(stat), 0.0)
    p_value = float(gammaincc((k - 1) / 2.0, stat / 2.0))
    return FriedmanResult(stat, p_value, rank_sums / n)


@dataclass
class RunResult:
    """Final per-client scores of one algorithm on one dataset and seed.

    ``metrics`` maps metric name to a per-client array; ``reference_local``
    and ``reference_fedavg`` hold the matching arrays for the local-only and
    FedAvg models trained from the same initialization and partition.
    """

    algorithm: str
    dataset: str
    seed: int
    metrics: dict
    reference_local: dict = field(default_factory=dict)
    reference_fedavg: dict = field(default_factory=dict)

    def __post_init__(self):
        self.metrics = {k: np.asarray(v, dtype=np.float64) for k, v in self.metrics.items()}
        for name in ("macro_f1", "accuracy"):
            if name in self.metrics:
                v = self.metrics[name]
                if np.any((v < 0) | (v > 1)):
                    raise InvalidSpecError(f"{name} outside [0, 1]")
        if "test_loss" in self.metrics and np.any(self.metrics["test_loss"] < 0):
            raise InvalidSpecError("negative test loss")

    def mean(self, metric: str) -> float:
        return float(np.mean(self.metrics[metric]))

    def fairness(self, metric: str) -> float:
        return fairness_variance(self.metrics[metric])

    def incentivization(self, metric: str) -> float | None:
        if metric not in self.reference_local or metric not in self.reference_fedavg:
            return None
        return incentivization_rate(
            self.metrics[metric],
            self.reference_local[metric],
            self.reference_fedavg[metric],
            METRIC_DIRECTIONS.get(metric, HIGHER_BETTER),
        )


@dataclass
class RankTable:
    blocks: list
    algorithms: list
    ranks: np.ndarray
    scores: np.ndarray

    @property
    def mean_ranks(self) -> np.ndarray:
        return self.ranks.mean(axis=0)

    def as_dict(self) -> dict:
        return {a: float(r) for a, r in zip(self.algorithms, self.mean_ranks)}


def score_table(cells: dict, blocks: Sequence, algorithms: Sequence) -> np.ndarray:
    rows = []
    for block in blocks:
        row = []
        for algo in algorithms:
            if (block, algo) not in cells or cells[(block, algo)] is None:
                raise IncompleteResultsError(f"missing result for block {block!r}, algorithm {algo!r}")
            row.append(cells[(block, algo)])
        rows.append(row)
    return np.array(rows, dtype=np.float64)


def mean_ranks(
    results: Iterable[RunResult],
    metric: str,
    direction: str | None = None,
    statistic: str = "mean",
    algorithms: Sequence[str] | None = None,
    by: str = "dataset",
) -> RankTable:
    """Rank algorithms within each block and average the ranks.

    A block is a dataset (``by="dataset"``, scores averaged over seeds) or a
    ``(dataset, seed)`` pair (``by="run"``).  The per-run score is the
    client-mean of ``metric``, or its fairness variance or incentivization
    rate when ``statistic`` says so.
    """
    results = list(results)
    if direction is None:
        direction = METRIC_DIRECTIONS.get(metric, HIGHER_BETTER)
        if statistic == "fairness":
            direction = LOWER_BETTER
        elif statistic == "incentivization":
            direction = HIGHER_BETTER
    if algorithms is None:
        algorithms = list(dict.fromkeys(r.algorithm for r in results))
    per_cell: dict = {}
    for r in results:
        if statistic == "mean":
            value = r.mean(metric)
        elif statistic == "fairness":
            value = r.fairness(metric)
        elif statistic == "incentivization":
            value = r.incentivization(metric)
        else:
            raise InvalidSpecError(f"unknown statistic {statistic!r}")
        block = r.dataset if by == "dataset" else (r.dataset, r.seed)
        per_cell.setdefault((block, r.algorithm), []).append(value)
    cells = {
        key: (None if any(v is None for v in vals) else float(np.mean(vals)))
        for key, vals in per_cell.items()
    }
    blocks = list(dict.fromkeys(key[0] for key in per_cell))
    scores = score_table(cells, blocks, algorithms)
    return RankTable(blocks, list(algorithms), rank_rows(scores, direction), scores)
