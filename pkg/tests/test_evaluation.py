import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import friedmanchisquare
from sklearn.metrics import f1_score

from oracles import reference_f1
from playerfl.evaluation import (
    RunResult,
    accuracy,
    confusion_matrix,
    fairness_variance,
    friedman_test,
    incentivization_rate,
    macro_f1,
    mean_ranks,
    rank_rows,
)
from playerfl.exceptions import IncompleteResultsError, InvalidSpecError, ShapeError

# tie-free score tables: [blocks x algorithms]
FRIEDMAN_TABLES = [
    [[0.9, 0.8, 0.7], [0.85, 0.6, 0.75], [0.7, 0.65, 0.5], [0.95, 0.9, 0.92]],
    [[1, 2, 3], [1, 2, 3], [1, 2, 3], [1, 2, 3], [1, 2, 3]],
    [[3, 1, 2, 4], [2, 4, 1, 3], [4, 3, 2, 1]],
    [[0.1, 0.4, 0.3, 0.2, 0.5], [0.5, 0.1, 0.2, 0.3, 0.4], [0.2, 0.3, 0.5, 0.1, 0.4], [0.3, 0.5, 0.4, 0.2, 0.1]],
    [[7.0, 1.0, 3.0], [6.0, 2.0, 5.0], [1.0, 9.0, 4.0], [8.0, 3.0, 0.0], [2.5, 4.0, 6.0], [9.0, 0.5, 1.5]],
]


# -- per-client metrics -------------------------------------------------------------


def test_macro_f1_perfect():
    assert macro_f1([0, 1, 2, 1], [0, 1, 2, 1], 3) == 1.0


def test_macro_f1_hand_examples():
    # class 0: precision 1, recall 0.5; class 1: precision 0.5, recall 1
    assert macro_f1([0, 1, 1], [0, 0, 1], 2) == pytest.approx(2 / 3, abs=1e-12)
    assert macro_f1([0, 0, 0, 0], [0, 0, 1, 1], 2) == pytest.approx(1 / 3, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 3)), min_size=1, max_size=40))
def test_macro_f1_matches_references(pairs):
    pred, true = map(list, zip(*pairs))
    value = macro_f1(pred, true, 4)
    assert value == pytest.approx(reference_f1(pred, true, 4), abs=1e-12)
    sk = f1_score(true, pred, labels=range(4), average="macro", zero_division=0)
    assert value == pytest.approx(sk, abs=1e-12)


def test_macro_f1_equals_accuracy_on_symmetric_confusion():
    # every class has 3 of 4 right and one error spread cyclically
    true = np.repeat(np.arange(4), 4)
    pred = true.copy()
    pred[[3, 7, 11, 15]] = [1, 2, 3, 0]
    assert macro_f1(pred, true, 4) == pytest.approx(accuracy(pred, true), abs=1e-12)


def test_confusion_matrix_rows_are_truth():
    cm = confusion_matrix([1, 1, 0], [0, 1, 0], 2)
    assert np.array_equal(cm, [[1, 1], [0, 1]])


def test_metrics_reject_empty_and_mismatched():
    with pytest.raises(InvalidSpecError):
        macro_f1([], [], 2)
    with pytest.raises(ShapeError):
        accuracy([0, 1], [0])


def test_fairness_examples():
    assert fairness_variance([0.8, 0.8, 0.8]) == 0.0
    assert fairness_variance([0.5, 0.7]) == pytest.approx(0.01, abs=1e-15)
    with pytest.raises(InvalidSpecError):
        fairness_variance([0.5])


def test_incentivization_examples():
    assert incentivization_rate([0.9, 0.5], [0.8, 0.6], [0.7, 0.55]) == 50.0
    assert incentivization_rate([0.5, 0.6], [0.5, 0.6], [0.1, 0.1]) == 0.0
    assert incentivization_rate([0.9, 0.8], [0.1, 0.2], [0.3, 0.4]) == 100.0
    assert incentivization_rate([0.1, 0.9], [0.2, 0.2], [0.3, 0.3], "lower_better") == 50.0
    with pytest.raises(ShapeError):
        incentivization_rate([1, 2], [1], [1, 2])


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 5, elements=st.floats(-10, 10)),
    arrays(np.float64, 5, elements=st.floats(-10, 10)),
    arrays(np.float64, 5, elements=st.floats(-10, 10)),
)
def test_incentivization_negation_invariance(p, s, g):
    assert incentivization_rate(p, s, g, "higher_better") == incentivization_rate(-p, -s, -g, "lower_better")


# -- ranks and Friedman ----------------------------------------------------------------


def test_rank_examples():
    assert np.array_equal(rank_rows([[3, 1, 2]]), [[1, 3, 2]])
    assert np.array_equal(rank_rows([[5, 5, 1]]), [[1.5, 1.5, 3]])
    assert np.array_equal(rank_rows([[3, 1, 2]], "lower_better"), [[3, 1, 2]])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 6), elements=st.integers(0, 4).map(float)))
def test_rank_rows_conserve_total(scores):
    k = scores.shape[1]
    assert np.allclose(rank_rows(scores).sum(axis=1), k * (k + 1) / 2, atol=1e-12, rtol=0)


@pytest.mark.parametrize("table", FRIEDMAN_TABLES)
def test_friedman_matches_scipy_on_tie_free_tables(table):
    table = np.asarray(table, dtype=float)
    ours = friedman_test(table)
    ref = friedmanchisquare(*(-table).T)
    assert abs(ours.statistic - ref.statistic) <= 1e-9
    assert abs(ours.p_value - ref.pvalue) <= 1e-9


def test_friedman_full_ties():
    res = friedman_test(np.ones((4, 3)))
    assert res.statistic == 0.0
    assert res.p_value == 1.0
    assert np.array_equal(res.mean_ranks, [2.0, 2.0, 2.0])


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 4), elements=st.floats(0.01, 10.0)), st.sampled_from([np.log, np.sqrt, np.exp, lambda v: v**3]))
def test_friedman_invariant_under_monotone_transform(scores, fn):
    a = friedman_test(scores)
    b = friedman_test(fn(scores))
    if np.array_equal(rank_rows(scores), rank_rows(fn(scores))):
        assert a.statistic == pytest.approx(b.statistic, abs=1e-12)


def test_friedman_degenerate():
    with pytest.raises(InvalidSpecError):
        friedman_test([[1, 2, 3]])
    with pytest.raises(InvalidSpecError):
        friedman_test([[1], [2]])


def _run(algo, dataset, seed, f1):
    return RunResult(algo, dataset, seed, {"macro_f1": np.atleast_1d(f1)})


def test_mean_ranks_opposite_orderings():
    runs = [_run("a", "d1", 0, 0.9), _run("b", "d1", 0, 0.1), _run("a", "d2", 0, 0.2), _run("b", "d2", 0, 0.8)]
    table = mean_ranks(runs, "macro_f1")
    assert np.array_equal(table.mean_ranks, [1.5, 1.5])
    assert table.as_dict() == {"a": 1.5, "b": 1.5}


def test_mean_ranks_by_run_blocks():
    runs = [_run("a", "d", 0, 0.9), _run("b", "d", 0, 0.1), _run("a", "d", 1, 0.9), _run("b", "d", 1, 0.8)]
    table = mean_ranks(runs, "macro_f1", by="run")
    assert table.blocks == [("d", 0), ("d", 1)]
    assert np.array_equal(table.mean_ranks, [1.0, 2.0])


def test_mean_ranks_missing_cell():
    runs = [_run("a", "d1", 0, 0.9), _run("b", "d1", 0, 0.1), _run("a", "d2", 0, 0.2)]
    with pytest.raises(IncompleteResultsError):
        mean_ranks(runs, "macro_f1")


def test_run_result_statistics():
    r = RunResult(
        "player_fl",
        "d",
        0,
        {"macro_f1": [0.9, 0.5]},
        reference_local={"macro_f1": [0.8, 0.6]},
        reference_fedavg={"macro_f1": [0.7, 0.55]},
    )
    assert r.mean("macro_f1") == pytest.approx(0.7)
    assert r.fairness("macro_f1") == pytest.approx(0.04)
    assert r.incentivization("macro_f1") == 50.0
    assert _run("fedavg", "d", 0, [0.5, 0.6]).incentivization("macro_f1") is None


def test_run_result_rejects_out_of_range():
    with pytest.raises(InvalidSpecError):
        RunResult("a", "d", 0, {"accuracy": [1.2]})
