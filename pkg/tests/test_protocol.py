import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from playerfl.data import dirichlet_label_partition, generate_synthetic, minibatches
from playerfl.diagnostics import SensitivityProfile
from playerfl.exceptions import InvalidSpecError, ProtocolError, ShapeError
from playerfl.nn import AdamWState, adamw_step, get_layer_params, init_network, loss_and_gradients
from playerfl.protocol import (
    AlgorithmConfig,
    FederationPlan,
    calculate_fed_sensitivity,
    client_update,
    layer_split,
    make_clients,
    run_algorithm,
    server_aggregate,
    transition_point,
)

SEED = 3


@pytest.fixture(scope="module")
def partition():
    data = generate_synthetic(3, 6, 60, class_separation=2.0, seed=SEED)
    return dirichlet_label_partition(data, 3, 0.3, seed=SEED)


@pytest.fixture(scope="module")
def theta0(partition):
    return init_network([6, 8, 8, 3], seed=SEED)


def _config(kind, **kw):
    base = dict(rounds=4, learning_rate=0.01, batch_size=16)
    base.update(kw)
    return AlgorithmConfig(kind, **base)


def _run(kind, partition, theta0, **kw):
    return run_algorithm(_config(kind, **kw), make_clients(partition, theta0), SEED)


def _params(out):
    return [net.to_vector() for net in out.networks]


# -- aggregation --------------------------------------------------------------------


def test_aggregate_examples():
    assert np.array_equal(server_aggregate([[1, 2], [3, 4]], [0.5, 0.5]), [2, 3])
    assert np.array_equal(server_aggregate([[0.0], [4.0]], [0.75, 0.25]), [1.0])


def test_aggregate_identical_inputs_exact():
    v = np.random.default_rng(0).normal(size=7)
    assert np.array_equal(server_aggregate([v, v.copy(), v.copy()], [0.2, 0.3, 0.5]), v)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_aggregate_is_convex_combination(clients, seed):
    rng = np.random.default_rng(seed)
    vecs = rng.normal(size=(clients, 5))
    w = rng.dirichlet(np.ones(clients))
    w /= w.sum()
    out = server_aggregate(list(vecs), w)
    assert np.allclose(out, w @ vecs, atol=1e-12)
    assert np.all(out >= vecs.min(axis=0) - 1e-12) and np.all(out <= vecs.max(axis=0) + 1e-12)


def test_aggregate_errors():
    with pytest.raises(ProtocolError):
        server_aggregate([[1.0], [2.0]], [0.5, 0.6])
    with pytest.raises(ProtocolError):
        server_aggregate([[1.0], [2.0]], [1.0])
    with pytest.raises(ShapeError):
        server_aggregate([[1.0], [2.0, 3.0]], [0.5, 0.5])


# -- split rule ----------------------------------------------------------------------


def test_split_hand_example():
    plan = layer_split([SensitivityProfile(np.array([1.0, 1.1, 50.0, 55.0]), np.zeros(4), 1)], t=10)
    assert plan.transition_point == 2
    assert plan.federated_layers == [0, 1]
    assert plan.local_layers == [2, 3]


def test_split_fallback_federates_everything():
    assert transition_point([1.0, 1.0, 1.0], 2.0) == 3


def test_split_zero_sensitivity():
    assert transition_point([0.0, 0.0, 1.0], 10) == 2
    assert transition_point([0.0, 0.0, 0.0], 10) == 3


def test_split_sums_clients_unweighted():
    a = SensitivityProfile(np.array([1.0, 1.0, 15.0]), np.zeros(3), 1)
    b = SensitivityProfile(np.array([1.0, 1.0, 1.0]), np.zeros(3), 1)
    assert layer_split([a, b], t=10).transition_point == 3
    assert layer_split([a, b], t=10).sensitivity == (2.0, 2.0, 16.0)
    assert layer_split([a, b], t=10, weights=[1.0, 0.0]).transition_point == 2


def test_split_errors():
    a = SensitivityProfile(np.ones(3), np.zeros(3), 1)
    b = SensitivityProfile(np.ones(2), np.zeros(2), 1)
    with pytest.raises(ShapeError):
        layer_split([a, b])
    with pytest.raises(InvalidSpecError):
        layer_split([a], t=1.0)
    with pytest.raises(InvalidSpecError):
        FederationPlan(5, 4)


def test_plan_communication_accounting():
    plan = FederationPlan(2, 4)
    assert plan.params_sent([10, 20, 30, 40]) == 30


# -- client update ----------------------------------------------------------------------


def test_zero_learning_rate_keeps_parameters(partition, theta0):
    client = make_clients(partition, theta0, weight_decay=0.01)[0]
    after = client_update(client, epochs=3, lr=0.0)
    assert np.array_equal(after.network.to_vector(), theta0.to_vector())
    assert after.epochs_completed == 3


def test_huge_proximal_term_pins_to_anchor(partition, theta0):
    client = make_clients(partition, theta0, weight_decay=0.0)[0]
    after = client_update(client, epochs=3, lr=1e-4, mu=1e6, anchor=theta0)
    assert np.max(np.abs(after.network.to_vector() - theta0.to_vector())) < 1e-3


def test_proximal_needs_anchor(partition, theta0):
    client = make_clients(partition, theta0)[0]
    with pytest.raises(ProtocolError):
        client_update(client, mu=0.1)


def test_incoming_shape_mismatch(partition, theta0):
    client = make_clients(partition, theta0)[0]
    with pytest.raises(ProtocolError):
        client_update(client, incoming={0: np.zeros(3)})


def test_sensitivity_before_training(partition, theta0):
    with pytest.raises(ProtocolError):
        calculate_fed_sensitivity(make_clients(partition, theta0)[0])


def test_single_layer_sensitivity(partition):
    net = init_network([6, 3], seed=0)
    client = client_update(make_clients(partition, net)[0], record=True)
    prof = calculate_fed_sensitivity(client)
    assert prof.n_layers == 1
    assert prof.cumulative[0] == prof.mean_importance[0]


# -- algorithm equivalences ------------------------------------------------------------------


def test_forced_full_split_equals_fedavg(partition, theta0):
    fed = _params(_run("fedavg", partition, theta0))
    pl = _params(_run("player_fl", partition, theta0, forced_transition=3))
    for a, b in zip(fed, pl):
        assert np.max(np.abs(a - b)) <= 1e-12


def test_forced_zero_split_equals_local(partition, theta0):
    loc = _params(_run("local", partition, theta0))
    pl = _params(_run("player_fl", partition, theta0, forced_transition=0))
    assert all(np.array_equal(a, b) for a, b in zip(loc, pl))


def test_fedprox_without_penalty_equals_fedavg(partition, theta0):
    fed = _params(_run("fedavg", partition, theta0))
    prox = _params(_run("fedprox", partition, theta0, mu=0.0))
    assert all(np.array_equal(a, b) for a, b in zip(fed, prox))


def test_single_client_fedavg_equals_local(partition, theta0):
    one = make_clients(partition, theta0)[:1]
    fed = run_algorithm(_config("fedavg"), one, SEED)
    loc = run_algorithm(_config("local"), one, SEED)
    assert np.array_equal(fed.networks[0].to_vector(), loc.networks[0].to_vector())


def test_fedprox_penalty_changes_trajectory(partition, theta0):
    fed = _params(_run("fedavg", partition, theta0))
    prox = _params(_run("fedprox", partition, theta0, mu=1.0))
    assert not np.array_equal(fed[0], prox[0])


# -- PLayer-FL run properties ---------------------------------------------------------------


def _replayed_profile(client_data, net, client_id, lr, batch, weight_decay=0.01):
    # first epoch re-run by hand, averaging (theta * g)^2 per layer over batches
    opt = AdamWState.for_network(net, weight_decay=weight_decay)
    sums = np.zeros(net.n_layers)
    n = 0
    for xb, yb in minibatches(client_data.train, batch, SEED, stream=("client", client_id, "epoch", 0)):
        _, g = loss_and_gradients(net, xb, yb)
        for k in range(net.n_layers):
            prod = get_layer_params(net, k) * g.layer_vector(k)
            sums[k] += np.sum(prod**2) / prod.size
        n += 1
        net, opt = adamw_step(net, g, opt, lr)
    return np.cumsum(sums / n)


def test_sensitivity_matches_replay(partition, theta0):
    out = _run("player_fl", partition, theta0)
    for c, prof in enumerate(out.profiles):
        expected = _replayed_profile(partition.clients[c], theta0, c, 0.01, 16)
        assert np.allclose(prof.cumulative, expected, rtol=1e-12, atol=0)
        assert np.all(np.diff(prof.cumulative) >= 0)


def test_one_sensitivity_pass_and_one_split(partition, theta0):
    out = _run("player_fl", partition, theta0, rounds=6)
    assert out.call_counts == {"sensitivity": 1, "split": 1}
    assert out.plan.transition_point == transition_point(out.plan.sensitivity, out.plan.threshold)


def test_partial_federation_layers(partition, theta0):
    out = _run("player_fl", partition, theta0, forced_transition=1)
    nets = out.networks
    base = get_layer_params(nets[0], 0)
    assert all(np.array_equal(get_layer_params(n, 0), base) for n in nets[1:])
    for k in (1, 2):
        assert not np.array_equal(get_layer_params(nets[0], k), get_layer_params(nets[1], k))


def test_params_sent_accounting(partition, theta0):
    counts = theta0.param_counts
    pl = _run("player_fl", partition, theta0, forced_transition=2)
    assert {r.params_sent for r in pl.records} == {counts[0] + counts[1]}
    assert sum(counts[:2]) < sum(counts)
    full = _run("player_fl", partition, theta0, forced_transition=3)
    fed = _run("fedavg", partition, theta0)
    assert {r.params_sent for r in full.records} == {r.params_sent for r in fed.records} == {sum(counts)}
    assert {r.params_sent for r in _run("local", partition, theta0).records} == {0}


def test_random_split_range_and_determinism(partition, theta0):
    points = set()
    for seed in range(12):
        cfg = _config("player_fl_random", rounds=1)
        p = run_algorithm(cfg, make_clients(partition, theta0), seed).plan.transition_point
        q = run_algorithm(cfg, make_clients(partition, theta0), seed).plan.transition_point
        assert p == q
        assert 1 <= p <= 2
        points.add(p)
    assert points == {1, 2}


def test_fedbabu_head_frozen_until_finetune(partition, theta0):
    frozen = _run("fedbabu", partition, theta0, babu_finetune_epochs=0)
    head = get_layer_params(theta0, 2)
    assert all(np.array_equal(get_layer_params(n, 2), head) for n in frozen.networks)
    body = get_layer_params(frozen.networks[0], 0)
    assert all(np.array_equal(get_layer_params(n, 0), body) for n in frozen.networks)
    tuned = _run("fedbabu", partition, theta0, babu_finetune_epochs=2)
    assert not np.array_equal(get_layer_params(tuned.networks[0], 2), head)
    for a, b in zip(frozen.networks, tuned.networks):
        assert np.array_equal(get_layer_params(a, 0), get_layer_params(b, 0))


def test_local_adaptation_finetunes(partition, theta0):
    out = _run("local_adaptation", partition, theta0, adaptation_epochs=3)
    phases = [r.phase for r in out.records]
    assert phases.count("finetune") == 3 * len(partition)
    assert max(r.round for r in out.records) == 4 + 3


def test_runs_are_deterministic(partition, theta0):
    a = _run("player_fl", partition, theta0)
    b = _run("player_fl", partition, theta0)
    assert a.records == b.records
    assert all(np.array_equal(x, y) for x, y in zip(_params(a), _params(b)))


def test_best_networks_track_validation_loss(partition, theta0):
    out = _run("fedavg", partition, theta0)
    for c in range(len(partition)):
        mine = [r for r in out.records if r.client_id == c]
        best = min(mine, key=lambda r: r.val_loss)
        assert out.best_rounds[c] == best.round


def test_clients_must_share_initialization(partition, theta0):
    clients = make_clients(partition, theta0)
    clients[1].network = init_network([6, 8, 8, 3], seed=SEED + 1)
    with pytest.raises(ProtocolError):
        run_algorithm(_config("fedavg"), clients, SEED)


def test_unsupported_algorithm():
    with pytest.raises(InvalidSpecError):
        AlgorithmConfig("scaffold")
