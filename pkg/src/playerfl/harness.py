"""Multi-seed experiment runner and result emitters."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import (
    ClientData,
    ClientPartition,
    LabeledDataset,
    dirichlet_label_partition,
    generate_synthetic,
    load_csv,
    zscore_stats,
)
from .diagnostics import gradient_variance, hessian_trace_hutchinson, linear_cka
from .evaluation import (
    METRIC_DIRECTIONS,
    RunResult,
    friedman_test,
    mean_ranks,
)
from .exceptions import IncompleteResultsError, PlayerFLError
from .nn import forward, init_network, loss_and_gradients
from .protocol import (
    AlgorithmConfig,
    aggregate_profiles,
    calculate_fed_sensitivity,
    client_update,
    evaluate_network,
    make_clients,
    run_algorithm,
)

logger = logging.getLogger(__name__)

METRICS = ("macro_f1", "accuracy", "test_loss")
REFERENCES = ("local", "fedavg")


class ExperimentError(PlayerFLError, RuntimeError):
    def __init__(self, message, dataset=None, algorithm=None, seed=None, round=None):
        self.dataset, self.algorithm, self.seed, self.round = dataset, algorithm, seed, round
        where = [f"{k}={v}" for k, v in (("dataset", dataset), ("algorithm", algorithm), ("seed", seed), ("round", round)) if v is not None]
        super().__init__(f"[{', '.join(where)}] {message}" if where else message)


@dataclass
class ResultBundle:
    config: ExperimentConfig
    runs: list = field(default_factory=list)
    results_rows: list = field(default_factory=list)
    round_rows: list = field(default_factory=list)
    sensitivity_rows: list = field(default_factory=list)
    curve_rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def build_partition(config: ExperimentConfig, spec, seed: int) -> ClientPartition:
    if spec.kind == "synthetic":
        data = generate_synthetic(
            spec.classes, spec.dim, spec.samples_per_class, spec.class_separation, spec.noise, seed
        )
        return dirichlet_label_partition(data, config.clients, config.alpha, seed, config.fractions)
    data = load_csv(config.resolve(spec.path), spec.feature_columns, spec.label_column, "none")
    partition = dirichlet_label_partition(data, config.clients, config.alpha, seed, config.fractions)
    if spec.normalization == "zscore":
        pooled = np.vstack([c.train.features for c in partition.clients])
        partition = normalize_partition(partition, zscore_stats(pooled))
    return partition


def normalize_partition(partition: ClientPartition, stats) -> ClientPartition:
    mean, std = stats

    def norm(d: LabeledDataset) -> LabeledDataset:
        return LabeledDataset((d.features - mean) / std, d.labels, d.class_count)

    clients = [ClientData(norm(c.train), norm(c.val), norm(c.test), c.indices) for c in partition.clients]
    return ClientPartition(clients, partition.weights)


def algorithm_config(config: ExperimentConfig, kind: str) -> AlgorithmConfig:
    return AlgorithmConfig(
        kind=kind,
        rounds=config.rounds,
        local_epochs=config.local_epochs,
        learning_rate=config.lr_for(kind),
        batch_size=config.batch_size,
        loss=config.loss_kind,
        mu=config.fedprox_mu,
        threshold=config.threshold,
        adaptation_epochs=config.adaptation_epochs,
        babu_finetune_epochs=config.babu_finetune_epochs,
        sensitivity_mode=config.sensitivity_mode,
        sensitivity_weighting=config.sensitivity_weighting,
    )


def initial_network(config: ExperimentConfig, partition: ClientPartition, seed: int):
    sizes = [partition.clients[0].train.dim, *config.hidden, partition.class_count]
    return init_network(sizes, config.activations, seed)


def _client_scores(networks, partition, kind):
    out = {m: [] for m in METRICS}
    for net, client in zip(networks, partition.clients):
        s = evaluate_network(net, client.test, kind)
        out["macro_f1"].append(s["macro_f1"])
        out["accuracy"].append(s["accuracy"])
        out["test_loss"].append(s["loss"])
    return {k: np.array(v) for k, v in out.items()}


def _run_cell(config: ExperimentConfig, dataset_index: int, seed: int) -> dict:
    """Every configured algorithm on one dataset and seed, references first."""
    spec = config.datasets[dataset_index]
    try:
        partition = build_partition(config, spec, seed)
        theta0 = initial_network(config, partition, seed)
    except PlayerFLError as exc:
        raise ExperimentError(str(exc), dataset=spec.name, seed=seed) from exc
    order = list(REFERENCES) + [a for a in config.algorithms if a not in REFERENCES]
    kind = config.loss_kind
    outputs, best, last = {}, {}, {}
    for algo in order:
        clients = make_clients(partition, theta0, weight_decay=config.weight_decay)
        try:
            out = run_algorithm(algorithm_config(config, algo), clients, seed)
        except PlayerFLError as exc:
            raise ExperimentError(str(exc), spec.name, algo, seed, getattr(exc, "round", None)) from exc
        outputs[algo] = out
        best[algo] = _client_scores(out.best_networks, partition, kind)
        last[algo] = _client_scores(out.networks, partition, kind)

    cell = {"runs": [], "results": [], "rounds": [], "sensitivity": []}
    for algo in config.algorithms:
        out = outputs[algo]
        personalized = algo not in REFERENCES
        cell["runs"].append(
            RunResult(
                algo,
                spec.name,
                seed,
                best[algo],
                reference_local=best["local"] if personalized else {},
                reference_fedavg=best["fedavg"] if personalized else {},
            )
        )
        p = out.plan.transition_point if out.plan is not None else None
        for c, client in enumerate(partition.clients):
            cell["results"].append(
                {
                    "dataset": spec.name,
                    "algorithm": algo,
                    "seed": seed,
                    "client": c,
                    "n_train": len(client.train),
                    "best_round": out.best_rounds[c],
                    "transition_point": p,
                    **{m: best[algo][m][c] for m in METRICS},
                    **{f"last_{m}": last[algo][m][c] for m in METRICS},
                }
            )
        for r in out.records:
            cell["rounds"].append(
                {
                    "dataset": spec.name,
                    "algorithm": algo,
                    "seed": seed,
                    "round": r.round,
                    "client": r.client_id,
                    "phase": r.phase,
                    "train_loss": r.train_loss,
                    "val_loss": r.val_loss,
                    "val_accuracy": r.val_accuracy,
                    "val_macro_f1": r.val_macro_f1,
                    "params_sent": r.params_sent,
                }
            )
        if algo == "player_fl" and out.profiles:
            total = aggregate_profiles(out.profiles)
            owners = [(str(c), prof.mean_importance, prof.cumulative) for c, prof in enumerate(out.profiles)]
            owners.append(("all", np.diff(total, prepend=0.0), total))
            for owner, imp, cum in owners:
                for layer in range(len(cum)):
                    cell["sensitivity"].append(
                        {
                            "dataset": spec.name,
                            "seed": seed,
                            "client": owner,
                            "layer": layer + 1,
                            "importance": imp[layer],
                            "cumulative": cum[layer],
                            "pct_of_first": _pct(cum[layer], cum[0]),
                            "transition_point": p,
                        }
                    )
    return cell


def _pct(value, first):
    return 100.0 * value / first if first != 0.0 else float("nan")


def _map_cells(fn, config, jobs, workers):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(config, *job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, config, *job) for job in jobs]
        return [f.result() for f in futures]


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ResultBundle:
    """Run every (dataset, seed) cell and assemble tables and statistics.

    Cells may run in worker processes; results are always assembled in
    (dataset, seed) order so outputs do not depend on scheduling.
    """
    jobs = [(d, s) for d in range(len(config.datasets)) for s in config.seeds]
    bundle = ResultBundle(config)
    for cell in _map_cells(_run_cell, config, jobs, workers):
        bundle.runs.extend(cell["runs"])
        bundle.results_rows.extend(cell["results"])
        bundle.round_rows.extend(cell["rounds"])
        bundle.sensitivity_rows.extend(cell["sensitivity"])
    bundle.summary = summarize(config, bundle.runs, bundle.results_rows)
    return bundle


def _stats(values) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "median": float(np.median(v)), "min": float(v.min()), "max": float(v.max())}


def _rank_block(runs, metric, statistic, algorithms):
    table = mean_ranks(runs, metric, statistic=statistic, algorithms=algorithms, by="run")
    entry = {
        "mean_ranks": table.as_dict(),
        "blocks": [f"{d}/seed{s}" for d, s in table.blocks],
        "friedman": None,
    }
    if len(table.blocks) >= 2 and len(algorithms) >= 2:
        direction = METRIC_DIRECTIONS[metric]
        if statistic == "fairness":
            direction = "lower_better"
        elif statistic == "incentivization":
            direction = "higher_better"
        fr = friedman_test(table.scores, direction)
        entry["friedman"] = {"statistic": fr.statistic, "p_value": fr.p_value, "k": len(algorithms), "n": len(table.blocks)}
    return entry


def summarize(config: ExperimentConfig, runs, results_rows) -> dict:
    algorithms = list(config.algorithms)
    personalized = [a for a in algorithms if a not in REFERENCES]
    seen = {(r.dataset, r.algorithm, r.seed) for r in runs}
    for d, a, s in itertools.product([d.name for d in config.datasets], algorithms, config.seeds):
        if (d, a, s) not in seen:
            raise IncompleteResultsError(f"missing run for dataset {d!r}, algorithm {a!r}, seed {s}")

    aggregates = {}
    for spec in config.datasets:
        per_algo = {}
        for algo in algorithms:
            mine = [r for r in runs if r.dataset == spec.name and r.algorithm == algo]
            entry = {}
            for m in METRICS:
                entry[m] = _stats([r.mean(m) for r in mine])
                entry[f"fairness_{m}"] = _stats([r.fairness(m) for r in mine]) if config.clients >= 2 else None
                inc = [r.incentivization(m) for r in mine]
                entry[f"incentivization_{m}"] = None if any(v is None for v in inc) else _stats(inc)
            per_algo[algo] = entry
        aggregates[spec.name] = per_algo

    ranks = {m: _rank_block(runs, m, "mean", algorithms) for m in METRICS}
    fairness = {}
    if config.clients >= 2:
        fairness = {m: _rank_block(runs, m, "fairness", algorithms) for m in METRICS}
    incentivization = None
    if personalized:
        incentivization = {m: _rank_block(runs, m, "incentivization", personalized) for m in METRICS}

    plans = {}
    for row in results_rows:
        if row["algorithm"] in ("player_fl", "player_fl_random") and row["client"] == 0:
            plans.setdefault(row["dataset"], {}).setdefault(row["algorithm"], {})[str(row["seed"])] = row["transition_point"]

    return {
        "datasets": [d.name for d in config.datasets],
        "algorithms": algorithms,
        "seeds": list(config.seeds),
        "aggregates": aggregates,
        "ranks": ranks,
        "fairness_ranks": fairness,
        "incentivization_ranks": incentivization,
        "transition_points": plans,
    }


# -- layer curves -----------------------------------------------------------


def _curve_cell(config: ExperimentConfig, dataset_index: int, seed: int) -> list:
    """Per-layer diagnostics after one epoch of independent training from a shared init."""
    spec = config.datasets[dataset_index]
    partition = build_partition(config, spec, seed)
    theta0 = initial_network(config, partition, seed)
    kind = config.loss_kind
    limit = config.curves.max_samples
    clients = [
        client_update(c, lr=config.learning_rate, kind=kind, batch_size=config.batch_size, seed=seed, record=True)
        for c in make_clients(partition, theta0, weight_decay=config.weight_decay)
    ]
    profiles = [calculate_fed_sensitivity(c, config.sensitivity_mode) for c in clients]
    total = aggregate_profiles(profiles)
    n_layers = theta0.n_layers

    variances = np.zeros(n_layers)
    traces = np.zeros(n_layers)
    for c in clients:
        x, y = c.train.features[:limit], c.train.labels[:limit]
        _, grads = loss_and_gradients(c.network, x, y, kind)
        for k in range(n_layers):
            variances[k] += gradient_variance(grads.layer_vector(k))
            traces[k] += hessian_trace_hutchinson(c.network, x, y, kind, k, config.curves.probes, seed=seed)
    variances /= len(clients)
    traces /= len(clients)

    probe = np.vstack([c.test.features for c in partition.clients])[:limit]
    acts = [forward(c.network, probe)[0] for c in clients]
    cka = np.zeros(n_layers)
    pairs = list(itertools.combinations(range(len(clients)), 2))
    for k in range(n_layers):
        vals = []
        for i, j in pairs:
            try:
                vals.append(linear_cka(acts[i][k], acts[j][k]))
            except PlayerFLError:
                vals.append(float("nan"))
        cka[k] = float(np.mean(vals)) if vals else float("nan")

    counts = theta0.param_counts
    return [
        {
            "dataset": spec.name,
            "seed": seed,
            "layer": k + 1,
            "n_params": counts[k],
            "gradient_variance": variances[k],
            "gradient_variance_per_param": variances[k] / counts[k],
            "hessian_trace": traces[k],
            "cka_mean": cka[k],
            "sensitivity": total[k],
            "sensitivity_pct_of_first": _pct(total[k], total[0]),
        }
        for k in range(n_layers)
    ]


def compute_layer_curves(config: ExperimentConfig, bundle: ResultBundle | None = None, workers: int = 1) -> ResultBundle:
    bundle = bundle or ResultBundle(config)
    jobs = [(d, s) for d in range(len(config.datasets)) for s in config.seeds]
    try:
        for rows in _map_cells(_curve_cell, config, jobs, workers):
            bundle.curve_rows.extend(rows)
    except PlayerFLError as exc:
        if isinstance(exc, ExperimentError):
            raise
        raise ExperimentError(str(exc)) from exc
    return bundle


# -- serialization ----------------------------------------------------------

RESULT_COLUMNS = [
    "dataset", "algorithm", "seed", "client", "n_train", "best_round", "transition_point",
    "macro_f1", "accuracy", "test_loss", "last_macro_f1", "last_accuracy", "last_test_loss",
]
ROUND_COLUMNS = [
    "dataset", "algorithm", "seed", "round", "client", "phase", "train_loss", "val_loss",
    "val_accuracy", "val_macro_f1", "params_sent",
]
SENSITIVITY_COLUMNS = [
    "dataset", "seed", "client", "layer", "importance", "cumulative", "pct_of_first", "transition_point",
]
CURVE_COLUMNS = [
    "dataset", "seed", "layer", "n_params", "gradient_variance", "gradient_variance_per_param",
    "hessian_trace", "cka_mean", "sensitivity", "sensitivity_pct_of_first",
]


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    return str(value)


def _json_ready(obj):
    if isinstance(obj, dict):
        return {str(k): _json_ready(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_ready(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        return value if math.isfinite(value) else None
    return obj


def write_csv(path, rows, columns) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([format_value(row.get(c)) for c in columns])
    path = Path(path)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def _parse_cell(text: str):
    if text == "":
        return None
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def read_csv(path) -> list:
    """Read a file written by :func:`write_csv`, restoring ints and floats."""
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return [{k: _parse_cell(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def emit_results(bundle: ResultBundle, directory) -> list:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    files = [
        write_csv(out / "results.csv", bundle.results_rows, RESULT_COLUMNS),
        write_csv(out / "rounds.csv", bundle.round_rows, ROUND_COLUMNS),
        write_csv(out / "sensitivity.csv", bundle.sensitivity_rows, SENSITIVITY_COLUMNS),
    ]
    summary = out / "summary.json"
    summary.write_text(json.dumps(_json_ready(bundle.summary), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    files.append(summary)
    return files


def emit_layer_curves(bundle: ResultBundle, directory) -> list:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    return [write_csv(out / "layer_curves.csv", bundle.curve_rows, CURVE_COLUMNS)]
