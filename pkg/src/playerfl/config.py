"""Experiment configuration: a YAML mapping validated against a fixed schema.

Example::

    datasets:
      - name: skewed
        kind: synthetic
        classes: 3
        dim: 100
        samples_per_class: 833
    clients: 5
    alpha: 0.1
    architecture:
      hidden: [256, 256, 256]
    algorithms: [local, fedavg, fedprox, local_adaptation, fedbabu, player_fl, player_fl_random]
    rounds: 20
    learning_rate: 0.03
    batch_size: 128
    seeds: [0, 1, 2]

Unknown keys are rejected with the offending key and its line number.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .data import DEFAULT_FRACTIONS
from .exceptions import ConfigError
from .nn import ACTIVATIONS, LossKind
from .protocol import ALGORITHMS


@dataclass
class DatasetSpec:
    name: str
    kind: str = "synthetic"
    classes: int = 3
    dim: int = 100
    samples_per_class: int = 833
    class_separation: float = 2.0
    noise: float = 1.0
    path: str | None = None
    feature_columns: list | None = None
    label_column: str | None = None
    normalization: str = "zscore"


@dataclass
class CurveSettings:
    probes: int = 32
    max_samples: int = 256


@dataclass
class ExperimentConfig:
    datasets: list
    clients: int = 5
    alpha: float = 0.5
    fractions: tuple = DEFAULT_FRACTIONS
    hidden: list = field(default_factory=lambda: [256, 256, 256])
    activations: list | None = None
    algorithms: list = field(default_factory=lambda: list(ALGORITHMS))
    rounds: int = 20
    local_epochs: int = 1
    learning_rate: float = 0.03
    learning_rates: dict = field(default_factory=dict)
    batch_size: int = 128
    loss: str = "cross_entropy"
    focal_gamma: float = 2.0
    threshold: float = 10.0
    fedprox_mu: float = 0.01
    adaptation_epochs: int = 5
    babu_finetune_epochs: int = 5
    sensitivity_mode: str = "mean"
    sensitivity_weighting: str = "unweighted"
    weight_decay: float = 0.01
    seeds: list = field(default_factory=lambda: [0])
    output_dir: str = "results"
    curves: CurveSettings = field(default_factory=CurveSettings)
    base_dir: str = "."

    @property
    def loss_kind(self) -> LossKind:
        if self.loss == "cross_entropy":
            return LossKind.cross_entropy()
        return LossKind.focal(self.focal_gamma)

    def lr_for(self, algorithm: str) -> float:
        return float(self.learning_rates.get(algorithm, self.learning_rate))

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


_TOP_KEYS = {
    "datasets", "clients", "alpha", "fractions", "architecture", "algorithms", "rounds",
    "local_epochs", "learning_rate", "learning_rates", "batch_size", "loss", "focal_gamma",
    "threshold", "fedprox_mu", "adaptation_epochs", "babu_finetune_epochs", "sensitivity_mode",
    "sensitivity_weighting", "weight_decay", "seeds", "output_dir", "curves",
}
_DATASET_KEYS = {f.name for f in fields(DatasetSpec)}
_ARCH_KEYS = {"hidden", "activations"}
_CURVE_KEYS = {f.name for f in fields(CurveSettings)}


class _Lines:
    """Line lookup for mapping keys, built from the YAML node tree."""

    def __init__(self, node):
        self.node = node

    def key_line(self, path):
        node = self.node
        line = None
        for part in path:
            if isinstance(node, yaml.MappingNode):
                for k, v in node.value:
                    if k.value == part:
                        line = k.start_mark.line + 1
                        node = v
                        break
                else:
                    return line
            elif isinstance(node, yaml.SequenceNode) and isinstance(part, int) and part < len(node.value):
                node = node.value[part]
                line = node.start_mark.line + 1
            else:
                return line
        return line


def _fail(lines, path, message):
    key = ".".join(str(p) for p in path) if path else None
    raise ConfigError(message, key=key, line=lines.key_line(path) if path else None)


def _check_keys(lines, mapping, allowed, prefix):
    if not isinstance(mapping, dict):
        _fail(lines, prefix, "expected a mapping")
    for key in mapping:
        if key not in allowed:
            _fail(lines, prefix + [key], f"unknown key {key!r}")


def _number(lines, path, value, kind=float, low=None, low_inclusive=True, high=None):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        _fail(lines, path, f"expected a number, got {value!r}")
    if kind is int:
        if isinstance(value, float) and not value.is_integer():
            _fail(lines, path, f"expected an integer, got {value!r}")
        value = int(value)
    else:
        value = float(value)
    if low is not None and (value < low or (value == low and not low_inclusive)):
        op = ">=" if low_inclusive else ">"
        _fail(lines, path, f"must be {op} {low}, got {value!r}")
    if high is not None and value > high:
        _fail(lines, path, f"must be <= {high}, got {value!r}")
    return value


def _choice(lines, path, value, options):
    if value not in options:
        _fail(lines, path, f"must be one of {sorted(options)}, got {value!r}")
    return value


def _dataset(lines, i, raw) -> DatasetSpec:
    prefix = ["datasets", i]
    _check_keys(lines, raw, _DATASET_KEYS, prefix)
    if "name" not in raw:
        _fail(lines, prefix, "dataset entry needs a name")
    kind = _choice(lines, prefix + ["kind"], raw.get("kind", "synthetic"), {"synthetic", "csv"})
    spec = DatasetSpec(name=str(raw["name"]), kind=kind)
    if kind == "synthetic":
        spec.classes = _number(lines, prefix + ["classes"], raw.get("classes", spec.classes), int, 2)
        spec.dim = _number(lines, prefix + ["dim"], raw.get("dim", spec.dim), int, 1)
        spec.samples_per_class = _number(
            lines, prefix + ["samples_per_class"], raw.get("samples_per_class", spec.samples_per_class), int, 1
        )
        spec.class_separation = _number(
            lines, prefix + ["class_separation"], raw.get("class_separation", spec.class_separation), float, 0
        )
        spec.noise = _number(lines, prefix + ["noise"], raw.get("noise", spec.noise), float, 0, False)
    else:
        for key in ("path", "label_column"):
            if key not in raw:
                _fail(lines, prefix, f"csv dataset needs {key!r}")
        spec.path = str(raw["path"])
        spec.label_column = str(raw["label_column"])
        cols = raw.get("feature_columns")
        if cols is not None and (not isinstance(cols, list) or not cols):
            _fail(lines, prefix + ["feature_columns"], "expected a non-empty list of column names")
        spec.feature_columns = [str(c) for c in cols] if cols is not None else None
        spec.normalization = _choice(
            lines, prefix + ["normalization"], raw.get("normalization", "zscore"), {"zscore", "none"}
        )
    return spec


def config_from_mapping(raw, lines=None, base_dir=".") -> ExperimentConfig:
    lines = lines or _Lines(None)
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping")
    _check_keys(lines, raw, _TOP_KEYS, [])
    if "datasets" not in raw:
        raise ConfigError("missing required key", key="datasets")
    if not isinstance(raw["datasets"], list) or not raw["datasets"]:
        _fail(lines, ["datasets"], "expected a non-empty list")
    datasets = [_dataset(lines, i, d) for i, d in enumerate(raw["datasets"])]
    names = [d.name for d in datasets]
    if len(set(names)) != len(names):
        _fail(lines, ["datasets"], "dataset names must be unique")
    cfg = ExperimentConfig(datasets=datasets, base_dir=str(base_dir))

    cfg.clients = _number(lines, ["clients"], raw.get("clients", cfg.clients), int, 1)
    cfg.alpha = _number(lines, ["alpha"], raw.get("alpha", cfg.alpha), float, 0, False)
    fr = raw.get("fractions", list(cfg.fractions))
    if not isinstance(fr, list) or len(fr) != 3:
        _fail(lines, ["fractions"], "expected three fractions")
    fr = tuple(_number(lines, ["fractions"], f, float, 0, False) for f in fr)
    if abs(sum(fr) - 1.0) > 1e-9:
        _fail(lines, ["fractions"], "fractions must sum to 1")
    cfg.fractions = fr

    arch = raw.get("architecture", {})
    _check_keys(lines, arch, _ARCH_KEYS, ["architecture"])
    hidden = arch.get("hidden", cfg.hidden)
    if not isinstance(hidden, list):
        _fail(lines, ["architecture", "hidden"], "expected a list of layer widths")
    cfg.hidden = [_number(lines, ["architecture", "hidden"], h, int, 1) for h in hidden]
    acts = arch.get("activations")
    if acts is not None:
        if not isinstance(acts, list) or len(acts) != len(cfg.hidden) + 1:
            _fail(lines, ["architecture", "activations"], f"expected {len(cfg.hidden) + 1} activations")
        cfg.activations = [_choice(lines, ["architecture", "activations"], a, set(ACTIVATIONS)) for a in acts]

    algos = raw.get("algorithms", cfg.algorithms)
    if not isinstance(algos, list) or not algos:
        _fail(lines, ["algorithms"], "expected a non-empty list")
    for a in algos:
        _choice(lines, ["algorithms"], a, set(ALGORITHMS))
    if len(set(algos)) != len(algos):
        _fail(lines, ["algorithms"], "algorithms must be unique")
    cfg.algorithms = list(algos)

    cfg.rounds = _number(lines, ["rounds"], raw.get("rounds", cfg.rounds), int, 1)
    cfg.local_epochs = _number(lines, ["local_epochs"], raw.get("local_epochs", cfg.local_epochs), int, 1)
    cfg.learning_rate = _number(lines, ["learning_rate"], raw.get("learning_rate", cfg.learning_rate), float, 0)
    lrs = raw.get("learning_rates", {})
    _check_keys(lines, lrs, set(ALGORITHMS), ["learning_rates"])
    cfg.learning_rates = {k: _number(lines, ["learning_rates", k], v, float, 0) for k, v in lrs.items()}
    cfg.batch_size = _number(lines, ["batch_size"], raw.get("batch_size", cfg.batch_size), int, 1)
    cfg.loss = _choice(lines, ["loss"], raw.get("loss", cfg.loss), {"cross_entropy", "multiclass_focal"})
    cfg.focal_gamma = _number(lines, ["focal_gamma"], raw.get("focal_gamma", cfg.focal_gamma), float, 0)
    cfg.threshold = _number(lines, ["threshold"], raw.get("threshold", cfg.threshold), float, 1, False)
    cfg.fedprox_mu = _number(lines, ["fedprox_mu"], raw.get("fedprox_mu", cfg.fedprox_mu), float, 0)
    cfg.adaptation_epochs = _number(
        lines, ["adaptation_epochs"], raw.get("adaptation_epochs", cfg.adaptation_epochs), int, 0
    )
    cfg.babu_finetune_epochs = _number(
        lines, ["babu_finetune_epochs"], raw.get("babu_finetune_epochs", cfg.babu_finetune_epochs), int, 0
    )
    cfg.sensitivity_mode = _choice(
        lines, ["sensitivity_mode"], raw.get("sensitivity_mode", cfg.sensitivity_mode), {"mean", "last"}
    )
    cfg.sensitivity_weighting = _choice(
        lines,
        ["sensitivity_weighting"],
        raw.get("sensitivity_weighting", cfg.sensitivity_weighting),
        {"unweighted", "weighted"},
    )
    cfg.weight_decay = _number(lines, ["weight_decay"], raw.get("weight_decay", cfg.weight_decay), float, 0)
    seeds = raw.get("seeds", cfg.seeds)
    if not isinstance(seeds, list) or not seeds:
        _fail(lines, ["seeds"], "expected a non-empty list of seeds")
    cfg.seeds = [_number(lines, ["seeds"], s, int, 0) for s in seeds]
    out = raw.get("output_dir", cfg.output_dir)
    if not isinstance(out, str) or not out:
        _fail(lines, ["output_dir"], "expected a path string")
    cfg.output_dir = out
    curves = raw.get("curves", {})
    _check_keys(lines, curves, _CURVE_KEYS, ["curves"])
    cfg.curves = CurveSettings(
        probes=_number(lines, ["curves", "probes"], curves.get("probes", 32), int, 1),
        max_samples=_number(lines, ["curves", "max_samples"], curves.get("max_samples", 256), int, 2),
    )
    return cfg


def parse_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"malformed YAML: {exc}", line=mark.line + 1 if mark else None) from exc
    if raw is None:
        raise ConfigError("empty configuration")
    return config_from_mapping(raw, _Lines(node), base_dir=path.parent)
