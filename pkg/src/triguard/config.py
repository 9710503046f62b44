"""Experiment configuration: strict JSON schema with materialized defaults.

Unknown keys are rejected so typos cannot silently fall back to defaults;
defaults that do apply are expanded into the written report, making every
run self-describing.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .detector import DEFAULT_K_DECIDABILITY, DEFAULT_K_RELIABILITY, DetectorSettings
from .metrics import Metric

KNOWN_ATTACKS = ("fgsm", "pgd", "deepfool", "boundary", "tree")
GRADIENT_ATTACKS = ("fgsm", "pgd", "deepfool")


class ConfigError(ValueError):
    """Invalid configuration; `key` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


def _take(section: dict, context: str, known: dict):
    """Pop every known key (with default and validator); reject leftovers."""
    out = {}
    section = dict(section)
    for key, (default, check) in known.items():
        value = section.pop(key, default)
        if value is _REQUIRED:
            raise ConfigError(f"{context}.{key}", "missing required key")
        if check is not None and value is not None:
            value = check(f"{context}.{key}", value)
        out[key] = value
    for leftover in section:
        raise ConfigError(f"{context}.{leftover}", "unknown key")
    return out


_REQUIRED = object()


def _number(lo=None, hi=None, lo_open=False, hi_open=False, integer=False):
    def check(key, value):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        if integer and int(value) != value:
            raise ConfigError(key, f"expected an integer, got {value!r}")
        if lo is not None and (value <= lo if lo_open else value < lo):
            raise ConfigError(key, f"value {value} below allowed range")
        if hi is not None and (value >= hi if hi_open else value > hi):
            raise ConfigError(key, f"value {value} above allowed range")
        return int(value) if integer else float(value)
    return check


def _string(options=None):
    def check(key, value):
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        if options and value not in options:
            raise ConfigError(key, f"expected one of {options}, got {value!r}")
        return value
    return check


def _bool(key, value):
    if not isinstance(value, bool):
        raise ConfigError(key, f"expected true/false, got {value!r}")
    return value


_quantile = _number(lo=0.0, hi=1.0, lo_open=True)
_fraction = _number(lo=0.0, hi=1.0, lo_open=True, hi_open=True)
_count = _number(lo=1, integer=True)
_seed = _number(lo=0, integer=True)


@dataclass
class DatasetConfig:
    kind: str
    path: str | None = None
    label_column: object = None
    has_header: bool = True
    n_per_quadrant: int = 250
    n_per_class: int = 200
    centers: list = field(default_factory=lambda: [[0.0, 0.0], [4.0, 4.0]])
    noise_sd: float = 0.3
    sd: float = 0.5
    seed: int = 0


@dataclass
class ClassifierConfig:
    kind: str
    hidden_layers: list[int] = field(default_factory=lambda: [32])
    epochs: int = 200
    learning_rate: float = 0.1
    batch_size: int = 32
    max_depth: int = 8
    min_leaf: int = 1
    k: int = 5


@dataclass
class AttackConfig:
    name: str
    norm: str = "linf"
    epsilons: list[float] = field(default_factory=list)
    max_iter: int = 100
    step_size: float | None = None
    overshoot: float = 0.02


@dataclass
class SplitConfig:
    train_fraction: float = 0.6
    validation_fraction: float = 0.2


@dataclass
class GridConfig:
    enabled: bool | None = None      # None: emit whenever features are 2-D
    resolution: int = 50
    bounds: list[float] | None = None  # [x_lo, x_hi, y_lo, y_hi]; None: auto


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig
    classifier: ClassifierConfig
    detector: DetectorSettings
    attacks: list[AttackConfig]
    split: SplitConfig
    seeds: list[int]
    normalize: bool = True
    grid: GridConfig = field(default_factory=GridConfig)

    def detector_settings(self, seed: int) -> DetectorSettings:
        from dataclasses import replace
        return replace(self.detector, seed=seed)


def parse_config(payload: dict) -> ExperimentConfig:
    if not isinstance(payload, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    top = _take(payload, "config", {
        "dataset": (_REQUIRED, None),
        "classifier": (_REQUIRED, None),
        "detector": ({}, None),
        "attacks": ([], None),
        "split": ({}, None),
        "seeds": ([0], None),
        "normalize": (True, _bool),
        "grid": ({}, None),
    })

    ds = _parse_dataset(top["dataset"])
    clf = _parse_classifier(top["classifier"])
    det = _parse_detector(top["detector"])
    if not isinstance(top["attacks"], list):
        raise ConfigError("config.attacks", "expected a list")
    attacks = [_parse_attack(a, i) for i, a in enumerate(top["attacks"])]
    split = _parse_split(top["split"])
    seeds = top["seeds"]
    if (not isinstance(seeds, list) or not seeds
            or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0
                       for s in seeds)):
        raise ConfigError("config.seeds", "expected a non-empty list of "
                                          "non-negative integers")
    return ExperimentConfig(dataset=ds, classifier=clf, detector=det,
                            attacks=attacks, split=split, seeds=list(seeds),
                            normalize=top["normalize"],
                            grid=_parse_grid(top["grid"]))


def _parse_grid(section) -> GridConfig:
    if not isinstance(section, dict):
        raise ConfigError("config.grid", "expected an object")
    out = _take(section, "config.grid", {
        "enabled": (None, None),
        "resolution": (50, _count),
        "bounds": (None, None),
    })
    if out["enabled"] is not None and not isinstance(out["enabled"], bool):
        raise ConfigError("config.grid.enabled", "expected true/false")
    bounds = out["bounds"]
    if bounds is not None:
        if (not isinstance(bounds, list) or len(bounds) != 4
                or any(isinstance(b, bool) or not isinstance(b, (int, float))
                       for b in bounds)
                or bounds[0] >= bounds[1] or bounds[2] >= bounds[3]):
            raise ConfigError("config.grid.bounds",
                              "expected [x_lo, x_hi, y_lo, y_hi] with "
                              "lo < hi on both axes")
        out["bounds"] = [float(b) for b in bounds]
    return GridConfig(**out)


def _parse_dataset(section) -> DatasetConfig:
    if not isinstance(section, dict):
        raise ConfigError("config.dataset", "expected an object")
    kind = section.get("kind")
    if kind == "csv":
        out = _take(section, "config.dataset", {
            "kind": (_REQUIRED, _string(("csv",))),
            "path": (_REQUIRED, _string()),
            "label_column": (_REQUIRED, None),
            "has_header": (True, _bool),
        })
        if not isinstance(out["label_column"], (str, int)):
            raise ConfigError("config.dataset.label_column",
                              "expected a column name or index")
        return DatasetConfig(**out)
    if kind == "xor":
        out = _take(section, "config.dataset", {
            "kind": (_REQUIRED, _string(("xor",))),
            "n_per_quadrant": (250, _count),
            "noise_sd": (0.3, _number(lo=0.0)),
            "seed": (0, _seed),
        })
        return DatasetConfig(**out)
    if kind == "blobs":
        out = _take(section, "config.dataset", {
            "kind": (_REQUIRED, _string(("blobs",))),
            "n_per_class": (200, _count),
            "centers": ([[0.0, 0.0], [4.0, 4.0]], None),
            "sd": (0.5, _number(lo=0.0, lo_open=True)),
            "seed": (0, _seed),
        })
        return DatasetConfig(**out)
    raise ConfigError("config.dataset.kind",
                      f"expected 'csv', 'xor' or 'blobs', got {kind!r}")


def _parse_classifier(section) -> ClassifierConfig:
    if not isinstance(section, dict):
        raise ConfigError("config.classifier", "expected an object")
    kind = section.get("kind")
    if kind == "mlp":
        out = _take(section, "config.classifier", {
            "kind": (_REQUIRED, _string(("mlp",))),
            "hidden_layers": ([32], None),
            "epochs": (200, _number(lo=0, integer=True)),
            "learning_rate": (0.1, _number(lo=0.0, lo_open=True)),
            "batch_size": (32, _count),
        })
        hl = out["hidden_layers"]
        if (not isinstance(hl, list)
                or not all(isinstance(h, int) and h >= 1 for h in hl)):
            raise ConfigError("config.classifier.hidden_layers",
                              "expected a list of positive integers")
        return ClassifierConfig(**out)
    if kind == "cart":
        out = _take(section, "config.classifier", {
            "kind": (_REQUIRED, _string(("cart",))),
            "max_depth": (8, _count),
            "min_leaf": (1, _count),
        })
        return ClassifierConfig(**out)
    if kind == "knn":
        out = _take(section, "config.classifier", {
            "kind": (_REQUIRED, _string(("knn",))),
            "k": (5, _count),
        })
        return ClassifierConfig(**out)
    raise ConfigError("config.classifier.kind",
                      f"expected 'mlp', 'cart' or 'knn', got {kind!r}")


def _parse_detector(section) -> DetectorSettings:
    if not isinstance(section, dict):
        raise ConfigError("config.detector", "expected an object")
    out = _take(section, "config.detector", {
        "k2": (DEFAULT_K_RELIABILITY, _count),
        "k3": (DEFAULT_K_DECIDABILITY, _count),
        "q1": (1.0, _quantile),
        "q2": (1.0, _quantile),
        "q3": (1.0, _quantile),
        "metric": ("l2", _string(("l1", "l2", "cosine"))),
        "stages": ([1, 2, 3], None),
        "noise_sd": (0.0, _number(lo=0.0)),
    })
    stages = out["stages"]
    if (not isinstance(stages, list) or not stages
            or any(s not in (1, 2, 3) for s in stages)):
        raise ConfigError("config.detector.stages",
                          "expected a non-empty subset of [1, 2, 3]")
    return DetectorSettings(k_reliability=out["k2"], k_decidability=out["k3"],
                            q_applicability=out["q1"], q_reliability=out["q2"],
                            q_decidability=out["q3"],
                            metric=Metric.from_name(out["metric"]),
                            noise_sd=out["noise_sd"],
                            stages=tuple(sorted(set(stages))))


def _parse_attack(section, index: int) -> AttackConfig:
    context = f"config.attacks[{index}]"
    if not isinstance(section, dict):
        raise ConfigError(context, "expected an object")
    out = _take(section, context, {
        "name": (_REQUIRED, _string(KNOWN_ATTACKS)),
        "norm": ("linf", _string(("linf", "l2"))),
        "epsilons": ([], None),
        "max_iter": (100, _count),
        "step_size": (None, _number(lo=0.0, lo_open=True)),
        "overshoot": (0.02, _number(lo=0.0)),
    })
    eps = out["epsilons"]
    if not isinstance(eps, list) or any(
            isinstance(e, bool) or not isinstance(e, (int, float)) or e < 0
            for e in eps):
        raise ConfigError(f"{context}.epsilons",
                          "expected a list of non-negative numbers")
    if out["name"] in ("fgsm", "pgd") and not eps:
        raise ConfigError(f"{context}.epsilons",
                          f"{out['name']} requires at least one epsilon")
    if out["name"] == "fgsm" and out["norm"] != "linf":
        raise ConfigError(f"{context}.norm", "fgsm only supports 'linf'")
    out["epsilons"] = [float(e) for e in eps]
    return AttackConfig(**out)


def _parse_split(section) -> SplitConfig:
    if not isinstance(section, dict):
        raise ConfigError("config.split", "expected an object")
    out = _take(section, "config.split", {
        "train_fraction": (0.6, _fraction),
        "validation_fraction": (0.2, _fraction),
    })
    if out["train_fraction"] + out["validation_fraction"] >= 1.0:
        raise ConfigError("config.split",
                          "train_fraction + validation_fraction must be < 1")
    return SplitConfig(**out)


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"not valid JSON: {exc}") from exc
    return parse_config(payload)


def materialize(config: ExperimentConfig) -> dict:
    """Fully-expanded configuration (every default filled in) for reports."""
    ds = config.dataset
    if ds.kind == "csv":
        dataset = {"kind": "csv", "path": ds.path,
                   "label_column": ds.label_column, "has_header": ds.has_header}
    elif ds.kind == "xor":
        dataset = {"kind": "xor", "n_per_quadrant": ds.n_per_quadrant,
                   "noise_sd": ds.noise_sd, "seed": ds.seed}
    else:
        dataset = {"kind": "blobs", "n_per_class": ds.n_per_class,
                   "centers": ds.centers, "sd": ds.sd, "seed": ds.seed}
    clf = config.classifier
    if clf.kind == "mlp":
        classifier = {"kind": "mlp", "hidden_layers": clf.hidden_layers,
                      "epochs": clf.epochs, "learning_rate": clf.learning_rate,
                      "batch_size": clf.batch_size}
    elif clf.kind == "cart":
        classifier = {"kind": "cart", "max_depth": clf.max_depth,
                      "min_leaf": clf.min_leaf}
    else:
        classifier = {"kind": "knn", "k": clf.k}
    det = config.detector
    return {
        "dataset": dataset,
        "classifier": classifier,
        "detector": {"k2": det.k_reliability, "k3": det.k_decidability,
                     "q1": det.q_applicability, "q2": det.q_reliability,
                     "q3": det.q_decidability, "metric": det.metric.value,
                     "stages": list(det.stages), "noise_sd": det.noise_sd},
        "attacks": [{"name": a.name, "norm": a.norm, "epsilons": a.epsilons,
                     "max_iter": a.max_iter, "step_size": a.step_size,
                     "overshoot": a.overshoot} for a in config.attacks],
        "split": {"train_fraction": config.split.train_fraction,
                  "validation_fraction": config.split.validation_fraction},
        "seeds": config.seeds,
        "normalize": config.normalize,
        "grid": {"enabled": config.grid.enabled,
                 "resolution": config.grid.resolution,
                 "bounds": config.grid.bounds},
    }
