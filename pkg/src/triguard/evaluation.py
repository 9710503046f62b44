"""Defense metrics, ROC sweeps, k selection, and the experiment runner.

The headline number for a defended system on an adversarial set is the mean
of the per-sample score: 1 when the bare classifier is still correct OR the
detector rejects the input, else 0. A detector that rejects everything
scores 1.0 here, which is why the false positive rate on benign data is
always reported next to it.
"""

from __future__ import annotations

import concurrent.futures
import csv
import datetime
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import attacks as atk
from .classifiers import (CartClassifier, Classifier, KnnClassifier,
                          MlpClassifier)
from .config import AttackConfig, ExperimentConfig, materialize
from .data import (Dataset, SplitSpec, apply_normalization, gen_blobs,
                   gen_xor, load_csv, minmax_normalize, stratified_split)
from .detector import (ChainedDetector, DecidabilityStage, ReliabilityStage,
                       fit_detector)
from .metrics import Metric


class ExperimentError(RuntimeError):
    """Failure inside the runner; `phase` names the pipeline step."""

    def __init__(self, phase: str, cause: BaseException | str):
        super().__init__(f"experiment failed during {phase}: {cause}")
        self.phase = phase


@dataclass
class DefenseScore:
    accuracy_on_adv: float
    fpr: float
    clean_accuracy: float
    per_stage_reject_counts: dict[int, int] = field(default_factory=dict)


@dataclass
class RocCurve:
    points: list[tuple[float, float, float]]  # (fpr, tpr, q), sorted by fpr
    auc: float
    degenerate: bool = False


# ---------------------------------------------------------------------------
# core metrics
# ---------------------------------------------------------------------------

def accuracy(classifier: Classifier, samples: np.ndarray,
             labels: np.ndarray) -> float:
    return float(np.mean(classifier.predict_batch(samples) == labels))


def detector_score(classifier: Classifier, detector: ChainedDetector,
                   samples: np.ndarray, true_labels: np.ndarray) -> float:
    """Mean of [classifier correct OR detector rejects] over the set."""
    return score_adversarial(classifier, detector, samples, true_labels)[0]


def score_adversarial(classifier: Classifier, detector: ChainedDetector,
                      samples: np.ndarray, true_labels: np.ndarray):
    """(score, per-stage reject counts) on an adversarial set.

    The detector always sees the classifier's prediction, never the true
    label; counts record the first firing stage per rejected sample.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise ValueError("adversarial set is empty")
    counts = {1: 0, 2: 0, 3: 0}
    hits = 0
    for x, y in zip(samples, true_labels):
        y_pred = classifier.predict(x)
        if y_pred == y:
            hits += 1
            continue
        verdict = detector.detect(x, y_pred)
        if not verdict.accepted:
            hits += 1
            counts[verdict.firing_stage] += 1
    return hits / samples.shape[0], counts


def evaluate_defense(classifier: Classifier, detector: ChainedDetector,
                     adv_samples: np.ndarray, adv_labels: np.ndarray,
                     benign_samples: np.ndarray,
                     benign_labels: np.ndarray) -> DefenseScore:
    """Joint scorecard: defended accuracy on the adversarial set, FPR and
    plain accuracy on the benign set, and first-firing-stage counts."""
    score, counts = score_adversarial(classifier, detector, adv_samples,
                                      adv_labels)
    benign_pred = classifier.predict_batch(benign_samples)
    return DefenseScore(
        accuracy_on_adv=score,
        fpr=false_positive_rate(detector, benign_samples, benign_pred),
        clean_accuracy=float(np.mean(benign_pred == benign_labels)),
        per_stage_reject_counts=counts)


def false_positive_rate(detector: ChainedDetector, samples: np.ndarray,
                        predicted_labels: np.ndarray) -> float:
    """Share of benign inputs the detector rejects."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise ValueError("benign set is empty")
    rejected = sum(detector.rejects(x, int(p))
                   for x, p in zip(samples, predicted_labels))
    return rejected / samples.shape[0]


def rejection_rate(checker, samples: np.ndarray, labels: np.ndarray) -> float:
    """Rejection fraction for a single stage or a chained detector."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.shape[0] == 0:
        raise ValueError("evaluation set is empty")
    if hasattr(checker, "detect"):
        rejected = sum(not checker.detect(x, int(c)).accepted
                       for x, c in zip(samples, labels))
    else:
        rejected = sum(not checker.accepts(x, int(c))
                       for x, c in zip(samples, labels))
    return rejected / samples.shape[0]


# ---------------------------------------------------------------------------
# hyperparameter sweeps
# ---------------------------------------------------------------------------

def roc_sweep(stage_fitter, benign: tuple[np.ndarray, np.ndarray],
              adversarial: tuple[np.ndarray, np.ndarray],
              q_grid) -> RocCurve:
    """Refit a stage at every quantile in q_grid and trace (FPR, TPR).

    `stage_fitter(q)` must return a fitted stage (or detector). AUC is the
    trapezoid rule over the fpr-sorted points with (0,0) and (1,1) anchors;
    a single-point sweep cannot support an area and is flagged degenerate
    with auc = nan.
    """
    if benign[0].shape[0] == 0 or adversarial[0].shape[0] == 0:
        raise ValueError("benign and adversarial sets must be non-empty")
    points = []
    for q in q_grid:
        if not 0.0 < q <= 1.0:
            raise ValueError(f"q grid values must be in (0, 1], got {q}")
        stage = stage_fitter(q)
        points.append((rejection_rate(stage, *benign),
                       rejection_rate(stage, *adversarial), float(q)))
    points.sort(key=lambda p: (p[0], p[1]))
    if len(points) < 2:
        return RocCurve(points=points, auc=float("nan"), degenerate=True)
    xs = [0.0] + [p[0] for p in points] + [1.0]
    ys = [0.0] + [p[1] for p in points] + [1.0]
    trapezoid = getattr(np, "trapezoid", None) or np.trapz  # numpy<2 fallback
    auc = float(trapezoid(ys, xs))
    return RocCurve(points=points, auc=auc)


@dataclass
class KSweepRow:
    k: int
    accuracy_on_adv: float
    fpr: float


@dataclass
class KSweepResult:
    rows: list[KSweepRow]
    selected_k: int


def sweep_k(stage_fitter, k_grid, classifier: Classifier,
            adv_samples: np.ndarray, adv_labels: np.ndarray,
            benign_samples: np.ndarray, fpr_slack: float = 0.01) -> KSweepResult:
    """Score a single stage across neighbor counts at a fixed quantile.

    `stage_fitter(k)` returns the fitted stage. Selection rule: the largest
    k whose FPR stays within `fpr_slack` of the smallest observed FPR.
    """
    benign_pred = classifier.predict_batch(benign_samples)
    rows = []
    for k in k_grid:
        stage = stage_fitter(int(k))
        detector = _single_stage_detector(stage)
        acc = detector_score(classifier, detector, adv_samples, adv_labels)
        fpr = false_positive_rate(detector, benign_samples, benign_pred)
        rows.append(KSweepRow(k=int(k), accuracy_on_adv=acc, fpr=fpr))
    min_fpr = min(row.fpr for row in rows)
    selected = max(row.k for row in rows if row.fpr <= min_fpr + fpr_slack)
    return KSweepResult(rows=rows, selected_k=selected)


def sweep_stage_k(stage_id: int, k_grid, train: Dataset, validation: Dataset,
                  classifier: Classifier, adv_samples: np.ndarray,
                  adv_labels: np.ndarray, benign_samples: np.ndarray,
                  q: float = 0.99, metric: Metric | None = None) -> KSweepResult:
    """Neighbor-count sweep for stage 2 or 3 at a fixed quantile.

    The 0.99 default keeps the sweep sensitive to FPR growth while staying
    nearly rejection-free on benign data.
    """
    metric = metric or Metric.L2
    if stage_id == 2:
        def fitter(k):
            return ReliabilityStage.fit(train, validation, k=k, q=q,
                                        metric=metric)
    elif stage_id == 3:
        def fitter(k):
            return DecidabilityStage.fit(train, validation, k=k, q=q,
                                         metric=metric)
    else:
        raise ValueError("k sweeps apply to stages 2 and 3 only")
    return sweep_k(fitter, k_grid, classifier, adv_samples, adv_labels,
                   benign_samples)


def _single_stage_detector(stage) -> ChainedDetector:
    slot = {1: "applicability", 2: "reliability", 3: "decidability"}[stage.stage_id]
    enabled = tuple(i == stage.stage_id for i in (1, 2, 3))
    return ChainedDetector(**{slot: stage}, enabled=enabled)


# ---------------------------------------------------------------------------
# experiment runner
# ---------------------------------------------------------------------------

@dataclass
class ExperimentReport:
    config: dict
    label_names: list[str] | None
    baseline: dict
    cells: list[dict]
    aggregates: list[dict]
    created_at: str

    def to_dict(self) -> dict:
        return {"config": self.config, "label_names": self.label_names,
                "baseline": self.baseline, "cells": self.cells,
                "aggregates": self.aggregates, "created_at": self.created_at}

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_csv(self, path):
        cols = ["dataset", "classifier", "attack", "norm", "epsilon", "seed",
                "clean_accuracy", "adv_accuracy_undefended",
                "adv_accuracy_defended", "fpr", "stage1_rejects",
                "stage2_rejects", "stage3_rejects"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            writer.writeheader()
            for cell in self.cells:
                writer.writerow(cell)


def build_dataset(cfg) -> Dataset:
    if cfg.kind == "csv":
        return load_csv(cfg.path, cfg.label_column, cfg.has_header)
    if cfg.kind == "xor":
        return gen_xor(cfg.n_per_quadrant, cfg.noise_sd, cfg.seed)
    return gen_blobs(cfg.n_per_class, cfg.centers, cfg.sd, cfg.seed)


def build_classifier(cfg, train: Dataset, seed: int) -> Classifier:
    if cfg.kind == "mlp":
        layers = [train.feature_dim] + list(cfg.hidden_layers) + [train.class_count]
        return MlpClassifier.fit(train, layers, epochs=cfg.epochs,
                                 lr=cfg.learning_rate, seed=seed,
                                 batch_size=cfg.batch_size)
    if cfg.kind == "cart":
        return CartClassifier.fit(train, max_depth=cfg.max_depth,
                                  min_leaf=cfg.min_leaf, seed=seed)
    return KnnClassifier(train, cfg.k)


def generate_attack(attack_cfg: AttackConfig, epsilon: float | None,
                    classifier: Classifier, split: Dataset, train: Dataset,
                    seed: int) -> list[atk.AttackResult]:
    budget = atk.AttackBudget(epsilon=epsilon if epsilon is not None else 0.0,
                              norm=attack_cfg.norm,
                              max_iter=attack_cfg.max_iter,
                              step_size=attack_cfg.step_size,
                              seed=seed,
                              overshoot=attack_cfg.overshoot)
    X, y = split.samples, split.labels
    name = attack_cfg.name
    if name == "fgsm":
        return atk.attack_batch(atk.fgsm, classifier, X, y, budget)
    if name == "pgd":
        return atk.attack_batch(atk.pgd, classifier, X, y, budget)
    if name == "deepfool":
        return atk.attack_batch(atk.deepfool, classifier, X, y, budget)
    if name == "boundary":
        results = []
        for i, (x, yi) in enumerate(zip(X, y)):
            per_input = replace(budget, seed=budget.seed ^ i)
            try:
                start = atk.find_adversarial_seed(classifier, x, int(yi),
                                                  train.samples)
            except atk.NoAdversarialSeedError:
                results.append(atk.AttackResult(
                    x_adv=np.clip(x, 0.0, 1.0), success=False,
                    perturbation_norm=0.0, iterations_used=0))
                continue
            results.append(atk.boundary_attack(classifier, x, int(yi), start,
                                               per_input))
        return results
    if name == "tree":
        if not isinstance(classifier, CartClassifier):
            raise ValueError("the tree attack requires a cart classifier")
        return [atk.decision_tree_attack(classifier, x) for x in X]
    raise ValueError(f"unknown attack {name!r}")


def attack_cells(attack_cfg: AttackConfig):
    if attack_cfg.name in ("fgsm", "pgd"):
        return [(attack_cfg, eps) for eps in attack_cfg.epsilons]
    return [(attack_cfg, None)]  # minimum-perturbation attacks have no budget


def _run_seed(config: ExperimentConfig, dataset: Dataset, seed: int) -> dict:
    def phase(name, fn):
        try:
            return fn()
        except ExperimentError:
            raise
        except Exception as exc:
            raise ExperimentError(name, exc) from exc

    def split_and_normalize():
        spec = SplitSpec(config.split.train_fraction,
                         config.split.validation_fraction, seed=seed)
        train, val, test = stratified_split(dataset, spec)
        if config.normalize:
            train = minmax_normalize(train)
            val = apply_normalization(val, train.norm)
            test = apply_normalization(test, train.norm)
        return train, val, test

    train, val, test = phase("split", split_and_normalize)
    classifier = phase("train-classifier",
                       lambda: build_classifier(config.classifier, train, seed))
    detector = phase("fit-detector",
                     lambda: fit_detector(train, val,
                                          config.detector_settings(seed)))
    clean_acc = phase("evaluate-clean",
                      lambda: accuracy(classifier, test.samples, test.labels))
    benign_pred = classifier.predict_batch(test.samples)
    fpr = phase("evaluate-fpr",
                lambda: false_positive_rate(detector, test.samples, benign_pred))

    dataset_name = config.dataset.kind if config.dataset.path is None \
        else config.dataset.path
    cells = []
    for attack_cfg, eps in [c for a in config.attacks for c in attack_cells(a)]:
        tag = f"attack[{attack_cfg.name}, eps={eps}]"
        test_results = phase(tag, lambda: generate_attack(
            attack_cfg, eps, classifier, test, train, seed))
        val_results = phase(tag + " (validation)", lambda: generate_attack(
            attack_cfg, eps, classifier, val, train, seed + 104729))
        adv_X = np.array([r.x_adv for r in test_results])
        adv_acc = accuracy(classifier, adv_X, test.labels)
        defended, stage_counts = score_adversarial(
            classifier, detector, adv_X, test.labels)
        # detection rate counts only candidates that actually fool the model
        val_hits, val_total = 0, 0
        for r, y_true in zip(val_results, val.labels):
            if not r.success:
                continue
            val_total += 1
            if detector.rejects(r.x_adv, classifier.predict(r.x_adv)):
                val_hits += 1
        cells.append({
            "dataset": dataset_name,
            "classifier": config.classifier.kind,
            "attack": attack_cfg.name,
            "norm": attack_cfg.norm,
            "epsilon": eps,
            "seed": seed,
            "clean_accuracy": clean_acc,
            "adv_accuracy_undefended": adv_acc,
            "adv_accuracy_defended": defended,
            "fpr": fpr,
            "stage1_rejects": stage_counts[1],
            "stage2_rejects": stage_counts[2],
            "stage3_rejects": stage_counts[3],
            "attack_success_count": int(sum(r.success for r in test_results)),
            "attack_sample_count": len(test_results),
            "validation_detection_rate":
                (val_hits / val_total) if val_total else None,
        })
    return {"seed": seed, "clean_accuracy": clean_acc, "fpr": fpr,
            "cells": cells}


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentReport:
    """Full pipeline over every configured seed; metrics are aggregated as
    mean and standard deviation per (attack, norm, epsilon) cell."""
    try:
        dataset = build_dataset(config.dataset)
    except ExperimentError:
        raise
    except Exception as exc:
        raise ExperimentError("load-dataset", exc) from exc

    if workers > 1 and len(config.seeds) > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            seed_runs = list(pool.map(
                lambda s: _run_seed(config, dataset, s), config.seeds))
    else:
        seed_runs = [_run_seed(config, dataset, s) for s in config.seeds]

    baseline = {
        "per_seed": [{"seed": run["seed"],
                      "clean_accuracy": run["clean_accuracy"],
                      "fpr": run["fpr"]} for run in seed_runs],
        "clean_accuracy_mean": _mean([r["clean_accuracy"] for r in seed_runs]),
        "clean_accuracy_sd": _sd([r["clean_accuracy"] for r in seed_runs]),
        "fpr_mean": _mean([r["fpr"] for r in seed_runs]),
        "fpr_sd": _sd([r["fpr"] for r in seed_runs]),
    }
    cells = [cell for run in seed_runs for cell in run["cells"]]

    aggregates = []
    keys = []
    for cell in cells:
        key = (cell["attack"], cell["norm"], cell["epsilon"])
        if key not in keys:
            keys.append(key)
    metrics = ("clean_accuracy", "adv_accuracy_undefended",
               "adv_accuracy_defended", "fpr")
    for key in keys:
        group = [c for c in cells
                 if (c["attack"], c["norm"], c["epsilon"]) == key]
        entry = {"attack": key[0], "norm": key[1], "epsilon": key[2],
                 "seeds": len(group)}
        for m in metrics:
            vals = [c[m] for c in group]
            entry[f"{m}_mean"] = _mean(vals)
            entry[f"{m}_sd"] = _sd(vals)
        aggregates.append(entry)

    return ExperimentReport(
        config=materialize(config),
        label_names=dataset.label_names,
        baseline=baseline,
        cells=cells,
        aggregates=aggregates,
        created_at=datetime.datetime.now(datetime.timezone.utc).isoformat(),
    )


def _mean(values) -> float:
    return float(np.mean(values))


def _sd(values) -> float:
    return float(np.std(values))  # population sd: exactly 0.0 for one seed
