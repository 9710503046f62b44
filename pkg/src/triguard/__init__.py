"""Chained three-stage rejection of adversarial inputs, with the
classifiers, attacks, and evaluation harness needed to calibrate it."""

from .attacks import (AttackBudget, AttackResult, boundary_attack,
                      decision_tree_attack, deepfool, fgsm,
                      find_adversarial_seed, pgd)
from .balltree import BallTree
from .classifiers import (CartClassifier, Classifier, KnnClassifier,
                          MlpClassifier, knn_predict, load_classifier,
                          save_classifier)
from .data import (Dataset, SplitSpec, apply_normalization, denormalize,
                   gen_blobs, gen_xor, load_csv, minmax_normalize,
                   stratified_split)
from .detector import (ApplicabilityStage, ChainedDetector, DecidabilityStage,
                       Detection, DetectorSettings, ReliabilityStage,
                       fit_detector, load_detector, reject_region_grid,
                       save_detector)
from .evaluation import (DefenseScore, RocCurve, detector_score,
                         evaluate_defense, false_positive_rate, roc_sweep,
                         run_experiment, sweep_k, sweep_stage_k)
from .metrics import Metric

__version__ = "0.1.0"

__all__ = [
    "AttackBudget", "AttackResult", "ApplicabilityStage", "BallTree",
    "CartClassifier", "ChainedDetector", "Classifier", "Dataset",
    "DecidabilityStage", "DefenseScore", "Detection", "DetectorSettings",
    "KnnClassifier", "Metric", "MlpClassifier", "ReliabilityStage",
    "RocCurve", "SplitSpec", "apply_normalization", "boundary_attack",
    "decision_tree_attack", "deepfool", "denormalize", "detector_score",
    "evaluate_defense", "false_positive_rate", "fgsm",
    "find_adversarial_seed", "fit_detector", "gen_blobs", "gen_xor",
    "knn_predict", "load_classifier", "load_csv", "load_detector",
    "minmax_normalize", "pgd", "reject_region_grid", "roc_sweep",
    "run_experiment", "save_classifier", "save_detector", "stratified_split",
    "sweep_k", "sweep_stage_k",
]
