"""Command-line surface.

Subcommands hand off through files so partial pipelines can be scripted:

  run           full experiment -> report.json + report.csv
  train         train the configured classifier -> classifier.json + preprocessing.json
  attack        generate adversarial CSVs against a saved classifier
  fit-detector  fit the detection chain -> detector.json
  detect        stream verdicts for an input CSV through saved artifacts
  grid          2-D rejection-region rasters -> CSV files

stdout carries machine-parseable output only; diagnostics and progress go
to stderr. Exit codes: 0 success, 2 invalid configuration, 1 runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from .classifiers import load_classifier, save_classifier
from .config import ConfigError, load_config
from .data import SplitSpec, apply_normalization, minmax_normalize, \
    normalize_vector, stratified_split
from .detector import fit_detector, load_detector, reject_region_grid, \
    save_detector
from .evaluation import ExperimentError, attack_cells, build_classifier, \
    build_dataset, generate_attack, run_experiment
from . import attacks as atk


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(args, f"invalid configuration: {exc}")
        return 2
    except ExperimentError as exc:
        _err(args, str(exc))
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        _err(args, f"error: {exc}")
        return 1


def _err(args, message: str):
    print(message, file=sys.stderr)


def _info(args, message: str):
    if not getattr(args, "quiet", False):
        print(message, file=sys.stderr)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="triguard",
        description="Train, attack, and defend classifiers with a chained "
                    "three-stage input detector.")
    parser.set_defaults(command=None)
    sub = parser.add_subparsers(dest="command")

    def common(p, out=True):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed list with one seed")
        p.add_argument("--quiet", action="store_true",
                       help="suppress progress output on stderr")

    p_run = sub.add_parser("run", help="run the full experiment")
    common(p_run)
    p_run.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                       help="parallel seed evaluations (default: core count)")
    p_run.set_defaults(func=cmd_run)

    p_train = sub.add_parser("train", help="train and save the classifier")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_attack = sub.add_parser("attack", help="write adversarial example CSVs")
    common(p_attack)
    p_attack.add_argument("--classifier", required=True,
                          help="trained classifier JSON from `train`")
    p_attack.set_defaults(func=cmd_attack)

    p_fit = sub.add_parser("fit-detector", help="fit and save the detector")
    common(p_fit)
    p_fit.set_defaults(func=cmd_fit_detector)

    p_detect = sub.add_parser("detect", help="stream verdicts for a CSV")
    p_detect.add_argument("--detector", required=True)
    p_detect.add_argument("--classifier", required=True)
    p_detect.add_argument("--input", required=True,
                          help="CSV of feature rows (no label column)")
    p_detect.add_argument("--preprocessing", default=None,
                          help="preprocessing JSON from `train` to normalize "
                               "raw inputs; omit if inputs are already in "
                               "model units")
    p_detect.add_argument("--quiet", action="store_true")
    p_detect.set_defaults(func=cmd_detect)

    p_grid = sub.add_parser("grid", help="2-D rejection-region rasters")
    common(p_grid)
    p_grid.add_argument("--bounds", default="-2,2,-2,2",
                        help="x_lo,x_hi,y_lo,y_hi (default -2,2,-2,2)")
    p_grid.add_argument("--resolution", type=int, default=100)
    p_grid.set_defaults(func=cmd_grid)
    return parser


def _prepare_out(path: str):
    if os.path.exists(path) and os.listdir(path):
        raise RuntimeError(f"output directory {path!r} already exists and is "
                           f"not empty; refusing to overwrite")
    os.makedirs(path, exist_ok=True)


def _load_config(args):
    config = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed", "must be non-negative")
        config.seeds = [args.seed]
    return config


def _pipeline_pieces(config, seed: int):
    """Dataset, splits, and normalization exactly as the runner builds them."""
    dataset = build_dataset(config.dataset)
    spec = SplitSpec(config.split.train_fraction,
                     config.split.validation_fraction, seed=seed)
    train, val, test = stratified_split(dataset, spec)
    if config.normalize:
        train = minmax_normalize(train)
        val = apply_normalization(val, train.norm)
        test = apply_normalization(test, train.norm)
    return dataset, train, val, test


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_run(args) -> int:
    config = _load_config(args)
    _prepare_out(args.out)
    _info(args, f"running {len(config.seeds)} seed(s) with "
                f"{args.workers} worker(s)")
    report = run_experiment(config, workers=max(1, args.workers))
    json_path = os.path.join(args.out, "report.json")
    csv_path = os.path.join(args.out, "report.csv")
    report.write_json(json_path)
    report.write_csv(csv_path)
    _info(args, f"wrote {json_path} and {csv_path}")
    _emit_run_grids(args, config)
    print(json_path)
    return 0


def _emit_run_grids(args, config):
    """Rejection-region rasters for the first seed, on 2-D data."""
    dataset, train, val, _ = _pipeline_pieces(config, config.seeds[0])
    enabled = config.grid.enabled
    if enabled is None:
        enabled = dataset.feature_dim == 2
    if not enabled:
        return
    classifier = build_classifier(config.classifier, train, config.seeds[0])
    detector = fit_detector(train, val, config.detector_settings(config.seeds[0]))
    if config.grid.bounds is not None:
        x_lo, x_hi, y_lo, y_hi = config.grid.bounds
    else:
        pool = train.samples
        lo, hi = pool.min(axis=0), pool.max(axis=0)
        pad = 0.1 * (hi - lo)
        (x_lo, y_lo), (x_hi, y_hi) = lo - pad, hi + pad
    grids = reject_region_grid(detector, classifier,
                               ((x_lo, x_hi), (y_lo, y_hi)),
                               config.grid.resolution)
    for path in write_region_grids(grids, args.out):
        _info(args, f"wrote {path}")


def cmd_train(args) -> int:
    config = _load_config(args)
    _prepare_out(args.out)
    seed = config.seeds[0]
    _, train, _, _ = _pipeline_pieces(config, seed)
    classifier = build_classifier(config.classifier, train, seed)
    clf_path = os.path.join(args.out, "classifier.json")
    save_classifier(clf_path, classifier)
    pre_path = os.path.join(args.out, "preprocessing.json")
    with open(pre_path, "w", encoding="utf-8") as fh:
        json.dump({"format": "triguard.preprocessing/1",
                   "norm": train.norm.tolist() if train.norm is not None else None,
                   "label_names": train.label_names}, fh)
    _info(args, f"wrote {clf_path} and {pre_path}")
    print(clf_path)
    return 0


def cmd_attack(args) -> int:
    config = _load_config(args)
    _prepare_out(args.out)
    seed = config.seeds[0]
    classifier = load_classifier(args.classifier)
    _, train, _, test = _pipeline_pieces(config, seed)
    if not config.attacks:
        raise RuntimeError("config declares no attacks")
    written = []
    for base_cfg in config.attacks:
        for attack_cfg, eps in attack_cells(base_cfg):
            results = generate_attack(attack_cfg, eps, classifier, test,
                                      train, seed)
            eps_tag = "none" if eps is None else f"{eps:g}"
            name = f"adv_{attack_cfg.name}_{attack_cfg.norm}_eps{eps_tag}.csv"
            path = os.path.join(args.out, name)
            atk.write_adversarial_csv(path, np.arange(test.n_samples),
                                      test.labels, results)
            written.append(path)
            _info(args, f"wrote {path}")
    for path in written:
        print(path)
    return 0


def cmd_fit_detector(args) -> int:
    config = _load_config(args)
    _prepare_out(args.out)
    seed = config.seeds[0]
    _, train, val, _ = _pipeline_pieces(config, seed)
    detector = fit_detector(train, val, config.detector_settings(seed))
    path = os.path.join(args.out, "detector.json")
    save_detector(path, detector)
    _info(args, f"wrote {path}")
    print(path)
    return 0


def cmd_detect(args) -> int:
    detector = load_detector(args.detector)
    classifier = load_classifier(args.classifier)
    norm = None
    if args.preprocessing:
        with open(args.preprocessing, encoding="utf-8") as fh:
            blob = json.load(fh)
        if blob.get("norm") is not None:
            norm = np.array(blob["norm"], dtype=np.float64)

    rows = _read_feature_rows(args.input)
    expected_dim = detector.train_samples.shape[1]
    writer = csv.writer(sys.stdout)
    writer.writerow(["index", "predicted", "verdict", "stage"])
    counts = {"accept": 0, "reject": 0}
    for i, x in enumerate(rows):
        if x.shape[0] != expected_dim:
            raise RuntimeError(f"input row {i} has {x.shape[0]} features; "
                               f"detector expects {expected_dim}")
        if norm is not None:
            x = normalize_vector(x, norm)
        predicted = classifier.predict(x)
        verdict = detector.detect(x, predicted)
        word = "accept" if verdict.accepted else "reject"
        counts[word] += 1
        stage = "" if verdict.firing_stage is None else verdict.firing_stage
        writer.writerow([i, predicted, word, stage])
    print(f"processed {len(rows)} row(s): {counts['accept']} accepted, "
          f"{counts['reject']} rejected", file=sys.stderr)
    return 0


def cmd_grid(args) -> int:
    config = _load_config(args)
    _prepare_out(args.out)
    seed = config.seeds[0]
    _, train, val, _ = _pipeline_pieces(config, seed)
    classifier = build_classifier(config.classifier, train, seed)
    detector = fit_detector(train, val, config.detector_settings(seed))
    try:
        x_lo, x_hi, y_lo, y_hi = (float(v) for v in args.bounds.split(","))
    except ValueError:
        raise ConfigError("bounds", "expected x_lo,x_hi,y_lo,y_hi") from None
    grids = reject_region_grid(detector, classifier,
                               ((x_lo, x_hi), (y_lo, y_hi)), args.resolution)
    written = write_region_grids(grids, args.out)
    for path in written:
        _info(args, f"wrote {path}")
    print(args.out)
    return 0


def _read_feature_rows(path) -> list[np.ndarray]:
    """Numeric CSV rows; a non-numeric first row is treated as a header."""
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not any(cell.strip() for cell in row):
                continue
            try:
                rows.append(np.array([float(c) for c in row], dtype=np.float64))
            except ValueError:
                if i == 0:
                    continue  # header line
                raise RuntimeError(f"{path}: line {i + 1} is not numeric") from None
    return rows


def write_region_grids(grids, outdir) -> list[str]:
    """One CSV raster per (stage, class) layer plus the chained layers,
    the predicted-class layer, and the cell-center axes."""
    written = []

    def dump(name, array, fmt="%d"):
        path = os.path.join(outdir, name)
        np.savetxt(path, np.asarray(array), fmt=fmt, delimiter=",")
        written.append(path)

    class_count = grids.chained_reject.shape[0]
    for stage_id, layer in sorted(grids.stage_reject.items()):
        for c in range(class_count):
            dump(f"reject_stage{stage_id}_class{c}.csv", layer[c].astype(int))
    for c in range(class_count):
        dump(f"reject_chained_class{c}.csv", grids.chained_reject[c].astype(int))
    dump("predicted_class.csv", grids.predicted_class)
    dump("grid_axes.csv", np.stack([grids.xs, grids.ys]), fmt="%.17g")
    return written


if __name__ == "__main__":
    sys.exit(main())
