"""Shared fixtures.

The banknote-shaped dataset mirrors the public banknote-authentication file
(1372 rows, 4 wavelet-statistic features, classes 762/610) but is generated
deterministically here because the test environment has no general network
access. Features come from per-class two-factor models with bounded latents,
giving the correlated, compact-support structure typical of sensor-derived
tabular data. Point BANKNOTE_CSV at the real file to run against it instead.
"""

import csv
import os

import numpy as np
import pytest

from triguard.data import Dataset, load_csv

BANKNOTE_SEED = 7

_M0 = np.array([3.2, 5.0, 0.5, -1.0])
_M1 = np.array([-2.9, -4.0, 4.5, -1.5])
_S0 = np.array([1.8, 3.0, 3.3, 2.0])
_S1 = np.array([1.8, 3.2, 3.6, 2.1])
_B0 = np.array([[0.9, 0.3], [0.8, -0.5], [-0.5, 0.8], [0.4, 0.7]])
_B1 = np.array([[0.9, 0.25], [0.75, -0.55], [-0.45, 0.8], [0.35, 0.75]])
_NOISE_FRAC = 0.55


def make_banknote_like(seed: int = BANKNOTE_SEED) -> Dataset:
    rng = np.random.default_rng(seed)

    def draw(n, mean, scale, loadings):
        z = rng.uniform(-np.sqrt(3), np.sqrt(3), (n, 2))
        eps = rng.uniform(-np.sqrt(3), np.sqrt(3), (n, 4)) * _NOISE_FRAC
        unit = np.sqrt(np.sum(loadings ** 2, axis=1) + _NOISE_FRAC ** 2)
        return mean + ((z @ loadings.T + eps) / unit) * scale

    x0 = draw(762, _M0, _S0, _B0)
    x1 = draw(610, _M1, _S1, _B1)
    samples = np.concatenate([x0, x1])
    labels = np.concatenate([np.zeros(762, np.int64), np.ones(610, np.int64)])
    order = rng.permutation(1372)
    return Dataset(samples=samples[order], labels=labels[order], class_count=2,
                   label_names=["genuine", "forged"])


@pytest.fixture(scope="session")
def banknote_csv(tmp_path_factory) -> str:
    real = os.environ.get("BANKNOTE_CSV")
    if real:
        return real
    ds = make_banknote_like()
    path = tmp_path_factory.mktemp("data") / "banknote.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variance", "skewness", "curtosis", "entropy", "class"])
        for x, y in zip(ds.samples, ds.labels):
            writer.writerow([repr(float(v)) for v in x] + [ds.label_names[y]])
    return str(path)


@pytest.fixture(scope="session")
def banknote(banknote_csv) -> Dataset:
    return load_csv(banknote_csv, label_column="class", has_header=True)
