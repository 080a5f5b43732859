"""Dataset ingestion: CSV loading, seeded train/test split, z-score
standardization with train statistics, and even partitioning across workers.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError, SchemaError
from .nn import TASK_BINARY, TASK_REGRESSION

DATASETS = {
    "boston": {"file": "boston_housing.csv", "columns": 14, "task": TASK_REGRESSION},
    "pima": {"file": "pima_diabetes.csv", "columns": 9, "task": TASK_BINARY},
}


@dataclass
class FederatedDataset:
    """Disjoint per-worker training partitions plus the held-out test split.
    Features are z-scored with training-split statistics; targets are raw."""

    task: str
    partitions: dict  # worker name -> (X, y)
    test_X: np.ndarray
    test_y: np.ndarray

    @property
    def n_train(self) -> int:
        return sum(len(y) for _, y in self.partitions.values())

    @property
    def n_features(self) -> int:
        return self.test_X.shape[1]

    def train_arrays(self):
        """All training rows concatenated in partition order."""
        Xs, ys = zip(*self.partitions.values())
        return np.concatenate(Xs), np.concatenate(ys)


def bundled_path(kind: str) -> str:
    if kind not in DATASETS:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    ref = importlib.resources.files("fedring") / "datasets" / DATASETS[kind]["file"]
    return str(ref)


def load_csv(path: str, kind: str) -> np.ndarray:
    if kind not in DATASETS:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    try:
        data = np.loadtxt(path, delimiter=",", ndmin=2)
    except OSError as e:
        raise ParseError(f"cannot read {path}: {e}") from None
    except ValueError as e:
        raise ParseError(f"cannot parse {path}: {e}") from None
    want = DATASETS[kind]["columns"]
    if data.shape[1] != want:
        raise SchemaError(f"{kind} expects {want} columns, file has {data.shape[1]}")
    if DATASETS[kind]["task"] == TASK_BINARY:
        labels = data[:, -1]
        if not np.all(np.isin(labels, (0.0, 1.0))):
            raise SchemaError(f"{kind} labels must be 0/1")
    return data


def load_dataset(path: str, kind: str, workers, split_seed: int = 0) -> FederatedDataset:
    """80/20 train/test split by seeded shuffle, z-score features with train
    statistics, partition the train rows evenly across the workers."""
    workers = list(workers)
    if not workers:
        raise ConfigError("need at least one worker")
    data = load_csv(path, kind)
    rng = np.random.default_rng([split_seed, 1])
    idx = rng.permutation(len(data))
    n_test = len(data) // 5
    test, train = data[idx[:n_test]], data[idx[n_test:]]
    Xtr, ytr = train[:, :-1], train[:, -1]
    Xte, yte = test[:, :-1], test[:, -1]
    mu, sd = Xtr.mean(axis=0), Xtr.std(axis=0)
    sd = np.where(sd == 0.0, 1.0, sd)
    Xtr = (Xtr - mu) / sd
    Xte = (Xte - mu) / sd
    partitions = {}
    for i, (xs, ys) in enumerate(zip(np.array_split(Xtr, len(workers)),
                                     np.array_split(ytr, len(workers)))):
        partitions[workers[i]] = (xs, ys)
    return FederatedDataset(DATASETS[kind]["task"], partitions, Xte, yte)
