"""Accuracy evaluation and the two headline metrics.

MAUA is the maximum over rounds of the mean per-client local-test accuracy
(personalization); global accuracy is the mean over clients of accuracy on
the evenly distributed global test set (generalization). All functions are
read-only and safe to call concurrently.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Dataset
from .errors import EmptyDatasetError, InvalidInputError, UndefinedMetricError
from .models import Model, forward_batch

Array = np.ndarray


@dataclass(frozen=True)
class RoundReport:
    """Per-round metrics; accuracy vectors have one entry per client."""

    round: int
    per_client_local_acc: Array
    global_acc_per_client: Array
    mean_ce: float
    mean_kd: float
    hierarchy_built: bool

    def __post_init__(self) -> None:
        for name, v in (
            ("per_client_local_acc", self.per_client_local_acc),
            ("global_acc_per_client", self.global_acc_per_client),
        ):
            v = np.asarray(v)
            if v.size and (v.min() < 0.0 or v.max() > 1.0):
                raise InvalidInputError(f"{name} outside [0, 1]")

    @property
    def mean_local_acc(self) -> float:
        return float(np.mean(self.per_client_local_acc))

    @property
    def min_local_acc(self) -> float:
        return float(np.min(self.per_client_local_acc))

    @property
    def max_local_acc(self) -> float:
        return float(np.max(self.per_client_local_acc))

    @property
    def mean_global_acc(self) -> float:
        return float(np.mean(self.global_acc_per_client))


@dataclass(frozen=True)
class ExperimentSummary:
    """Headline numbers for one run; None when no rounds were executed."""

    maua: float | None
    best_global_acc: float | None
    final_global_acc: float | None
    rounds_run: int


def evaluate(m: Model, ds: Dataset) -> float:
    """Fraction of argmax-correct predictions; ties pick the lowest class."""
    if len(ds) == 0:
        raise EmptyDatasetError("cannot evaluate on an empty dataset")
    preds = np.argmax(forward_batch(m, ds.features), axis=1)
    return float(np.mean(preds == ds.labels))


def _acc_rows(reports: Sequence) -> list[Array]:
    rows = []
    for r in reports:
        row = r.per_client_local_acc if isinstance(r, RoundReport) else r
        rows.append(np.asarray(row, dtype=np.float64))
    return rows


def maua(reports: Sequence) -> float:
    """Max over rounds of the unweighted client mean of local accuracy.

    Accepts RoundReports or raw per-round accuracy vectors.
    """
    if len(reports) == 0:
        raise UndefinedMetricError("MAUA is undefined without any round")
    return float(max(row.mean() for row in _acc_rows(reports)))


def global_accuracy(clients: Sequence, global_test: Dataset) -> float:
    """Unweighted mean over clients of accuracy on the global test set."""
    models = [c.model if hasattr(c, "model") else c for c in clients]
    if not models:
        raise InvalidInputError("no clients to evaluate")
    return float(np.mean([evaluate(m, global_test) for m in models]))


def summarize(reports: Sequence[RoundReport]) -> ExperimentSummary:
    if not reports:
        return ExperimentSummary(maua=None, best_global_acc=None, final_global_acc=None, rounds_run=0)
    global_means = [r.mean_global_acc for r in reports]
    return ExperimentSummary(
        maua=maua(reports),
        best_global_acc=float(max(global_means)),
        final_global_acc=float(global_means[-1]),
        rounds_run=len(reports),
    )
