"""Trace leakage quantification: NICV, correlation-ratio bound, POI counts.

NICV(X, Y) = Var[E[Y | X]] / Var[Y] per sample index, where Y are trace
latencies and X the class label of each repetition.  It ranges over [0, 1]
and its square root (the correlation ratio) upper-bounds the magnitude of
Pearson's correlation between label and latency, so points of interest are
counted on the square-root curve.

Population (biased) variance is used throughout; zero-variance columns get
NICV 0 with a degeneracy flag instead of aborting, so quiet trace tails do
not break analysis.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import IO, Sequence, Union

import numpy as np

from .model import Trace

NICV_EPS = 1e-9


@dataclass
class LeakageDataset:
    """Labeled trace matrix: one row per repetition, one column per index."""

    class_labels: np.ndarray
    traces: np.ndarray

    def __post_init__(self):
        self.class_labels = np.asarray(self.class_labels)
        self.traces = np.asarray(self.traces, dtype=np.float64)
        if self.traces.ndim != 2:
            raise ValueError("traces must be a 2-D matrix (rows = repetitions)")
        if len(self.class_labels) != self.traces.shape[0]:
            raise ValueError("one class label per trace row required")
        _, counts = np.unique(self.class_labels, return_counts=True)
        if (counts < 2).any():
            raise ValueError("every class needs at least 2 rows")

    @classmethod
    def from_trace_groups(
        cls, class0: Sequence[Trace], class1: Sequence[Trace]
    ) -> "LeakageDataset":
        rows = [t.latencies() for t in class0] + [t.latencies() for t in class1]
        width = min(len(r) for r in rows)
        matrix = np.vstack([r[:width] for r in rows]).astype(np.float64)
        labels = np.array([0] * len(class0) + [1] * len(class1))
        return cls(class_labels=labels, traces=matrix)

    def num_classes(self) -> int:
        return len(np.unique(self.class_labels))


@dataclass
class NicvCurve:
    """Per-index NICV values, their square roots, and degeneracy flags."""

    values: np.ndarray
    sqrt_values: np.ndarray
    degenerate: np.ndarray

    def __len__(self) -> int:
        return len(self.values)


def _population_var(matrix: np.ndarray) -> np.ndarray:
    return matrix.var(axis=0, ddof=0)


def nicv_general(dataset: LeakageDataset) -> NicvCurve:
    """Var[E[Y|X]] / Var[Y] per column, any number of classes, any balance.

    Class means are weighted by class frequency.  Columns with zero total
    variance are flagged degenerate and reported as 0.
    """
    labels = dataset.class_labels
    classes = np.unique(labels)
    if len(classes) < 2:
        raise ValueError("need at least two classes; dataset has one")
    y = dataset.traces
    n = y.shape[0]
    class_means = np.vstack([y[labels == c].mean(axis=0) for c in classes])
    weights = np.array([(labels == c).sum() / n for c in classes])
    grand = weights @ class_means
    between = (weights[:, None] * (class_means - grand) ** 2).sum(axis=0)
    total = _population_var(y)
    degenerate = total == 0
    values = np.where(degenerate, 0.0, between / np.where(degenerate, 1.0, total))
    return NicvCurve(values=values, sqrt_values=np.sqrt(values), degenerate=degenerate)


def nicv_two_class(dataset: LeakageDataset) -> NicvCurve:
    """(E[Y|X=0] - E[Y|X=1])^2 / (4 Var[Y]) per column.

    Requires exactly two classes with equal row counts; the 4 in the
    denominator assumes balance (it equals 1/(p(1-p)) only at p = 1/2).
    Matches nicv_general on balanced data to within 1e-12 relative error.
    """
    labels = dataset.class_labels
    classes = np.unique(labels)
    if len(classes) != 2:
        raise ValueError("two-class formula requires exactly two classes")
    n0 = int((labels == classes[0]).sum())
    n1 = int((labels == classes[1]).sum())
    if n0 != n1:
        raise ValueError(
            f"unbalanced classes ({n0} vs {n1} rows): use nicv_general instead"
        )
    y = dataset.traces
    m0 = y[labels == classes[0]].mean(axis=0)
    m1 = y[labels == classes[1]].mean(axis=0)
    total = _population_var(y)
    degenerate = total == 0
    values = np.where(
        degenerate, 0.0, (m0 - m1) ** 2 / (4.0 * np.where(degenerate, 1.0, total))
    )
    return NicvCurve(values=values, sqrt_values=np.sqrt(values), degenerate=degenerate)


def count_pois(curve: NicvCurve, threshold: float) -> int:
    """Number of indices whose maximum correlation sqrt(NICV) exceeds threshold."""
    if not (0.0 < threshold < 1.0):
        raise ValueError("threshold must lie in (0, 1)")
    return int((curve.sqrt_values > threshold).sum())


@dataclass
class BoundCheckReport:
    """Result of checking |Pearson(X, Y)| <= sqrt(NICV) per column."""

    max_violation: float
    violation_count: int
    skipped_columns: int

    @property
    def ok(self) -> bool:
        return self.violation_count == 0


def correlation_ratio_bound_check(dataset: LeakageDataset) -> BoundCheckReport:
    """Verify the correlation-ratio upper bound on a two-class 0/1 dataset.

    Zero-variance columns are skipped and counted.  The returned max
    violation is max(|corr| - sqrt(NICV)) over checked columns (negative
    when the bound holds with slack).
    """
    labels = dataset.class_labels
    if dataset.num_classes() != 2:
        raise ValueError("bound check requires a two-class dataset")
    curve = nicv_general(dataset)
    y = dataset.traces
    x = labels.astype(np.float64)
    xc = x - x.mean()
    sx = np.sqrt((xc**2).mean())
    yc = y - y.mean(axis=0)
    sy = np.sqrt((yc**2).mean(axis=0))
    usable = sy > 0
    cov = (xc @ yc) / y.shape[0]
    corr = np.zeros(y.shape[1])
    corr[usable] = cov[usable] / (sx * sy[usable])
    excess = np.abs(corr[usable]) - curve.sqrt_values[usable]
    max_violation = float(excess.max()) if excess.size else 0.0
    violations = int((excess > NICV_EPS).sum())
    return BoundCheckReport(
        max_violation=max_violation,
        violation_count=violations,
        skipped_columns=int((~usable).sum()),
    )


def write_nicv_csv(curve: NicvCurve, sink: Union[str, Path, IO[str]]) -> None:
    if isinstance(sink, (str, Path)):
        with open(sink, "w", encoding="utf-8", newline="\n") as fh:
            write_nicv_csv(curve, fh)
        return
    sink.write("index,nicv,sqrt_nicv\n")
    for i, (v, s) in enumerate(zip(curve.values, curve.sqrt_values)):
        sink.write(f"{i},{float(v)!r},{float(s)!r}\n")


def read_nicv_csv(source: Union[str, Path, IO[str]]) -> NicvCurve:
    if isinstance(source, (str, Path)):
        with open(source, "r", encoding="utf-8") as fh:
            return read_nicv_csv(fh)
    lines = source.read().splitlines()
    if not lines or lines[0] != "index,nicv,sqrt_nicv":
        raise ValueError("bad NICV CSV header")
    values = []
    sqrts = []
    for line in lines[1:]:
        _, v, s = line.split(",")
        values.append(float(v))
        sqrts.append(float(s))
    values_arr = np.array(values)
    return NicvCurve(
        values=values_arr,
        sqrt_values=np.array(sqrts),
        degenerate=values_arr == 0.0,
    )
