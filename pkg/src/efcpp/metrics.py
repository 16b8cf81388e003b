"""Class-incremental evaluation: accuracy matrix, summary metrics and drift probes."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .linalg import batch_quadratic_form


class MetricsError(ValueError):
    pass


@dataclass
class AccuracyMatrix:
    """``acc[k, i]`` is the accuracy on task i after training task k (k >= i).

    Rows and columns use stream positions 0..T-1; ``start_index`` only
    records the naming convention (0 warm, 1 cold) for reports.
    """

    class_counts: list[int]
    start_index: int = 1
    acc: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        t = len(self.class_counts)
        if self.acc is None:
            self.acc = np.full((t, t), np.nan)
        self.acc = np.asarray(self.acc, dtype=np.float64)

    @property
    def num_tasks(self) -> int:
        return len(self.class_counts)

    def set(self, k: int, i: int, value: float) -> None:
        if i > k:
            raise MetricsError(f"a[{k},{i}] is undefined: task {i} not yet trained")
        if not 0.0 <= value <= 1.0:
            raise MetricsError(f"accuracy {value} outside [0, 1]")
        self.acc[k, i] = value

    def row(self, k: int) -> np.ndarray:
        r = self.acc[k, :k + 1]
        if np.any(np.isnan(r)):
            raise MetricsError(f"row {k} has missing entries")
        return r

    def last_filled(self) -> int:
        for k in reversed(range(self.num_tasks)):
            if not np.any(np.isnan(self.acc[k, :k + 1])):
                return k
        raise MetricsError("accuracy matrix is empty")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["K"] + [f"task{i}" for i in range(self.num_tasks)])
        for k in range(self.num_tasks):
            w.writerow([k] + [("" if np.isnan(v) else repr(float(v))) for v in self.acc[k]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, class_counts: list[int], start_index: int = 1) -> "AccuracyMatrix":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        acc = np.array([[np.nan if v == "" else float(v) for v in r[1:]] for r in rows])
        return cls(list(class_counts), start_index, acc)


def per_step_accuracy(m: AccuracyMatrix, k: int) -> float:
    """Class-count weighted mean of a[k, 0..k]."""
    r = m.row(k)
    w = np.asarray(m.class_counts[:k + 1], dtype=np.float64)
    return float(np.sum(w * r) / np.sum(w))


def avg_inc_accuracy(m: AccuracyMatrix, k: int) -> float:
    return float(np.mean([per_step_accuracy(m, i) for i in range(k + 1)]))


def forgetting(m: AccuracyMatrix, k: int) -> float:
    """Mean over j < k of max_{j <= i < k} (a[i, j] - a[k, j])."""
    if k < 1:
        raise MetricsError("forgetting needs at least two trained tasks")
    now = m.row(k)
    vals = []
    for j in range(k):
        past = np.array([m.acc[i, j] for i in range(j, k)])
        if np.any(np.isnan(past)):
            raise MetricsError(f"missing history for task {j}")
        vals.append(float(np.max(past - now[j])))
    return float(np.mean(vals))


def plasticity(m: AccuracyMatrix, k: int) -> float:
    diag = np.array([m.acc[i, i] for i in range(k + 1)])
    if np.any(np.isnan(diag)):
        raise MetricsError("missing diagonal entries")
    return float(np.mean(diag))


@dataclass
class MetricsReport:
    A_step: float
    A_inc: float
    F: float
    PL: float

    @classmethod
    def from_matrix(cls, m: AccuracyMatrix, k: int | None = None) -> "MetricsReport":
        k = m.last_filled() if k is None else k
        f = forgetting(m, k) if k >= 1 else 0.0
        return cls(per_step_accuracy(m, k), avg_inc_accuracy(m, k), f, plasticity(m, k))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def class_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax picks the lowest index on ties
    return float(np.mean(np.argmax(logits, axis=1) == labels))


@dataclass
class DriftReport:
    class_ids: list[int]
    mean_shift: dict[int, np.ndarray]
    pseudo_norm: dict[int, float]
    average: float
    prototype_gap: dict[int, dict[str, float]] = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "euclidean_shift", "efm_pseudo_norm"])
        for c in self.class_ids:
            w.writerow([c, repr(float(np.linalg.norm(self.mean_shift[c]))),
                        repr(self.pseudo_norm[c])])
        return buf.getvalue()


def class_mean_drift(old_features, new_features, efm: np.ndarray,
                     per_class_data: dict[int, np.ndarray]) -> DriftReport:
    """Drift of class means between two backbones, measured in the EFM metric.

    ``old_features``/``new_features`` map an input batch to features.
    The pseudo-norm is the squared form dmu^T E dmu.
    """
    shifts, norms = {}, {}
    for c, x in per_class_data.items():
        if len(x) == 0:
            raise MetricsError(f"class {c} has no evaluation data")
        mu_old = old_features(x).mean(axis=0)
        mu_new = new_features(x).mean(axis=0)
        d = mu_new - mu_old
        shifts[c] = d
        norms[c] = float(d @ efm @ d)
    ids = list(per_class_data)
    avg = float(np.mean([norms[c] for c in ids])) if ids else 0.0
    return DriftReport(ids, shifts, norms, avg)


def prototype_gap(prototype_means: dict[int, np.ndarray], true_means: dict[int, np.ndarray],
                  efm: np.ndarray) -> dict[int, dict[str, float]]:
    """Euclidean and EFM pseudo-metric distances between prototypes and true means."""
    out = {}
    for c, mu in true_means.items():
        if c not in prototype_means:
            raise MetricsError(f"unknown class {c}")
        d = prototype_means[c] - mu
        out[c] = {"euclidean": float(np.linalg.norm(d)),
                  "efm": float(batch_quadratic_form(efm, d[None, :])[0])}
    return out
