"""Class splits, synthetic Gaussian streams and CSV ingestion.

Labels inside a stream are global head columns: the classes of the first
task occupy columns ``[0, |C_first|)``, the next task the following block,
and so on. The original dataset labels are kept in ``Task.class_ids``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ExemplarAccessError(RuntimeError):
    """Raised when training code reads raw samples of a completed task."""


@dataclass(frozen=True)
class SplitSpec:
    total_classes: int
    num_steps: int
    first_task_classes: int = 0
    mode: str = "cold"

    def __post_init__(self):
        if self.mode not in ("warm", "cold"):
            raise ValueError(f"mode must be 'warm' or 'cold', got {self.mode!r}")
        if self.mode == "cold" and self.first_task_classes != 0:
            raise ValueError("cold start has no first-task classes")
        if self.mode == "warm" and self.first_task_classes <= 0:
            raise ValueError("warm start needs first_task_classes > 0")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        rest = self.total_classes - self.first_task_classes
        if rest <= 0 or rest % self.num_steps:
            raise ValueError(
                f"{self.total_classes} classes cannot be split into {self.first_task_classes}"
                f" + {self.num_steps} equal steps")

    @property
    def per_step_classes(self) -> int:
        return (self.total_classes - self.first_task_classes) // self.num_steps

    @property
    def start_index(self) -> int:
        """Metric start index s: 0 for warm (task 0 counted), 1 for cold."""
        return 0 if self.mode == "warm" else 1


def build_splits(spec: SplitSpec, class_shuffle_seed: int = 0) -> list[list[int]]:
    """Ordered class-id lists per task. Seed 0 keeps the natural class order."""
    if class_shuffle_seed == 0:
        order = np.arange(spec.total_classes)
    else:
        order = np.random.default_rng(class_shuffle_seed).permutation(spec.total_classes)
    order = [int(c) for c in order]
    tasks = []
    pos = 0
    if spec.mode == "warm":
        tasks.append(order[:spec.first_task_classes])
        pos = spec.first_task_classes
    for _ in range(spec.num_steps):
        tasks.append(order[pos:pos + spec.per_step_classes])
        pos += spec.per_step_classes
    return tasks


@dataclass
class Task:
    index: int
    class_ids: list[int]  # original labels
    columns: tuple[int, int]  # head column range
    x_train: np.ndarray
    y_train: np.ndarray  # global column labels
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)


@dataclass
class TaskStream:
    """Immutable ordered tasks with an exemplar-free access gate.

    Training code reads train data through :meth:`train_data`; once a later
    task has been opened, earlier train sets raise. Held-out test data stays
    reachable for evaluation through :meth:`test_data`.
    """

    tasks: list[Task]
    start_index: int = 1
    access_log: list[tuple[str, int]] = field(default_factory=list)
    _frontier: int = -1

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def input_dim(self) -> int:
        return self.tasks[0].x_train.shape[1]

    @property
    def class_counts(self) -> list[int]:
        return [t.num_classes for t in self.tasks]

    def open_task(self, index: int) -> Task:
        if index < self._frontier:
            raise ExemplarAccessError(f"task {index} already completed")
        self._frontier = index
        self.access_log.append(("open", index))
        return self.tasks[index]

    def train_data(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        self.access_log.append(("train", index))
        if index != self._frontier:
            raise ExemplarAccessError(
                f"train data of task {index} requested while task {self._frontier} is active")
        t = self.tasks[index]
        return t.x_train, t.y_train

    def test_data(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        self.access_log.append(("test", index))
        t = self.tasks[index]
        return t.x_test, t.y_test

    def reset(self) -> "TaskStream":
        """Fresh gate over the same tasks."""
        return TaskStream(self.tasks, self.start_index)


def _relabel(splits: list[list[int]]) -> tuple[dict[int, int], list[tuple[int, int]]]:
    col_of, ranges = {}, []
    col = 0
    for classes in splits:
        ranges.append((col, col + len(classes)))
        for c in classes:
            col_of[c] = col
            col += 1
    return col_of, ranges


@dataclass(frozen=True)
class SyntheticStreamSpec:
    """Gaussian class clusters in input space.

    ``shared_dim > 0`` confines class means to a random subspace of that
    dimension before adding isotropic within-class noise, so tasks compete
    for the same input directions. ``drift`` rotates each successive task's
    inputs by a small random rotation (angle scale in radians).
    """

    classes: int = 50
    input_dim: int = 64
    train_per_class: int = 200
    test_per_class: int = 100
    mean_scale: float = 4.0  # variance of cluster means
    within_scale: float = 1.0  # within-class variance
    shared_dim: int = 0
    drift: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("classes", "input_dim", "train_per_class", "test_per_class"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.mean_scale < 0 or self.within_scale < 0 or self.drift < 0:
            raise ValueError("scales must be non-negative")
        if not 0 <= self.shared_dim <= self.input_dim:
            raise ValueError("shared_dim must lie in [0, input_dim]")


def _random_rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    a = rng.standard_normal((dim, dim)) * angle / np.sqrt(dim)
    skew = (a - a.T) / 2.0
    # Cayley transform of a small skew matrix is orthogonal
    eye = np.eye(dim)
    return np.linalg.solve(eye + skew, eye - skew)


def generate_synthetic_stream(spec: SyntheticStreamSpec, splits: list[list[int]],
                              start_index: int = 1) -> TaskStream:
    rng = np.random.default_rng(spec.seed)
    d = spec.input_dim
    if spec.shared_dim:
        basis = np.linalg.qr(rng.standard_normal((d, spec.shared_dim)))[0]
        coords = rng.standard_normal((spec.classes, spec.shared_dim))
        means = np.sqrt(spec.mean_scale * d / spec.shared_dim) * coords @ basis.T
    else:
        means = np.sqrt(spec.mean_scale) * rng.standard_normal((spec.classes, d))
    std = np.sqrt(spec.within_scale)
    col_of, ranges = _relabel(splits)
    rotation = np.eye(d)
    tasks = []
    for t, classes in enumerate(splits):
        if spec.drift and t:
            rotation = rotation @ _random_rotation(d, spec.drift, rng)
        xs = {"train": [], "test": []}
        ys = {"train": [], "test": []}
        for c in classes:
            for part, count in (("train", spec.train_per_class), ("test", spec.test_per_class)):
                x = means[c] + std * rng.standard_normal((count, d))
                xs[part].append(x @ rotation.T)
                ys[part].append(np.full(count, col_of[c], dtype=np.intp))
        tasks.append(Task(t, list(classes), ranges[t],
                          np.concatenate(xs["train"]), np.concatenate(ys["train"]),
                          np.concatenate(xs["test"]), np.concatenate(ys["test"])))
    return TaskStream(tasks, start_index)


class CSVFormatError(ValueError):
    pass


def read_csv_samples(path) -> tuple[np.ndarray, np.ndarray]:
    """Strict reader for ``label,f0,...,fD-1`` files."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise CSVFormatError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    d = len(header) - 1
    if d < 1 or header != ["label"] + [f"f{i}" for i in range(d)]:
        raise CSVFormatError(f"{path}: bad header {header}")
    labels, feats = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if [c.strip() for c in row] == header:
            raise CSVFormatError(f"{path}:{lineno}: duplicate header")
        if len(row) != d + 1:
            raise CSVFormatError(f"{path}:{lineno}: expected {d + 1} fields, got {len(row)}")
        try:
            labels.append(int(row[0]))
            feats.append([float(v) for v in row[1:]])
        except ValueError as exc:
            raise CSVFormatError(f"{path}:{lineno}: {exc}") from None
    if not labels:
        raise CSVFormatError(f"{path}: no data rows")
    x = np.array(feats, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise CSVFormatError(f"{path}: non-finite feature values")
    return x, np.array(labels, dtype=np.intp)


def load_csv_dataset(path, splits: list[list[int]], test_path=None,
                     test_fraction: float = 0.25, seed: int = 0,
                     normalize: bool = True, start_index: int = 1) -> TaskStream:
    """Route CSV rows to tasks by label.

    Without ``test_path`` a per-class ``test_fraction`` is held out. With
    ``normalize`` every task is standardised using statistics of the first
    task's training rows only.
    """
    x, y = read_csv_samples(path)
    known = {c for classes in splits for c in classes}
    unknown = sorted(set(y.tolist()) - known)
    if unknown:
        raise CSVFormatError(f"{path}: labels {unknown} are not in any task")
    if test_path is not None:
        xt, yt = read_csv_samples(test_path)
        if xt.shape[1] != x.shape[1]:
            raise CSVFormatError("train and test files have different widths")
        bad = sorted(set(yt.tolist()) - known)
        if bad:
            raise CSVFormatError(f"{test_path}: labels {bad} are not in any task")
    rng = np.random.default_rng(seed)
    col_of, ranges = _relabel(splits)
    tasks = []
    for t, classes in enumerate(splits):
        tr_x, tr_y, te_x, te_y = [], [], [], []
        for c in classes:
            idx = np.flatnonzero(y == c)
            if idx.size == 0:
                raise CSVFormatError(f"{path}: class {c} has no rows")
            if test_path is None:
                idx = rng.permutation(idx)
                n_test = int(round(test_fraction * idx.size))
                te_idx, tr_idx = idx[:n_test], idx[n_test:]
                te_x.append(x[te_idx])
            else:
                tr_idx = idx
                te_idx = np.flatnonzero(yt == c)
                te_x.append(xt[te_idx])
            tr_x.append(x[tr_idx])
            tr_y.append(np.full(tr_idx.size, col_of[c], dtype=np.intp))
            te_y.append(np.full(te_idx.size, col_of[c], dtype=np.intp))
        tasks.append(Task(t, list(classes), ranges[t], np.concatenate(tr_x),
                          np.concatenate(tr_y), np.concatenate(te_x), np.concatenate(te_y)))
    if normalize:
        mu = tasks[0].x_train.mean(axis=0)
        sd = tasks[0].x_train.std(axis=0)
        sd[sd == 0.0] = 1.0
        for task in tasks:
            task.x_train = (task.x_train - mu) / sd
            task.x_test = (task.x_test - mu) / sd
    return TaskStream(tasks, start_index)
