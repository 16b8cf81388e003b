"""Incremental training loops: EFC++, EFC (PR-ACE) and fine-tuning.

The learner only ever sees the training arrays of the task it is currently
on; evaluation and diagnostics read held-out data through the stream in
:func:`run_stream`, never through the learner.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import regularizers as regs
from .efm import EmpiricalFeatureMatrix, dataset_efm
from .metrics import AccuracyMatrix, MetricsReport, class_accuracy, per_step_accuracy
from .model import (ClassifierHead, FeatureExtractor, ModelSnapshot, backward,
                    expand_head, forward, make_optimizer, softmax_cross_entropy)
from .prototypes import (DriftCompensationConfig, PrototypeStore, compensate_drift,
                         compute_class_stats, sample_gaussian)
from .regularizers import RegularizerConfig
from .scenario import TaskStream

log = logging.getLogger(__name__)

STRATEGIES = ("efcpp", "efc", "finetune", "reg_ablation")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    strategy: str = "efcpp"
    epochs: int = 100
    first_task_epochs: int | None = None
    rebalance_epochs: int = 50
    batch_size: int = 64
    lr_first_task: float = 1e-3
    lr_backbone: float = 1e-4
    lr_head: float = 1e-4
    lr_rebalance: float = 1e-3
    rebalance_optimizer: str = "sgd"
    weight_decay: float = 2e-4
    hidden: tuple[int, ...] = (128, 64)
    feature_dim: int = 64
    seed: int = 0
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    drift: DriftCompensationConfig = field(default_factory=DriftCompensationConfig)
    diagonal_cov: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.first_task_epochs is None:
            self.first_task_epochs = self.epochs
        for name in ("epochs", "first_task_epochs", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.rebalance_epochs < 0:
            raise ValueError("rebalance_epochs must be >= 0")
        for name in ("lr_first_task", "lr_backbone", "lr_head", "lr_rebalance"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.strategy == "efc" and self.regularizer.kind != "efm":
            raise ValueError("the EFC strategy is defined with the EFM regularizer only")


@dataclass
class TaskState:
    """Everything carried from one task boundary to the next."""

    task: int
    extractor: FeatureExtractor
    head: ClassifierHead
    snapshot: ModelSnapshot | None
    efm: EmpiricalFeatureMatrix | None
    store: PrototypeStore
    rng: np.random.Generator
    fisher: regs.DiagonalEFIM | None = None

    @classmethod
    def initial(cls, input_dim: int, config: TrainConfig) -> "TaskState":
        rng = np.random.default_rng(config.seed)
        ext = FeatureExtractor.init(input_dim, config.hidden, config.feature_dim, rng)
        return cls(-1, ext, ClassifierHead.empty(config.feature_dim), None, None,
                   PrototypeStore(config.diagonal_cov), rng)


@dataclass
class TaskLog:
    task: int
    phases: dict[str, list[float]] = field(default_factory=dict)  # per-epoch mean loss
    timing: dict[str, float] = field(default_factory=dict)
    A_step: float | None = None


def _check(loss: float, phase: str, task: int) -> None:
    if not np.isfinite(loss):
        raise TrainingDivergedError(f"non-finite loss in {phase} at task {task}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield perm[s:s + batch_size]


def class_quota_labels(classes: np.ndarray, batch_size: int, steps: int,
                       rng: np.random.Generator) -> np.ndarray:
    """Labels for ``steps`` batches, each batch uniform over ``classes``.

    Every class gets ``batch_size // C`` slots per batch and the remainder
    goes to distinct classes drawn at random.
    """
    c = len(classes)
    base, rem = divmod(batch_size, c)
    out = np.empty((steps, batch_size), dtype=np.intp)
    fixed = np.repeat(classes, base)
    for s in range(steps):
        extra = rng.choice(classes, size=rem, replace=False) if rem else classes[:0]
        out[s] = rng.permutation(np.concatenate([fixed, extra]))
    return out


def _fill_features(labels: np.ndarray, current: dict[int, np.ndarray], store: PrototypeStore,
                   dim: int, rng: np.random.Generator, current_index: bool = False):
    """Materialise a label grid into features: pseudo-features for stored
    classes, sampled rows of ``current`` for current classes.

    With ``current_index`` current-class slots are left empty and the
    returned ``rows`` grid holds the drawn row within each class instead.
    """
    flat = labels.ravel()
    feats = np.zeros((flat.size, dim))
    rows = np.full(flat.size, -1, dtype=np.intp)
    for c in np.unique(flat):
        pos = np.flatnonzero(flat == c)
        if c in current:
            pick = rng.integers(0, current[c].shape[0], size=pos.size)
            if current_index:
                rows[pos] = pick
            else:
                feats[pos] = current[c][pick]
        else:
            p = store[int(c)]
            feats[pos] = sample_gaussian(p.mean, p.cov, pos.size, rng, chol=p.chol)
    return feats.reshape(labels.shape + (dim,)), rows.reshape(labels.shape)


# --------------------------------------------------------------------------- phases


def train_first_task(state: TaskState, x: np.ndarray, y: np.ndarray,
                     config: TrainConfig, tlog: TaskLog) -> None:
    ext, head = state.extractor, state.head
    opt = make_optimizer("adam", ext.params() + [head.weights], config.lr_first_task,
                         config.weight_decay)
    curve = []
    for _ in range(config.first_task_epochs):
        tot, nb = 0.0, 0
        for idx in _batches(len(x), config.batch_size, state.rng):
            cache = forward(ext, head, x[idx])
            loss, dlogits = softmax_cross_entropy(cache.logits, y[idx])
            _check(loss, "first_task", state.task)
            grads = backward(ext, cache, dlogits @ head.weights.T)
            opt.step(grads + [cache.features.T @ dlogits])
            tot, nb = tot + loss, nb + 1
        curve.append(tot / nb)
    tlog.phases["first_task"] = curve


def train_backbone(state: TaskState, x: np.ndarray, y: np.ndarray, prev_features: np.ndarray,
                   config: TrainConfig, tlog: TaskLog) -> None:
    """Regularised backbone phase: penalty + CE on the current task's columns.

    Only the extractor and the newest head columns are updated; the old
    columns are read but never written.
    """
    ext, head = state.extractor, state.head
    start, stop = head.ranges[-1]
    w_new = head.weights[:, start:stop].copy()
    w_old = head.weights[:, :start]
    rc = config.regularizer
    efm_prev = state.efm.matrix if state.efm is not None else None
    prev_logits = prev_features @ w_old if rc.kind == "kd" else None

    opt_theta = make_optimizer("adam", ext.params(), config.lr_backbone, config.weight_decay)
    opt_head = make_optimizer("adam", [w_new], config.lr_head, config.weight_decay)
    curve = []
    for _ in range(config.epochs):
        tot, nb = 0.0, 0
        for idx in _batches(len(x), config.batch_size, state.rng):
            cache = forward(ext, None, x[idx])
            f = cache.features
            logits = f @ w_new
            loss, dlog = softmax_cross_entropy(logits, y[idx] - start)
            dfeat = dlog @ w_new.T
            extra = None
            if rc.kind == "efm":
                l2, d2 = regs.efm_penalty(f, prev_features[idx], efm_prev, rc.lambda_efm, rc.eta)
                loss, dfeat = loss + l2, dfeat + d2
            elif rc.kind == "fd":
                l2, d2 = regs.fd_penalty(f, prev_features[idx], rc.lambda_fd, rc.fd_squared)
                loss, dfeat = loss + l2, dfeat + d2
            elif rc.kind == "kd":
                l2, dk = regs.kd_penalty(f @ w_old, prev_logits[idx], rc.kd_temperature,
                                         rc.lambda_kd)
                loss, dfeat = loss + l2, dfeat + dk @ w_old.T
            elif rc.kind == "efim":
                l2, extra = regs.ewc_penalty(ext.params(), state.fisher, rc.lambda_efim)
                loss += l2
            _check(loss, "backbone", state.task)
            grads = backward(ext, cache, dfeat)
            if extra is not None:
                grads = [g + e for g, e in zip(grads, extra)]
            opt_theta.step(grads)
            opt_head.step([f.T @ dlog])
            tot, nb = tot + loss, nb + 1
        curve.append(tot / nb)
    head.weights[:, start:stop] = w_new
    tlog.phases["backbone"] = curve


def train_finetune(state: TaskState, x: np.ndarray, y: np.ndarray,
                   config: TrainConfig, tlog: TaskLog) -> None:
    """Plain CE over every seen class on current data, backbone and full head."""
    ext, head = state.extractor, state.head
    opt_theta = make_optimizer("adam", ext.params(), config.lr_backbone, config.weight_decay)
    opt_head = make_optimizer("adam", [head.weights], config.lr_head, config.weight_decay)
    curve = []
    for _ in range(config.epochs):
        tot, nb = 0.0, 0
        for idx in _batches(len(x), config.batch_size, state.rng):
            cache = forward(ext, head, x[idx])
            loss, dlog = softmax_cross_entropy(cache.logits, y[idx])
            _check(loss, "finetune", state.task)
            opt_theta.step(backward(ext, cache, dlog @ head.weights.T))
            opt_head.step([cache.features.T @ dlog])
            tot, nb = tot + loss, nb + 1
        curve.append(tot / nb)
    tlog.phases["finetune"] = curve


def train_efc(state: TaskState, x: np.ndarray, y: np.ndarray, prev_features: np.ndarray,
              config: TrainConfig, tlog: TaskLog) -> None:
    """Joint backbone + full-head training with EFM and the asymmetric PR-ACE loss.

    Each step uses a batch X for the current-class CE and the EFM penalty,
    and a second class-balanced batch mixing pseudo-features of old classes
    with fresh current-task samples, scored over every seen class.
    """
    ext, head = state.extractor, state.head
    start, stop = head.ranges[-1]
    rc = config.regularizer
    efm_prev = state.efm.matrix
    n = ext.feature_dim
    all_classes = np.arange(head.num_classes)
    rows_of = {c: np.flatnonzero(y == c) for c in range(start, stop)}

    opt_theta = make_optimizer("adam", ext.params(), config.lr_backbone, config.weight_decay)
    opt_head = make_optimizer("adam", [head.weights], config.lr_head, config.weight_decay)
    w = head.weights
    curve = []
    for _ in range(config.epochs):
        steps = -(-len(x) // config.batch_size)
        labels = class_quota_labels(all_classes, config.batch_size, steps, state.rng)
        proto_feats, rows = _fill_features(labels, rows_of, state.store, n, state.rng,
                                           current_index=True)
        tot, nb = 0.0, 0
        for s, idx in enumerate(_batches(len(x), config.batch_size, state.rng)):
            cache = forward(ext, None, x[idx])
            f = cache.features
            loss1, dlog1 = softmax_cross_entropy(f @ w[:, start:stop], y[idx] - start)
            l_efm, d_efm = regs.efm_penalty(f, prev_features[idx], efm_prev,
                                            rc.lambda_efm, rc.eta)
            dfeat = dlog1 @ w[:, start:stop].T + d_efm

            lab = labels[s]
            is_cur = (lab >= start) & (lab < stop)
            mixed = proto_feats[s].copy()
            cur_x_rows = np.array([rows_of[c][r] for c, r in zip(lab[is_cur], rows[s][is_cur])],
                                  dtype=np.intp)
            cache_hat = None
            if cur_x_rows.size:
                cache_hat = forward(ext, None, x[cur_x_rows])
                mixed[is_cur] = cache_hat.features
            loss2, dlog2 = softmax_cross_entropy(mixed @ w, lab)
            loss = loss1 + loss2 + l_efm
            _check(loss, "efc", state.task)

            grads = backward(ext, cache, dfeat)
            if cache_hat is not None:
                dhat = (dlog2 @ w.T)[is_cur]
                grads = [g + h for g, h in zip(grads, backward(ext, cache_hat, dhat))]
            gw = mixed.T @ dlog2
            gw[:, start:stop] += f.T @ dlog1
            opt_theta.step(grads)
            opt_head.step([gw])
            tot, nb = tot + loss, nb + 1
        curve.append(tot / nb)
    tlog.phases["efc"] = curve


def rebalance_classifier(state: TaskState, x: np.ndarray, y: np.ndarray,
                         config: TrainConfig, tlog: TaskLog,
                         current_features: np.ndarray | None = None) -> None:
    """Retrain the full head on class-balanced mixes of pseudo-features and
    frozen current-task features. The backbone is not touched."""
    if state.task == 0 or config.rebalance_epochs == 0:
        return
    if len(state.store) == 0:
        raise ValueError("rebalancing needs stored prototypes after the first task")
    head = state.head
    start, stop = head.ranges[-1]
    feats = state.extractor.features(x) if current_features is None else current_features
    current = {c: feats[y == c] for c in range(start, stop)}
    all_classes = np.arange(head.num_classes)
    per_class = max(len(x) // (stop - start), 1)
    steps = -(-per_class * len(all_classes) // config.batch_size)
    opt = make_optimizer(config.rebalance_optimizer, [head.weights], config.lr_rebalance)
    curve = []
    for _ in range(config.rebalance_epochs):
        labels = class_quota_labels(all_classes, config.batch_size, steps, state.rng)
        grid, _ = _fill_features(labels, current, state.store, feats.shape[1], state.rng)
        tot = 0.0
        for s in range(steps):
            loss, dlog = softmax_cross_entropy(grid[s] @ head.weights, labels[s])
            _check(loss, "rebalance", state.task)
            opt.step([grid[s].T @ dlog])
            tot += loss
        curve.append(tot / steps)
    tlog.phases["rebalance"] = curve


# --------------------------------------------------------------------------- task loop


def run_task(state: TaskState, x: np.ndarray, y: np.ndarray, num_new: int,
             config: TrainConfig) -> tuple[TaskState, TaskLog]:
    """One task boundary for any strategy. ``state`` is advanced in place."""
    state.task += 1
    t = state.task
    tlog = TaskLog(t)
    state.head = expand_head(state.head, num_new, state.rng)
    start, stop = state.head.ranges[-1]
    clock = time.perf_counter

    strategy = config.strategy
    uses_protos = strategy != "finetune"
    tic = clock()
    prev_features = None
    if t == 0:
        train_first_task(state, x, y, config, tlog)
    else:
        prev_features = state.snapshot.features(x)
        if strategy == "finetune":
            train_finetune(state, x, y, config, tlog)
        elif strategy == "efc":
            train_efc(state, x, y, prev_features, config, tlog)
        else:
            train_backbone(state, x, y, prev_features, config, tlog)
    tlog.timing["train"] = clock() - tic

    feats = state.extractor.features(x)
    if uses_protos and t > 0 and config.drift.enabled:
        tic = clock()
        compensate_drift(state.store, state.efm.matrix, prev_features, feats, config.drift)
        tlog.timing["drift"] = clock() - tic

    if strategy in ("efcpp", "reg_ablation"):
        tic = clock()
        rebalance_classifier(state, x, y, config, tlog, current_features=feats)
        tlog.timing["rebalance"] = clock() - tic

    tic = clock()
    if uses_protos:
        state.store.add(compute_class_stats(feats, y, range(start, stop), t))
        state.efm = dataset_efm(None, state.head, feats, task_index=t, precomputed=True)
        if config.regularizer.kind == "efm" and t == 0:
            regs.check_elastic_constraint(state.efm.matrix, config.regularizer)
    if config.regularizer.kind == "efim" and strategy != "finetune":
        state.fisher = regs.diag_efim_estimate(state.extractor, state.head, x)
    state.snapshot = ModelSnapshot(state.extractor)
    tlog.timing["consolidate"] = clock() - tic
    return state, tlog


@dataclass
class RunResult:
    accuracy: AccuracyMatrix
    logs: list[TaskLog]
    state: TaskState
    probes: dict[str, list] = field(default_factory=dict)

    @property
    def report(self) -> MetricsReport:
        return MetricsReport.from_matrix(self.accuracy)


Probe = Callable[[TaskStream, TaskState, "ModelSnapshot | None", int], object]


def evaluate(stream: TaskStream, state: TaskState, k: int) -> list[float]:
    out = []
    for i in range(k + 1):
        xt, yt = stream.test_data(i)
        logits = state.head.logits(state.extractor.features(xt))
        out.append(class_accuracy(logits, yt))
    return out


def run_stream(stream: TaskStream, config: TrainConfig,
               probes: dict[str, Probe] | None = None) -> RunResult:
    """Train every task in order and fill the accuracy matrix.

    Each probe is called after every task with (stream, state, previous
    snapshot, task index); its return values are collected per name.
    """
    state = TaskState.initial(stream.input_dim, config)
    acc = AccuracyMatrix(stream.class_counts, stream.start_index)
    logs = []
    collected = {name: [] for name in (probes or {})}
    for k, task in enumerate(stream.tasks):
        stream.open_task(k)
        x, y = stream.train_data(k)
        prev_snapshot = state.snapshot
        state, tlog = run_task(state, x, y, task.num_classes, config)
        for i, a in enumerate(evaluate(stream, state, k)):
            acc.set(k, i, a)
        tlog.A_step = per_step_accuracy(acc, k)
        logs.append(tlog)
        for name, probe in (probes or {}).items():
            collected[name].append(probe(stream, state, prev_snapshot, k))
        log.info("task %d done: A_step=%.4f", k, tlog.A_step)
    return RunResult(acc, logs, state, collected)
