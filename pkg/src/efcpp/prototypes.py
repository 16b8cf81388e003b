"""Gaussian class prototypes and EFM-weighted drift compensation."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import batch_quadratic_form, read_matrix, ridge_cholesky, sample_gaussian, write_matrix

log = logging.getLogger(__name__)

WEIGHT_FLOOR = 1e-300


@dataclass
class ClassPrototype:
    class_id: int
    mean: np.ndarray
    cov: np.ndarray
    origin_task: int
    _chol: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.cov.setflags(write=False)

    @property
    def chol(self) -> np.ndarray:
        # covariances never change, so the factor is cached for the lifetime
        if self._chol is None:
            self._chol = ridge_cholesky(self.cov)
        return self._chol


@dataclass
class DriftCompensationConfig:
    sigma2: float = 0.09
    enabled: bool = True

    def __post_init__(self):
        if self.sigma2 <= 0:
            raise ValueError("sigma2 must be > 0")


class PrototypeStore:
    """Class id -> prototype. Append-only except for drift updates of the means."""

    def __init__(self, diagonal_cov: bool = False):
        self._protos: dict[int, ClassPrototype] = {}
        self.diagonal_cov = diagonal_cov

    def __len__(self) -> int:
        return len(self._protos)

    def __contains__(self, c: int) -> bool:
        return c in self._protos

    def __getitem__(self, c: int) -> ClassPrototype:
        return self._protos[c]

    @property
    def class_ids(self) -> list[int]:
        return sorted(self._protos)

    def means(self) -> dict[int, np.ndarray]:
        return {c: p.mean.copy() for c, p in self._protos.items()}

    def add(self, protos: list[ClassPrototype]) -> None:
        for p in protos:
            if p.class_id in self._protos:
                raise ValueError(f"class {p.class_id} already has a prototype")
            if self.diagonal_cov:
                p = ClassPrototype(p.class_id, p.mean, np.diag(np.diag(p.cov)), p.origin_task)
            self._protos[p.class_id] = p

    def shift_means(self, shifts: dict[int, np.ndarray]) -> None:
        for c, d in shifts.items():
            p = self._protos[c]
            p.mean = p.mean + d

    def copy(self) -> "PrototypeStore":
        other = PrototypeStore(self.diagonal_cov)
        for c, p in self._protos.items():
            other._protos[c] = ClassPrototype(c, p.mean.copy(), p.cov, p.origin_task, p._chol)
        return other

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = []
        for c in self.class_ids:
            p = self._protos[c]
            write_matrix(directory / f"class{c}_mean.efmm", p.mean[None, :])
            write_matrix(directory / f"class{c}_cov.efmm", p.cov)
            index.append({"class_id": c, "origin_task": p.origin_task,
                          "mean": f"class{c}_mean.efmm", "cov": f"class{c}_cov.efmm"})
        (directory / "prototypes.json").write_text(
            json.dumps({"diagonal_cov": self.diagonal_cov, "classes": index}, indent=2))

    @classmethod
    def load(cls, directory) -> "PrototypeStore":
        directory = Path(directory)
        meta = json.loads((directory / "prototypes.json").read_text())
        store = cls(meta["diagonal_cov"])
        for e in meta["classes"]:
            store._protos[e["class_id"]] = ClassPrototype(
                e["class_id"], read_matrix(directory / e["mean"])[0],
                read_matrix(directory / e["cov"]), e["origin_task"])
        return store


def compute_class_stats(features: np.ndarray, labels: np.ndarray, class_ids,
                        origin_task: int) -> list[ClassPrototype]:
    """Per-class feature mean and population covariance."""
    out = []
    for c in class_ids:
        f = features[labels == c]
        if f.shape[0] < 2:
            raise ValueError(f"class {c} has {f.shape[0]} samples; need at least 2")
        mu = f.mean(axis=0)
        d = f - mu
        cov = d.T @ d / f.shape[0]
        out.append(ClassPrototype(int(c), mu, 0.5 * (cov + cov.T), origin_task))
    return out


def sample_pseudo_features(store: PrototypeStore, class_ids, counts,
                           rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian pseudo-features; ``counts`` is an int or one count per class."""
    class_ids = list(class_ids)
    if np.isscalar(counts):
        counts = [int(counts)] * len(class_ids)
    feats, labels = [], []
    for c, k in zip(class_ids, counts):
        if c not in store:
            raise KeyError(f"no prototype for class {c}")
        if k == 0:
            continue
        p = store[c]
        feats.append(sample_gaussian(p.mean, p.cov, int(k), rng, chol=p.chol))
        labels.append(np.full(int(k), c, dtype=np.intp))
    if not feats:
        n = store[class_ids[0]].mean.shape[0] if class_ids else 0
        return np.zeros((0, n)), np.zeros(0, dtype=np.intp)
    return np.concatenate(feats), np.concatenate(labels)


def drift_weights(old_features: np.ndarray, prototype: np.ndarray, efm: np.ndarray,
                  sigma2: float) -> tuple[np.ndarray, float]:
    """Normalised kernel weights and log of the raw weight sum.

    Raw weights are exp(-(f - p)^T E (f - p) / (2 sigma2)); the exponent is
    shifted by its maximum before exponentiating.
    """
    d = old_features - prototype
    expo = -batch_quadratic_form(efm, d) / (2.0 * sigma2)
    top = float(np.max(expo))
    w = np.exp(expo - top)
    log_sum = top + float(np.log(w.sum()))
    return w / w.sum(), log_sum


def compensate_drift(store: PrototypeStore, efm_prev: np.ndarray, old_features: np.ndarray,
                     new_features: np.ndarray, config: DriftCompensationConfig,
                     class_ids=None) -> dict[int, np.ndarray]:
    """Shift stored means by the EFM-weighted mean drift of current-task samples.

    ``old_features``/``new_features`` are f_{t-1}(x_i) and f_t(x_i) over all
    current-task training samples. Returns the applied shifts.
    """
    if old_features.shape != new_features.shape:
        raise ValueError("old and new feature batches must align")
    if old_features.shape[0] == 0:
        raise ValueError("drift compensation needs current-task samples")
    delta = new_features - old_features
    shifts = {}
    for c in (store.class_ids if class_ids is None else class_ids):
        w, log_sum = drift_weights(old_features, store[c].mean, efm_prev, config.sigma2)
        if log_sum < np.log(WEIGHT_FLOOR):
            log.debug("class %d: raw weight sum underflows (log %.1f); using shifted weights",
                      c, log_sum)
        shifts[c] = w @ delta
    store.shift_means(shifts)
    return shifts
