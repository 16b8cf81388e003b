"""Empirical Feature Matrix: construction, pseudo-metric and spectral diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import (DEFAULT_RANK_TOL, SymEigResult, batch_quadratic_form,
                     numerical_rank, quadratic_form, sym_eig)
from .model import ClassifierHead, FeatureExtractor, ShapeError, softmax


@dataclass(frozen=True)
class EmpiricalFeatureMatrix:
    matrix: np.ndarray
    task_index: int
    num_classes: int
    sample_count: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    rank: int


def local_efm(features, head: ClassifierHead | np.ndarray) -> np.ndarray:
    """E[(W (I_m - P)_y)(W (I_m - P)_y)^T] over y ~ softmax(W^T f).

    ``(I_m - P)_y`` is the y-th row of the log-softmax Jacobian, i.e.
    ``e_y - p``; the expectation is taken exactly over all m classes.
    """
    w = head.weights if isinstance(head, ClassifierHead) else np.asarray(head)
    f = np.asarray(features, dtype=np.float64)
    if f.ndim != 1 or f.shape[0] != w.shape[0]:
        raise ShapeError(f"features {f.shape} do not match head {w.shape}")
    m = w.shape[1]
    p = softmax(f @ w)
    jac = np.eye(m) - np.outer(np.ones(m), p)
    v = w @ jac.T  # column y = W (e_y - p)
    e = (v * p) @ v.T
    return 0.5 * (e + e.T)


def _efm_sum(feats: np.ndarray, w: np.ndarray) -> np.ndarray:
    # sum_i W (diag p_i - p_i p_i^T) W^T, which equals the sum of local_efm
    p = softmax(feats @ w)
    middle = np.diag(p.sum(axis=0)) - p.T @ p
    return w @ middle @ w.T


def dataset_efm(extractor: FeatureExtractor | None, head: ClassifierHead, data,
                task_index: int = 0, chunk: int = 512,
                precomputed: bool = False) -> EmpiricalFeatureMatrix:
    """Mean local EFM over a dataset, accumulated as a running mean in chunks.

    With ``precomputed=True`` ``data`` already holds features and
    ``extractor`` is ignored.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("dataset_efm needs a non-empty 2-D sample array")
    w = head.weights
    n = w.shape[0]
    mean = np.zeros((n, n))
    seen = 0
    for start in range(0, x.shape[0], chunk):
        block = x[start:start + chunk]
        feats = block if precomputed else extractor.features(block)
        k = block.shape[0]
        # running mean: mean += (sum - k*mean) / (seen + k)
        mean += (_efm_sum(feats, w) - k * mean) / (seen + k)
        seen += k
    mean = 0.5 * (mean + mean.T)
    return EmpiricalFeatureMatrix(mean, task_index, head.num_classes, seen)


def kl_quadratic(efm, delta) -> float:
    """The pseudo-metric delta^T E delta."""
    e = efm.matrix if isinstance(efm, EmpiricalFeatureMatrix) else efm
    return quadratic_form(e, delta)


def kl_divergence(head: ClassifierHead | np.ndarray, features, delta) -> float:
    """Exact KL(p(y | f + delta) || p(y | f)) for the softmax head."""
    w = head.weights if isinstance(head, ClassifierHead) else np.asarray(head)
    f = np.asarray(features, dtype=np.float64)
    p = softmax(f @ w)
    a = np.asarray(delta, dtype=np.float64) @ w
    # log q - log p = a - log sum_i p_i e^{a_i}, formed without subtracting two
    # O(1) log-probabilities so tiny deltas keep full relative precision
    shift = np.log1p(np.sum(p * np.expm1(a), axis=-1, keepdims=True))
    diff = a - shift
    return float(np.sum(p * np.exp(diff) * diff))


def spectrum_analysis(efm, rel_tol: float = DEFAULT_RANK_TOL) -> Spectrum:
    e = efm.matrix if isinstance(efm, EmpiricalFeatureMatrix) else np.asarray(efm)
    res: SymEigResult = sym_eig(e, psd=True)
    return Spectrum(res.eigenvalues, res.eigenvectors,
                    numerical_rank(res.eigenvalues, rel_tol))


def default_perturbation_scale(spectrum: Spectrum) -> float:
    if spectrum.rank == 0:
        return 0.0
    return 0.5 * float(np.sqrt(np.sum(spectrum.eigenvalues) / spectrum.rank))


def within_class_scale(features: np.ndarray, labels: np.ndarray) -> float:
    """Root mean per-coordinate within-class variance of a labelled feature set."""
    f = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    sq = 0.0
    for c in np.unique(labels):
        d = f[labels == c] - f[labels == c].mean(axis=0)
        sq += float(np.sum(d * d))
    return float(np.sqrt(sq / f.size))


@dataclass
class PerturbationReport:
    mode: str
    noise_scale: float
    rank: int
    mean_abs_softmax_dev: float
    max_abs_softmax_dev: float
    accuracy_clean: float
    accuracy_perturbed: float

    @property
    def accuracy_delta(self) -> float:
        return self.accuracy_perturbed - self.accuracy_clean


def perturb_features(features: np.ndarray, spectrum: Spectrum, noise_scale: float,
                     mode: str, rng: np.random.Generator,
                     radius: float | None = None) -> np.ndarray:
    """f + U eps with Gaussian eps on the first k (principal) or last n-k coordinates.

    With ``radius`` every perturbation is rescaled to exactly that norm, so
    the two modes can be compared at equal size.
    """
    n = features.shape[1]
    k = spectrum.rank
    if mode == "principal":
        if k == 0:
            raise ValueError("principal perturbation needs a non-zero spectrum")
        cols = slice(0, k)
    elif mode == "non-principal":
        cols = slice(k, n)
    else:
        raise ValueError(f"unknown perturbation mode {mode!r}")
    eps = np.zeros_like(features)
    width = len(range(n)[cols])
    eps[:, cols] = noise_scale * rng.standard_normal((features.shape[0], width))
    if radius is not None:
        norms = np.linalg.norm(eps, axis=1, keepdims=True)
        eps = np.where(norms > 0.0, eps * (radius / np.where(norms > 0.0, norms, 1.0)), 0.0)
    return features + eps @ spectrum.eigenvectors.T


def perturbation_report(extractor: FeatureExtractor, head: ClassifierHead,
                        spectrum: Spectrum, data: np.ndarray, labels: np.ndarray,
                        noise_scale: float, mode: str,
                        rng: np.random.Generator,
                        radius: float | None = None) -> PerturbationReport:
    feats = extractor.features(data)
    p_clean = softmax(head.logits(feats))
    pert = perturb_features(feats, spectrum, noise_scale, mode, rng, radius)
    p_pert = softmax(head.logits(pert))
    dev = np.abs(p_pert - p_clean)
    labels = np.asarray(labels)
    return PerturbationReport(
        mode=mode,
        noise_scale=float(noise_scale),
        rank=spectrum.rank,
        mean_abs_softmax_dev=float(dev.mean()),
        max_abs_softmax_dev=float(dev.max()),
        accuracy_clean=float(np.mean(np.argmax(p_clean, axis=1) == labels)),
        accuracy_perturbed=float(np.mean(np.argmax(p_pert, axis=1) == labels)),
    )


__all__ = [
    "EmpiricalFeatureMatrix", "Spectrum", "PerturbationReport", "local_efm",
    "dataset_efm", "kl_quadratic", "kl_divergence", "spectrum_analysis",
    "perturbation_report", "perturb_features", "default_perturbation_scale",
    "within_class_scale",
    "batch_quadratic_form",
]
