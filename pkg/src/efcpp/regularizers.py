"""Feature-drift and weight-drift penalties, each returning (loss, gradient)."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .linalg import batch_quadratic_form, sym_eig
from .model import (ClassifierHead, FeatureExtractor, ShapeError, forward,
                    layer_deltas, softmax)

log = logging.getLogger(__name__)

REGULARIZERS = ("efm", "fd", "efim", "kd", "none")


@dataclass
class RegularizerConfig:
    kind: str = "efm"
    lambda_efm: float = 10.0
    eta: float = 0.1
    lambda_fd: float = 1.0
    fd_squared: bool = False
    lambda_efim: float = 100000.0
    lambda_kd: float = 50.0
    kd_temperature: float = 2.0

    def __post_init__(self):
        if self.kind not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {REGULARIZERS}, got {self.kind!r}")
        for name in ("lambda_efm", "eta", "lambda_fd", "lambda_efim", "lambda_kd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.kd_temperature <= 0:
            raise ValueError("kd_temperature must be > 0")


def check_elastic_constraint(efm: np.ndarray, cfg: RegularizerConfig) -> bool:
    """Warn when lambda * nu_max <= eta, i.e. the penalty is effectively isotropic."""
    nu_max = float(sym_eig(efm, psd=True).eigenvalues[0]) if efm.size else 0.0
    ok = cfg.lambda_efm * nu_max > cfg.eta
    if not ok:
        log.warning("lambda_efm * nu_max = %.3g <= eta = %.3g: EFM penalty "
                    "degenerates to feature distillation", cfg.lambda_efm * nu_max, cfg.eta)
    return ok


def efm_penalty(current: np.ndarray, previous: np.ndarray, efm_prev: np.ndarray,
                lambda_efm: float, eta: float) -> tuple[float, np.ndarray]:
    """mean_x delta^T (lambda E + eta I) delta, with delta = f_t - f_{t-1}."""
    if current.shape != previous.shape:
        raise ShapeError(f"feature batches differ: {current.shape} vs {previous.shape}")
    n = current.shape[1]
    if efm_prev.shape != (n, n):
        raise ShapeError(f"EFM {efm_prev.shape} does not match feature dim {n}")
    b = current.shape[0]
    metric = lambda_efm * efm_prev + eta * np.eye(n)
    delta = current - previous
    loss = float(np.mean(batch_quadratic_form(metric, delta)))
    grad = 2.0 * (delta @ metric) / b
    return loss, grad


def fd_penalty(current: np.ndarray, previous: np.ndarray, lambda_fd: float,
               squared: bool = False) -> tuple[float, np.ndarray]:
    """Feature distillation.

    Unsquared: ``lambda * sum_x ||delta||_2``. Squared: ``lambda * mean_x
    ||delta||^2``, which is the eta-only limit of the EFM penalty.
    """
    if current.shape != previous.shape:
        raise ShapeError(f"feature batches differ: {current.shape} vs {previous.shape}")
    delta = current - previous
    if squared:
        b = current.shape[0]
        loss = lambda_fd * float(np.mean(np.sum(delta * delta, axis=1)))
        return loss, 2.0 * lambda_fd * delta / b
    norms = np.linalg.norm(delta, axis=1)
    loss = lambda_fd * float(norms.sum())
    safe = np.where(norms > 0.0, norms, 1.0)
    grad = lambda_fd * delta / safe[:, None]
    grad[norms == 0.0] = 0.0
    return loss, grad


@dataclass
class DiagonalEFIM:
    importances: list[np.ndarray]  # per extractor parameter, F_t
    anchor: list[np.ndarray]  # theta*_{t-1}


def diag_efim_estimate(extractor: FeatureExtractor, head: ClassifierHead, data,
                       chunk: int = 512) -> DiagonalEFIM:
    """Diagonal Fisher over backbone parameters, exact expectation over y ~ p(y|x).

    Per-sample squared gradients of a dense layer factor as
    ``(a_i^2)^T (g_i^2)``, so each label costs one batched backward pass.
    """
    x = np.asarray(data, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("diag_efim_estimate needs a non-empty dataset")
    acc = [np.zeros_like(p) for p in extractor.params()]
    m = head.num_classes
    for start in range(0, x.shape[0], chunk):
        cache = forward(extractor, head, x[start:start + chunk])
        p = softmax(cache.logits)
        sq_inputs = [a * a for a in cache.inputs]
        for y in range(m):
            # d log p_y / d logits = e_y - p, weighted by sqrt(p_y) so squares carry p_y
            dlogits = -p.copy()
            dlogits[:, y] += 1.0
            dlogits *= np.sqrt(p[:, y])[:, None]
            deltas = layer_deltas(extractor, cache, dlogits @ head.weights.T)
            for i, g in enumerate(deltas):
                g2 = g * g
                acc[2 * i] += sq_inputs[i].T @ g2
                acc[2 * i + 1] += g2.sum(axis=0)
    importances = [a / x.shape[0] for a in acc]
    return DiagonalEFIM(importances, [p.copy() for p in extractor.params()])


def ewc_penalty(params: list[np.ndarray], anchor: DiagonalEFIM,
                lambda_efim: float) -> tuple[float, list[np.ndarray]]:
    if len(params) != len(anchor.importances):
        raise ShapeError("parameter list does not match the Fisher anchor")
    loss = 0.0
    grads = []
    for p, f, a in zip(params, anchor.importances, anchor.anchor):
        if p.shape != f.shape:
            raise ShapeError(f"parameter {p.shape} vs importance {f.shape}")
        d = p - a
        loss += float(np.sum(f * d * d))
        grads.append(2.0 * lambda_efim * f * d)
    return lambda_efim * loss, grads


def kd_penalty(current_logits: np.ndarray, previous_logits: np.ndarray,
               temperature: float, lambda_kd: float) -> tuple[float, np.ndarray]:
    """Soft-target cross-entropy over old-class columns, mean over the batch."""
    if current_logits.shape != previous_logits.shape:
        raise ShapeError(f"logit slices differ: {current_logits.shape} vs {previous_logits.shape}")
    b = current_logits.shape[0]
    t = temperature
    q_old = softmax(previous_logits / t)
    z = current_logits / t
    z = z - z.max(axis=1, keepdims=True)
    logq_new = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -lambda_kd * float(np.mean(np.sum(q_old * logq_new, axis=1)))
    grad = lambda_kd * (np.exp(logq_new) - q_old) / (t * b)
    return loss, grad
