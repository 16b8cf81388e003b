"""Dense symmetric linear algebra used throughout the package.

Matrices are plain float64 ``numpy.ndarray`` objects. The symmetric
eigensolver is a cyclic Jacobi method with a round-robin (parallel) pair
ordering, so each round applies n/2 disjoint rotations as one vectorised
update.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"EFMM"

SYMMETRY_ATOL = 1e-9
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
PSD_CLAMP = 1e-9
DEFAULT_RANK_TOL = 1e-8


class LinalgError(ValueError):
    """Raised on dimension or symmetry violations."""


class FactorizationError(ArithmeticError):
    """Raised when a covariance cannot be factorised even after ridging."""


@dataclass(frozen=True)
class SymEigResult:
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns are orthonormal

    def reconstruct(self) -> np.ndarray:
        u = self.eigenvectors
        return (u * self.eigenvalues) @ u.T


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise LinalgError(f"{name} must be 2-D, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise LinalgError(f"{name} has non-finite entries")
    return m


def check_symmetric(s: np.ndarray, atol: float = SYMMETRY_ATOL) -> None:
    if s.shape[0] != s.shape[1]:
        raise LinalgError(f"expected a square matrix, got {s.shape}")
    asym = np.max(np.abs(s - s.T)) if s.size else 0.0
    if asym > atol:
        raise LinalgError(f"matrix is not symmetric (max |s - s^T| = {asym:.3e})")


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for one Jacobi sweep: n-1 rounds of disjoint (p, q) pairs."""
    players = list(range(n)) + ([-1] if n % 2 else [])
    k = len(players)
    rounds = []
    for _ in range(k - 1):
        ps, qs = [], []
        for i in range(k // 2):
            a, b = players[i], players[k - 1 - i]
            if a < 0 or b < 0:
                continue
            ps.append(min(a, b))
            qs.append(max(a, b))
        rounds.append((np.array(ps, dtype=np.intp), np.array(qs, dtype=np.intp)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def sym_eig(s, psd: bool = False, tol: float = JACOBI_TOL,
            max_sweeps: int = JACOBI_MAX_SWEEPS) -> SymEigResult:
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi.

    Iterates until the off-diagonal Frobenius mass falls below
    ``tol`` times the diagonal mass, then runs one polishing sweep. With ``psd=True`` eigenvalues in
    ``[-1e-9 * scale, 0)`` are clamped to zero.
    """
    a = as_matrix(s).copy()
    check_symmetric(a)
    n = a.shape[0]
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    if n > 1:
        rounds = _round_robin(n)
        polished = False
        for _ in range(max_sweeps):
            diag_mass = np.linalg.norm(np.diag(a))
            off_mass = np.sqrt(2.0) * np.linalg.norm(np.triu(a, 1))
            if off_mass == 0.0 or (off_mass <= tol * diag_mass and polished):
                break
            if off_mass <= tol * diag_mass:
                # one more sweep: convergence is quadratic, and it sharpens
                # eigenvectors of tightly clustered (e.g. null-space) eigenvalues
                polished = True
            for p, q in rounds:
                apq = a[p, q]
                active = apq != 0.0
                if not np.any(active):
                    continue
                p, q, apq = p[active], q[active], apq[active]
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
                t[theta == 0.0] = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * c

                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - sn * aq
                a[:, q] = sn * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c[:, None] * ap - sn[:, None] * aq
                a[q, :] = sn[:, None] * ap + c[:, None] * aq
                a[p, q] = 0.0
                a[q, p] = 0.0

                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - sn * vq
                v[:, q] = sn * vp + c * vq
        else:
            raise ArithmeticError(f"Jacobi did not converge in {max_sweeps} sweeps")

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    w, v = w[order], v[:, order]
    if psd and n:
        scale = max(1.0, float(np.max(np.abs(w))))
        w[(w < 0.0) & (w >= -PSD_CLAMP * scale)] = 0.0
    return SymEigResult(eigenvalues=w, eigenvectors=v)


def quadratic_form(s, v) -> float:
    s = as_matrix(s)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or s.shape != (v.shape[0], v.shape[0]):
        raise LinalgError(f"shape mismatch: matrix {s.shape}, vector {v.shape}")
    return float(v @ s @ v)


def batch_quadratic_form(s: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Row-wise v^T s v for a batch of vectors stacked as rows."""
    if vs.ndim != 2 or s.shape != (vs.shape[1], vs.shape[1]):
        raise LinalgError(f"shape mismatch: matrix {s.shape}, batch {vs.shape}")
    return np.sum((vs @ s) * vs, axis=1)


def ridge_cholesky(cov, eps0: float = 1e-8, max_tries: int = 20) -> np.ndarray:
    """Lower Cholesky factor of ``cov + eps * trace/dim * I``.

    ``eps`` starts at ``eps0`` and grows tenfold until the factorisation
    succeeds. A zero matrix yields a zero factor.
    """
    cov = as_matrix(cov, "cov")
    check_symmetric(cov)
    d = cov.shape[0]
    scale = np.trace(cov) / d if d else 0.0
    if scale == 0.0 and not np.any(cov):
        return np.zeros_like(cov)
    if scale <= 0.0:
        raise FactorizationError("covariance has non-positive trace")
    eps = eps0
    for _ in range(max_tries):
        try:
            return np.linalg.cholesky(cov + eps * scale * np.eye(d))
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise FactorizationError(f"Cholesky failed up to ridge {eps / 10:.1e}")


def sample_gaussian(mean, cov, count: int, rng: np.random.Generator,
                    chol: np.ndarray | None = None) -> np.ndarray:
    """Draw ``count`` rows from N(mean, cov). Pass ``chol`` to reuse a factor."""
    mean = np.asarray(mean, dtype=np.float64)
    if chol is None:
        chol = ridge_cholesky(cov)
    if chol.shape != (mean.shape[0], mean.shape[0]):
        raise LinalgError(f"mean {mean.shape} does not match cov {chol.shape}")
    z = rng.standard_normal((count, mean.shape[0]))
    return mean + z @ chol.T


def numerical_rank(eigenvalues, rel_tol: float = DEFAULT_RANK_TOL) -> int:
    ev = np.asarray(eigenvalues, dtype=np.float64)
    if ev.size == 0:
        return 0
    top = float(np.max(ev))
    if top <= 0.0:
        return 0
    return int(np.sum(ev > rel_tol * top))


def write_matrix(path, m) -> None:
    m = np.ascontiguousarray(as_matrix(m), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", *m.shape))
        fh.write(m.tobytes())


def read_matrix(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise LinalgError(f"{path}: bad magic {raw[:4]!r}")
    rows, cols = struct.unpack("<II", raw[4:12])
    payload = raw[12:]
    if len(payload) != 8 * rows * cols:
        raise LinalgError(f"{path}: payload size {len(payload)} != 8*{rows}*{cols}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
