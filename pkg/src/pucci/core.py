"""Pucci extremal operators on small symmetric matrices.

The maximal operator weights positive Hessian eigenvalues by ``Lambda`` and
negative ones by ``lambda``; the minimal operator swaps the weights.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MAX_DIM = 8
_SYM_TOL = 0.0


class NotSymmetricError(ValueError):
    pass


class EigenError(RuntimeError):
    pass


@dataclass(frozen=True)
class EllipticityPair:
    """Ellipticity constants ``0 < lam <= Lam`` of one Pucci operator."""

    lam: float
    Lam: float

    def __post_init__(self):
        lam, Lam = float(self.lam), float(self.Lam)
        if not (math.isfinite(lam) and math.isfinite(Lam)):
            raise ValueError(f"ellipticity constants must be finite, got ({lam}, {Lam})")
        if not 0 < lam <= Lam:
            raise ValueError(f"need 0 < lambda <= Lambda, got ({lam}, {Lam})")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "Lam", Lam)

    @property
    def ratio(self) -> float:
        return self.Lam / self.lam


def as_symmetric(M) -> np.ndarray:
    """Validate ``M`` as an N x N exactly-symmetric real matrix, 1 <= N <= 8."""
    A = np.asarray(M, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise NotSymmetricError(f"expected a square matrix, got shape {A.shape}")
    if not 1 <= A.shape[0] <= MAX_DIM:
        raise NotSymmetricError(f"dimension must be in 1..{MAX_DIM}, got {A.shape[0]}")
    if not np.all(np.isfinite(A)):
        raise NotSymmetricError("matrix has non-finite entries")
    if np.any(np.abs(A - A.T) > _SYM_TOL):
        raise NotSymmetricError("matrix is not symmetric")
    return A


def _jacobi_eigenvalues(A: np.ndarray, sweeps: int = 60) -> list[float]:
    # cyclic Jacobi on plain lists: faster than numpy for N <= 8
    n = A.shape[0]
    a = A.tolist()
    # stop once the off-diagonal mass is below roundoff of the whole matrix
    stop = (1e-18 * math.sqrt(sum(x * x for row in a for x in row))) ** 2
    for _ in range(sweeps):
        off = sum(a[p][q] * a[p][q] for p in range(n) for q in range(p + 1, n))
        if off <= stop:
            return [a[i][i] for i in range(n)]
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p][q]
                if apq == 0.0:
                    continue
                theta = (a[q][q] - a[p][p]) / (2.0 * apq)
                t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                for k in range(n):
                    akp, akq = a[k][p], a[k][q]
                    a[k][p] = c * akp - s * akq
                    a[k][q] = s * akp + c * akq
                for k in range(n):
                    apk, aqk = a[p][k], a[q][k]
                    a[p][k] = c * apk - s * aqk
                    a[q][k] = s * apk + c * aqk
    raise EigenError(f"Jacobi iteration did not converge in {sweeps} sweeps")


def eigenvalues(M) -> list[float]:
    """Eigenvalues of a symmetric matrix, closed form for N <= 2."""
    A = as_symmetric(M)
    n = A.shape[0]
    if n == 1:
        return [float(A[0, 0])]
    if n == 2:
        a, b, d = float(A[0, 0]), float(A[0, 1]), float(A[1, 1])
        mean = 0.5 * (a + d)
        rad = math.hypot(0.5 * (a - d), b)
        return [mean + rad, mean - rad]
    return _jacobi_eigenvalues(A)


def _weighted(eigs, pos_weight, neg_weight) -> float:
    pos = sum(e for e in eigs if e > 0)
    neg = sum(e for e in eigs if e < 0)
    return pos_weight * pos + neg_weight * neg


def pucci_plus(M, pair: EllipticityPair) -> float:
    return _weighted(eigenvalues(M), pair.Lam, pair.lam)


def pucci_minus(M, pair: EllipticityPair) -> float:
    return _weighted(eigenvalues(M), pair.lam, pair.Lam)


def theta(s, pair: EllipticityPair):
    """Branch weight: ``Lambda`` where ``s >= 0``, ``lambda`` where ``s < 0``."""
    if np.ndim(s) == 0:
        return pair.Lam if s >= 0 else pair.lam
    return np.where(np.asarray(s) >= 0, pair.Lam, pair.lam)


def theta_times(s, pair: EllipticityPair):
    """The increasing piecewise-linear map ``s -> theta(s) * s``."""
    if np.ndim(s) == 0:
        return pair.Lam * s if s >= 0 else pair.lam * s
    s = np.asarray(s, dtype=float)
    return np.where(s >= 0, pair.Lam * s, pair.lam * s)


def theta_solve(t, pair: EllipticityPair):
    """Inverse of :func:`theta_times`."""
    if np.ndim(t) == 0:
        return t / pair.Lam if t >= 0 else t / pair.lam
    t = np.asarray(t, dtype=float)
    return np.where(t >= 0, t / pair.Lam, t / pair.lam)
