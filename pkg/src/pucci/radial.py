"""Radial solver for ``-M+(D^2 u) = g(|x|)`` on the ball ``B_R``.

For a radial profile the Hessian has eigenvalue ``u''`` once and ``u'/r``
with multiplicity ``N - 1``, so the equation reads

    -theta(u'') u'' - (N - 1)/r theta(u') u' = g,   u'(0) = 0,  u(R) = 0.

We discretise with centred differences and solve the discrete equations by an
outward march. The unknown at each step is the next increment
``w_k = u_{k+1} - u_k``; the discrete equation is strictly increasing and
piecewise linear in ``w_k``, so it has exactly one root, found by trying the
four branch combinations. The equations only see differences of ``u``, so
the profile is fixed afterwards by the boundary condition ``u(R) = 0``.
"""
from __future__ import annotations

import csv
import functools
import io
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .core import EllipticityPair, theta_solve, theta_times
from .state import SystemState, require_same_grid

DEFAULT_M = 4096


class RadialSolveError(RuntimeError):
    pass


class EigenConvergenceError(RuntimeError):
    def __init__(self, message, gap):
        super().__init__(message)
        self.gap = gap


@dataclass(frozen=True)
class RadialGrid:
    R: float
    N: int
    M: int = DEFAULT_M

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError(f"R must be positive, got {self.R}")
        if not 1 <= self.N <= 8:
            raise ValueError(f"N must be in 1..8, got {self.N}")
        if self.M < 16:
            raise ValueError(f"need at least 16 cells, got M={self.M}")

    @property
    def h(self) -> float:
        return self.R / self.M

    @cached_property
    def r(self) -> np.ndarray:
        r = np.linspace(0.0, self.R, self.M + 1)
        r.setflags(write=False)
        return r

    @property
    def shape(self) -> tuple[int]:
        return (self.M + 1,)

    @cached_property
    def interior(self) -> np.ndarray:
        mask = np.ones(self.M + 1, dtype=bool)
        mask[-1] = False
        mask.setflags(write=False)
        return mask

    def solve(self, load, pair: EllipticityPair, **_) -> np.ndarray:
        return march(load, pair, self)[0]

    def apply(self, u, pair: EllipticityPair) -> np.ndarray:
        return apply_pucci(u, pair, self)

    def refine(self, factor: int = 2) -> "RadialGrid":
        return RadialGrid(self.R, self.N, self.M * factor)


@dataclass(frozen=True, eq=False)
class RadialField:
    grid: RadialGrid
    values: np.ndarray
    derivative: np.ndarray | None = None

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError(f"expected {self.grid.shape[0]} samples, got {vals.shape}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        if self.derivative is not None:
            der = np.array(self.derivative, dtype=float)
            der.setflags(write=False)
            object.__setattr__(self, "derivative", der)

    @property
    def R(self) -> float:
        return self.grid.R

    @property
    def norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def __call__(self, r):
        """Piecewise-linear interpolation; zero outside ``[0, R]``."""
        r = np.asarray(r, dtype=float)
        return np.interp(r, self.grid.r, self.values, left=self.values[0], right=0.0)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["r", "value", "derivative"])
        der = self.derivative if self.derivative is not None else [math.nan] * len(self.values)
        for r, v, d in zip(self.grid.r, self.values, der):
            w.writerow([f"{r:.17g}", f"{v:.17g}", f"{d:.17g}"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    @classmethod
    def from_csv(cls, text: str, N: int) -> "RadialField":
        rows = list(csv.reader(io.StringIO(text)))[1:]
        data = np.array([[float(x) for x in row] for row in rows])
        r = data[:, 0]
        grid = RadialGrid(float(r[-1]), N, len(r) - 1)
        der = data[:, 2] if not np.all(np.isnan(data[:, 2])) else None
        return cls(grid, data[:, 1], der)


def _as_load(g, grid: RadialGrid) -> np.ndarray:
    if isinstance(g, RadialField):
        require_same_grid(g.grid, grid)
        g = g.values
    g = np.broadcast_to(np.asarray(g, dtype=float), grid.shape)
    if not np.all(np.isfinite(g)):
        k = int(np.flatnonzero(~np.isfinite(g))[0])
        raise RadialSolveError(f"non-finite load at node {k} (r={grid.r[k]:.6g})")
    if np.any(g < 0):
        k = int(np.flatnonzero(g < 0)[0])
        raise RadialSolveError(f"negative load {g[k]:.3e} at node {k} (r={grid.r[k]:.6g})")
    return g


def _upwind(k: int, N: int, pair: EllipticityPair) -> bool:
    """True where the centred slope would give a negative neighbour weight."""
    return (N - 1) * pair.Lam > 2.0 * k * pair.lam


def march(g, pair: EllipticityPair, grid: RadialGrid) -> tuple[np.ndarray, np.ndarray]:
    """Discrete solution and centred derivative of ``-M+(D^2 u) = g``, ``u(R) = 0``."""
    g = _as_load(g, grid)
    M, N, h = grid.M, grid.N, grid.h
    lam, Lam = pair.lam, pair.Lam
    load = (g * (h * h)).tolist()
    w = [0.0] * M
    # at r = 0 the Hessian is u''(0) I and u_{-1} = u_1
    w[0] = 0.5 * theta_solve(-load[0] / N, pair)
    wp = w[0]
    # (weight, positive-branch flag) for the second difference and the slope
    branches = ((lam, False, lam, False), (Lam, True, lam, False),
                (lam, False, Lam, True), (Lam, True, Lam, True))
    for k in range(1, M):
        c = (N - 1) / (2.0 * k)
        rhs = -load[k]
        # centred slope w + wp unless it breaks monotonicity near the axis,
        # then the forward slope 2w
        up = _upwind(k, N, pair)
        for a, apos, b, bpos in branches:
            if up:
                x = (rhs + a * wp) / (a + 2.0 * c * b)
                d1 = x
            else:
                x = (rhs + (a - c * b) * wp) / (a + c * b)
                d1 = x + wp
            d2 = x - wp
            if (d2 == 0 or (d2 > 0) == apos) and (d1 == 0 or (d1 > 0) == bpos):
                break
        else:  # pragma: no cover - the map is a strictly increasing bijection
            raise RadialSolveError(f"no consistent branch at node {k}")
        if not math.isfinite(x):
            raise RadialSolveError(f"non-finite increment at node {k} (r={k * h:.6g})")
        w[k] = x
        wp = x
    w = np.array(w)
    u = np.empty(M + 1)
    u[0] = 0.0
    np.cumsum(w, out=u[1:])
    u -= u[-1]
    u[-1] = 0.0
    du = np.empty(M + 1)
    du[0] = 0.0
    du[1:M] = (w[1:] + w[:-1]) / (2 * h)
    du[M] = (3 * u[M] - 4 * u[M - 1] + u[M - 2]) / (2 * h)
    return u, du


def apply_pucci(u, pair: EllipticityPair, grid: RadialGrid) -> np.ndarray:
    """Discrete ``M+(D^2 u)`` at every node (the entry at ``r = R`` is 0)."""
    u = np.asarray(u, dtype=float)
    M, N, h = grid.M, grid.N, grid.h
    out = np.zeros(M + 1)
    out[0] = N * theta_times(2.0 * (u[1] - u[0]) / (h * h), pair)
    d2 = (u[2:] - 2.0 * u[1:-1] + u[:-2]) / (h * h)
    d1 = (u[2:] - u[:-2]) / (2.0 * h)
    k = np.arange(1, M)
    up = (N - 1) * pair.Lam > 2.0 * k * pair.lam
    d1[up] = (u[2:][up] - u[1:-1][up]) / h
    out[1:M] = theta_times(d2, pair) + (N - 1) / grid.r[1:M] * theta_times(d1, pair)
    return out


def solve_radial(g, pair: EllipticityPair, grid: RadialGrid | None = None) -> RadialField:
    """Solve ``-M+(D^2 u) = g`` radially with ``u'(0) = 0``, ``u(R) = 0``."""
    if grid is None:
        if not isinstance(g, RadialField):
            raise TypeError("pass a RadialField or an explicit grid")
        grid = g.grid
    u, du = march(g, pair, grid)
    return RadialField(grid, u, du)


@functools.lru_cache(maxsize=64)
def torsion(pair: EllipticityPair, grid: RadialGrid) -> RadialField:
    """Torsion function: ``-M+(D^2 e) = 1`` in ``B_R``, ``e = 0`` on the sphere."""
    return solve_radial(np.ones(grid.shape), pair, grid)


@functools.lru_cache(maxsize=64)
def principal_eigenpair(pair: EllipticityPair, grid: RadialGrid, tol: float = 1e-10,
                        max_iter: int = 500) -> tuple[float, RadialField]:
    """Principal eigenpair of ``-M+`` on ``B_R`` by inverse power iteration.

    Returns ``(mu, phi)`` with ``phi > 0`` on ``[0, R)`` and ``max phi = 1``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    r = grid.r
    phi = 1.0 - (r / grid.R) ** 2
    mu_prev = None
    gap = math.inf
    for _ in range(max_iter):
        nxt, dnxt = march(phi, pair, grid)
        peak = float(nxt.max())
        mu = 1.0 / peak
        phi = nxt / peak
        if mu_prev is not None:
            gap = abs(mu - mu_prev)
            if gap < tol * mu:
                return mu, RadialField(grid, phi, dnxt / peak)
        mu_prev = mu
    raise EigenConvergenceError(
        f"inverse power iteration did not converge in {max_iter} steps (last gap {gap:.3e})", gap)


def solve_auxiliary_system(spec, mu: float, d: RadialField) -> SystemState:
    """``psi_i = S_i(mu f_i(d, ..., d))`` for each equation (decoupled)."""
    if not mu > 0:
        raise ValueError("mu must be positive")
    grid = spec.grid
    require_same_grid(d.grid, grid)
    if np.any(d.values < 0):
        raise ValueError("bump profile must be nonnegative")
    comps = []
    for i, pair in enumerate(spec.pairs):
        try:
            load = mu * spec.f.diagonal(i, d.values)
        except Exception as exc:
            raise RadialSolveError(f"evaluating f_{i + 1} along the bump failed: {exc}") from exc
        comps.append(march(load, pair, grid)[0])
    return SystemState(grid, np.stack(comps))
