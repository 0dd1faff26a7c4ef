"""Wide-stencil monotone discretisation of ``M+`` on planar grids.

At an interior node and for each of ``K`` orthogonal lattice direction pairs
``(v, v_perp)`` we form second differences along both directions and take

    M+_h u = max_k [ g(delta_{v_k} u) + g(delta_{v_k perp} u) ],  g(t) = Lam t^+ - lam t^-.

Arms that leave the domain are shortened to the boundary crossing when a
level-set function is available (linear interpolation of the signed
distance), so the Dirichlet value 0 is imposed at the true boundary. The
scheme is monotone: the output is nondecreasing in every neighbour value.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

from .core import EllipticityPair
from .radial import RadialField

MIN_ARM = 1e-2  # shortest cut arm as a fraction of h


class StencilError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


class Solve2DError(RuntimeError):
    pass


def lattice_directions(K: int) -> list[tuple[int, int]]:
    """Lattice vectors closest to the angles ``k pi / (2K)``, ``k = 0..K-1``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    reach = max(1, math.ceil(K / 2))
    cands = [(p, q) for p in range(0, reach + 1) for q in range(-reach, reach + 1)
             if (p, q) != (0, 0) and math.gcd(p, abs(q)) == 1]
    out = []
    for k in range(K):
        th = k * math.pi / (2 * K)
        best = min(cands, key=lambda v: (round(abs(_angle_gap(math.atan2(v[1], v[0]), th)), 12),
                                         v[0] ** 2 + v[1] ** 2))
        if best not in out:
            out.append(best)
    return out


def _angle_gap(a, b):
    # directions are unoriented: compare modulo pi
    d = (a - b) % math.pi
    return min(d, math.pi - d)


@dataclass(frozen=True, eq=False)
class Grid2D:
    """Uniform planar grid; ``mask`` marks interior nodes (row index = y).

    ``phi`` is an optional signed distance (negative inside) used to cut
    stencil arms at the boundary.
    """

    nx: int
    ny: int
    h: float
    mask: np.ndarray
    K: int = 4
    phi: np.ndarray | None = None
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.nx < 16 or self.ny < 16:
            raise ValueError("need nx, ny >= 16")
        if not self.h > 0:
            raise ValueError("h must be positive")
        mask = np.array(self.mask, dtype=bool)
        if mask.shape != (self.ny, self.nx):
            raise ValueError(f"mask shape {mask.shape} != ({self.ny}, {self.nx})")
        if not mask.any():
            raise ValueError("empty mask")
        pad = self.reach
        if (mask[:pad].any() or mask[-pad:].any() or mask[:, :pad].any() or mask[:, -pad:].any()):
            raise StencilError(f"mask needs an exterior layer of width {pad} for K={self.K}")
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        if self.phi is not None:
            phi = np.array(self.phi, dtype=float)
            if phi.shape != mask.shape:
                raise ValueError("level set shape does not match the mask")
            phi.setflags(write=False)
            object.__setattr__(self, "phi", phi)

    @property
    def reach(self) -> int:
        return max(max(abs(p), abs(q)) for p, q in lattice_directions(self.K))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.ny, self.nx)

    @property
    def interior(self) -> np.ndarray:
        return self.mask

    @property
    def N(self) -> int:
        return 2

    @cached_property
    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        x = self.origin[0] + self.h * np.arange(self.nx)
        y = self.origin[1] + self.h * np.arange(self.ny)
        return np.meshgrid(x, y)

    @cached_property
    def inscribed(self) -> tuple[tuple[float, float], float]:
        return inscribed_ball(self.mask, self.h, self.origin)

    @property
    def inscribed_radius(self) -> float:
        return self.inscribed[1]

    @cached_property
    def _cache(self) -> dict:
        return {}

    @cached_property
    def _stencil(self):
        return _build_stencil(self)

    def apply(self, u, pair: EllipticityPair) -> np.ndarray:
        return apply_stencil(np.asarray(u, dtype=float), pair, self)

    def solve(self, load, pair: EllipticityPair, tol: float = 1e-9, **kw) -> np.ndarray:
        return solve_2d(load, pair, self, tol=tol, **kw).values

    def zeros(self) -> "GridField":
        return GridField(self, np.zeros(self.shape))


@dataclass(frozen=True, eq=False)
class GridField:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != self.grid.shape:
            raise ValueError(f"field shape {vals.shape} != grid {self.grid.shape}")
        vals[~self.grid.mask] = 0.0
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def to_csv(self, path=None) -> str:
        x, y = self.grid.coords
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["x", "y", "value"])
        for xi, yi, v in zip(x.ravel(), y.ravel(), self.values.ravel()):
            w.writerow([f"{xi:.17g}", f"{yi:.17g}", f"{v:.17g}"])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def to_gridfile(self, path=None) -> str:
        return write_gridfile(self.values, self.grid.h, path)


# ---------------------------------------------------------------- stencil

@dataclass
class _Arm:
    nbr: np.ndarray   # flat neighbour index, or the zero slot
    length: np.ndarray  # physical arm length


def _arm(grid: Grid2D, idx_y, idx_x, p, q) -> _Arm:
    ny, nx = grid.shape
    ty, tx = idx_y + q, idx_x + p
    full = grid.h * math.hypot(p, q)
    length = np.full(idx_y.shape, full)
    inside = grid.mask[ty, tx]
    nbr = np.where(inside, ty * nx + tx, ny * nx)
    if grid.phi is not None:
        f0 = grid.phi[idx_y, idx_x]
        f1 = grid.phi[ty, tx]
        cut = (f1 >= 0) | ~inside
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(f1 > f0, -f0 / (f1 - f0), 1.0)
        frac = np.clip(frac, MIN_ARM / math.hypot(p, q), 1.0)
        length = np.where(cut, frac * full, full)
        nbr = np.where(cut, ny * nx, nbr)
    return _Arm(nbr, length)


def _build_stencil(grid: Grid2D):
    iy, ix = np.nonzero(grid.mask)
    centre = iy * grid.nx + ix
    pairs = []
    for p, q in lattice_directions(grid.K):
        arms = []
        for a, b in ((p, q), (-q, p)):
            plus, minus = _arm(grid, iy, ix, a, b), _arm(grid, iy, ix, -a, -b)
            la, lb = plus.length, minus.length
            # delta = 2/(la+lb) [ (u+ - u0)/la + (u- - u0)/lb ]
            cp = 2.0 / ((la + lb) * la)
            cm = 2.0 / ((la + lb) * lb)
            arms.append((plus.nbr, minus.nbr, cp, cm))
        pairs.append(arms)
    return centre, pairs


def _second_differences(uf, centre, arms):
    u0 = uf[centre]
    return [cp * (uf[np_] - u0) + cm * (uf[nm] - u0) for np_, nm, cp, cm in arms]


def _g(t, pair):
    return np.where(t >= 0, pair.Lam * t, pair.lam * t)


def apply_stencil(u: np.ndarray, pair: EllipticityPair, grid: Grid2D) -> np.ndarray:
    if u.shape != grid.shape:
        raise ValueError(f"field shape {u.shape} != grid {grid.shape}")
    uf = np.append(np.where(grid.mask, u, 0.0).ravel(), 0.0)
    centre, pairs = grid._stencil
    best = None
    for arms in pairs:
        d1, d2 = _second_differences(uf, centre, arms)
        val = _g(d1, pair) + _g(d2, pair)
        best = val if best is None else np.maximum(best, val)
    out = np.zeros(grid.nx * grid.ny)
    out[centre] = best
    return out.reshape(grid.shape)


def pucci_wide_stencil(u: GridField, pair: EllipticityPair) -> GridField:
    """Monotone wide-stencil approximation of ``M+(D^2 u)`` at interior nodes."""
    return GridField(u.grid, apply_stencil(u.values, pair, u.grid))


def _local_dt(grid: Grid2D, pair: EllipticityPair) -> np.ndarray:
    _, pairs = grid._stencil
    diag = None
    for arms in pairs:
        s = sum(cp + cm for _, _, cp, cm in arms)
        diag = s if diag is None else np.maximum(diag, s)
    return 1.0 / (pair.Lam * diag)


def _lowest_mode(grid: Grid2D, pair: EllipticityPair) -> float:
    # lower bound for the smallest decay rate: Laplacian on the circumscribed disc, times lam
    x, y = grid.coords
    xs, ys = x[grid.mask], y[grid.mask]
    cx, cy = xs.mean(), ys.mean()
    rad = float(np.max(np.hypot(xs - cx, ys - cy))) + grid.h
    return pair.lam * 2.404825557695773 ** 2 / rad ** 2


def _policy_matrix(u_flat, pair: EllipticityPair, grid: Grid2D, concave: bool = False, prev=None):
    """Linear operator of the maximising direction pair and branch at ``u``.

    ``concave=True`` returns the axis pair on the ``lam`` branch, a good first
    guess for nonnegative loads. With ``prev`` (a policy returned earlier) a
    node only switches when the new choice beats the old one by more than
    roundoff, which stops churning between tied directions.
    """
    from scipy import sparse

    centre, pairs = grid._stencil
    n = centre.size
    best, choice, w = None, None, None
    diffs = []
    for k, arms in enumerate(pairs):
        d1, d2 = _second_differences(u_flat, centre, arms)
        diffs.append((d1, d2))
        val = _g(d1, pair) + _g(d2, pair)
        wk = (np.where(d1 >= 0, pair.Lam, pair.lam), np.where(d2 >= 0, pair.Lam, pair.lam))
        if best is None:
            best, choice, w = val, np.zeros(n, dtype=int), wk
        else:
            upd = val > best
            best = np.where(upd, val, best)
            choice = np.where(upd, k, choice)
            w = tuple(np.where(upd, new, old) for new, old in zip(wk, w))
    if concave:
        choice = np.zeros(n, dtype=int)
        w = (np.full(n, pair.lam), np.full(n, pair.lam))
    elif prev is not None:
        pchoice, pw = prev
        d = np.array(diffs)  # (K, 2, n)
        idx = np.arange(n)
        old = pw[0] * d[pchoice, 0, idx] + pw[1] * d[pchoice, 1, idx]
        keep = best <= old + 1e-12 * (np.abs(best) + np.abs(old))
        choice = np.where(keep, pchoice, choice)
        w = tuple(np.where(keep, o, new) for new, o in zip(w, pw))
    local = np.full(grid.nx * grid.ny + 1, -1)
    local[centre] = np.arange(n)
    rows, cols, vals = [np.arange(n)], [np.arange(n)], [np.zeros(n)]
    for k, arms in enumerate(pairs):
        sel = np.flatnonzero(choice == k)
        for (nbp, nbm, cp, cm), wj in zip(arms, w):
            for nb, c in ((nbp, cp), (nbm, cm)):
                coef = wj[sel] * c[sel]
                vals[0][sel] -= coef
                tgt = local[nb[sel]]
                keep_nb = tgt >= 0
                rows.append(sel[keep_nb]), cols.append(tgt[keep_nb]), vals.append(coef[keep_nb])
    A = sparse.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
    return A, (choice, w)


def _linear_solve(A, b, x0):
    """ILU-preconditioned BiCGSTAB with a direct fallback."""
    from scipy.sparse.linalg import LinearOperator, bicgstab, spilu, spsolve

    if A.shape[0] < 4000:
        return spsolve(A, b)
    for drop, fill in ((1e-3, 5), (1e-5, 20)):
        try:
            ilu = spilu(A, drop_tol=drop, fill_factor=fill)
        except RuntimeError:  # dropping made a pivot vanish
            continue
        x, info = bicgstab(A, b, x0=x0, M=LinearOperator(A.shape, ilu.solve), rtol=1e-13,
                           atol=0.0, maxiter=500)
        if info == 0:
            return x
    return spsolve(A, b)


def _check_load(g, grid):
    if isinstance(g, GridField):
        grid = g.grid if grid is None else grid
        g = g.values
    if grid is None:
        raise TypeError("pass a GridField or an explicit grid")
    g = np.broadcast_to(np.asarray(g, dtype=float), grid.shape)
    gi = g[grid.mask]
    if not np.all(np.isfinite(gi)):
        raise Solve2DError("non-finite load")
    if np.any(gi < 0):
        raise Solve2DError("load must be nonnegative on the mask")
    return gi, grid


def solve_2d(g, pair: EllipticityPair, grid: Grid2D | None = None, tol: float = 1e-9,
             method: str = "implicit", max_steps: int | None = None, u0=None) -> GridField:
    """Solve ``-M+_h(D^2 u) = g`` in the mask with ``u = 0`` outside.

    ``method="implicit"`` takes linearly implicit pseudo-time steps with an
    infinite step: the maximising direction pair and branch are frozen at the
    current iterate and the resulting M-matrix system is solved exactly. The
    iterates increase monotonically and settle in finitely many steps.

    ``method="explicit"`` steps ``u <- u + dt (M+_h u + g)`` with the local
    step ``dt = 1 / (Lam * diagonal)`` (``h^2 / (4 Lam)`` away from the
    boundary) and heavy-ball momentum; it is slow and meant for small grids.

    Both stop when the sup-norm of ``M+_h u + g`` falls below
    ``tol * max(1, |g|_inf)``.
    """
    gi, grid = _check_load(g, grid)
    if not tol > 0:
        raise ValueError("tol must be positive")
    if method == "explicit":
        return _solve_explicit(gi, pair, grid, tol, max_steps or 2_000_000, u0)
    if method != "implicit":
        raise ValueError(f"unknown method {method!r}")
    centre, _ = grid._stencil
    scale = max(1.0, float(np.max(gi)) if gi.size else 1.0)
    size = grid.nx * grid.ny
    u = np.zeros(size + 1)
    if u0 is not None:
        u[:size] = np.where(grid.mask, u0, 0.0).ravel()
    err = math.inf
    policy = None
    for step in range(max_steps or 200):
        A, policy = _policy_matrix(u, pair, grid, concave=(step == 0 and u0 is None), prev=policy)
        u[centre] = _linear_solve(A, -gi, u[centre])
        if not np.all(np.isfinite(u)):
            raise DivergenceError(f"non-finite iterate at step {step}")
        res = apply_stencil(u[:size].reshape(grid.shape), pair, grid).ravel()[centre] + gi
        err = float(np.max(np.abs(res)))
        if err < tol * scale:
            return GridField(grid, u[:size].reshape(grid.shape))
    raise Solve2DError(f"policy iteration did not settle (residual {err:.3e})")


def _solve_explicit(gi, pair, grid, tol, max_steps, u0):
    centre, _ = grid._stencil
    dt = _local_dt(grid, pair)
    # heavy-ball parameters for a Jacobi-scaled spectrum inside [m, 2]
    m = float(np.max(dt)) * _lowest_mode(grid, pair)
    sl, sm = math.sqrt(2.0), math.sqrt(min(m, 1.0))
    alpha = 2.0 / (sl + sm) ** 2
    beta = ((sl - sm) / (sl + sm)) ** 2
    dt = alpha * dt
    size = grid.nx * grid.ny
    u = np.zeros(size) if u0 is None else np.where(grid.mask, u0, 0.0).ravel().astype(float)
    v = np.zeros(centre.size)
    growth, last_norm, err = 0, math.inf, math.inf
    for step in range(max_steps):
        res = apply_stencil(u.reshape(grid.shape), pair, grid).ravel()[centre] + gi
        err = float(np.max(np.abs(res)))
        if err < tol:
            return GridField(grid, u.reshape(grid.shape))
        if not math.isfinite(err):
            raise DivergenceError(f"non-finite residual at step {step}")
        v = beta * v + dt * res
        u[centre] += v
        norm = float(np.max(np.abs(u)))
        growth = growth + 1 if norm > last_norm else 0
        last_norm = norm
        if growth >= 1000 and err > 1e6 * max(1.0, float(np.max(np.abs(gi)))):
            raise DivergenceError(f"sup-norm grew for {growth} consecutive steps")
    raise Solve2DError(f"no convergence in {max_steps} steps (residual {err:.3e})")


def torsion_2d(pair: EllipticityPair, grid: Grid2D) -> np.ndarray:
    """Torsion function on the grid (cached per grid and pair)."""
    cache = grid._cache
    if pair not in cache:
        cache[pair] = solve_2d(np.ones(grid.shape), pair, grid).values
    return cache[pair]


# ---------------------------------------------------------------- geometry

def inscribed_ball(mask, h: float = 1.0, origin=(0.0, 0.0)) -> tuple[tuple[float, float], float]:
    """Centre and radius of the largest ball (about the mask nodes) inside the mask.

    The radius is the Euclidean distance from the deepest node to the nearest
    exterior node, less half a spacing, so it lies within one spacing of the
    true inradius of the sampled domain.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty mask")
    dist = ndimage.distance_transform_edt(mask)
    iy, ix = np.unravel_index(int(np.argmax(dist)), dist.shape)
    R = (float(dist[iy, ix]) - 0.5) * h
    return (origin[0] + ix * h, origin[1] + iy * h), R


def extend_by_zero(f: RadialField, center, grid: Grid2D, check: bool = True) -> GridField:
    """Sample ``f(|x - center|)`` inside the ball of radius ``f.R`` and 0 elsewhere."""
    x, y = grid.coords
    r = np.hypot(x - center[0], y - center[1])
    inside = r <= f.R
    if check:
        # the ball must sit inside the mask: every node within it is interior
        if np.any(inside & ~grid.mask):
            raise ValueError("ball leaves the mask")
    vals = np.where(inside, np.interp(r, f.grid.r, f.values), 0.0)
    return GridField(grid, vals)


def sphere_shell(grid: Grid2D, center, R: float) -> np.ndarray:
    """Nodes whose stencil crosses ``|x - center| = R`` (the extension kink)."""
    x, y = grid.coords
    r = np.hypot(x - center[0], y - center[1])
    width = grid.reach * grid.h * math.sqrt(2)
    return np.abs(r - R) <= width


# ---------------------------------------------------------------- builders and I/O

def _shape_phi(shape: str, X, Y):
    if shape == "disc":
        return np.hypot(X, Y) - 1.0
    if shape == "square":
        return np.maximum(np.abs(X), np.abs(Y)) - 0.5
    if shape == "lshape":
        # [0,2]x[0,1] union [0,1]x[0,2]
        a = np.maximum(np.abs(X - 1.0) - 1.0, np.abs(Y - 0.5) - 0.5)
        b = np.maximum(np.abs(X - 0.5) - 0.5, np.abs(Y - 1.0) - 1.0)
        return np.minimum(a, b)
    raise ValueError(f"unknown shape {shape!r}")


_EXTENT = {"disc": (-1.0, 1.0, -1.0, 1.0), "square": (-0.5, 0.5, -0.5, 0.5),
           "lshape": (0.0, 2.0, 0.0, 2.0)}


def make_grid(shape: str, h: float, K: int = 4, radius: float | None = None) -> Grid2D:
    """Grid for a named shape: unit disc, unit square or an L of side 2 and arm width 1."""
    if shape not in _EXTENT:
        raise ValueError(f"unknown shape {shape!r}")
    x0, x1, y0, y1 = _EXTENT[shape]
    scale = 1.0 if radius is None else radius
    x0, x1, y0, y1 = (scale * v for v in (x0, x1, y0, y1))
    reach = max(max(abs(p), abs(q)) for p, q in lattice_directions(K))
    pad = reach + 1
    nx = int(round((x1 - x0) / h)) + 1 + 2 * pad
    ny = int(round((y1 - y0) / h)) + 1 + 2 * pad
    origin = (x0 - pad * h, y0 - pad * h)
    X = origin[0] + h * np.arange(nx)
    Y = origin[1] + h * np.arange(ny)
    X, Y = np.meshgrid(X, Y)
    phi = scale * _shape_phi(shape, X / scale, Y / scale)
    mask = phi < -1e-12
    return Grid2D(nx, ny, h, mask, K, phi, origin)


def read_gridfile(text: str) -> tuple[np.ndarray, float]:
    """Parse ``nx ny h`` followed by ``ny * nx`` row-major values."""
    toks = text.split()
    if len(toks) < 3:
        raise ValueError("grid file needs a header 'nx ny h'")
    nx, ny, h = int(toks[0]), int(toks[1]), float(toks[2])
    vals = np.array([float(t) for t in toks[3:]])
    if vals.size != nx * ny:
        raise ValueError(f"expected {nx * ny} values, got {vals.size}")
    return vals.reshape(ny, nx), h


def write_gridfile(values, h: float, path=None) -> str:
    values = np.asarray(values, dtype=float)
    ny, nx = values.shape
    lines = [f"{nx} {ny} {h:.17g}"]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in values]
    text = "\n".join(lines) + "\n"
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def grid_from_maskfile(text: str, K: int = 4) -> Grid2D:
    vals, h = read_gridfile(text)
    ny, nx = vals.shape
    return Grid2D(nx, ny, h, vals > 0.5, K)
