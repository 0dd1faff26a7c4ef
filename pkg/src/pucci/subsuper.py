"""Barrier functions, multiplicity thresholds and residual-sign certificates.

Four barrier families are built here:

* ``psi = m_mu * phi1`` -- small subsolution from the principal eigenfunction;
* ``phi_small = mu * e`` and ``phi_large = mt_mu * e`` -- torsion supersolutions;
* ``phi_tilde = a e / |e|`` -- strict supersolution for ``mu < mu_star``;
* ``psi_tilde`` -- strict subsolution solving the system loaded by ``mu f(d)``
  with ``d = b rho`` a plateau-and-ramp bump.

Certificates evaluate the discrete residual ``-M+_h(D^2 u_i) - mu f_i(u)`` at
interior nodes and check its sign.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from . import radial
from .core import EllipticityPair
from .nonlinearity import SystemSpec
from .state import SystemState, require_same_grid

SUB, SUP, STRICT_SUB, STRICT_SUP = "sub", "sup", "strict-sub", "strict-sup"
KINDS = (SUB, SUP, STRICT_SUB, STRICT_SUP)
MAX_DYADIC = 60


class BarrierError(ValueError):
    pass


class ThresholdError(ValueError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class DominanceError(BarrierError):
    def __init__(self, message, component=None, node=None):
        super().__init__(message)
        self.component = component
        self.node = node


class CertificateError(BarrierError):
    def __init__(self, message, certificate=None):
        super().__init__(message)
        self.certificate = certificate


# ---------------------------------------------------------------- constants

def exponents(pair: EllipticityPair, N: int) -> tuple[float, float]:
    """Effective dimensions ``(N-, N+) = (Lam/lam (N-1) + 1, lam/Lam (N-1) + 1)``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return pair.Lam / pair.lam * (N - 1) + 1, pair.lam / pair.Lam * (N - 1) + 1


def _A_of_eps(eps, Nm, Np, R):
    return Nm * R ** (Np - 1) / (eps ** Nm * (R - eps))


def A_constant(pair: EllipticityPair, N: int, R: float, scan_points: int = 10_000) -> tuple[float, float]:
    """``A = inf_eps N- R^(N+ - 1) / (eps^N- (R - eps))`` and its minimiser.

    The closed-form minimiser ``eps = N- R / (N- + 1)`` is checked against a
    uniform scan of ``(0, R)``.
    """
    Nm, Np = exponents(pair, N)
    eps = Nm * R / (Nm + 1)
    A = _A_of_eps(eps, Nm, Np, R)
    grid = R * np.arange(1, scan_points + 1) / (scan_points + 1)
    scanned = float(np.min(_A_of_eps(grid, Nm, Np, R)))
    if A > scanned * (1 + 1e-12):
        raise ArithmeticError(f"closed-form minimiser lost to the scan: {A} > {scanned}")
    return A, eps


@dataclass
class ThresholdReport:
    N_minus: list[float]
    N_plus: list[float]
    eps_star: list[float]
    A: list[float]
    normE: list[float]
    mu0: float
    muStar: float
    muLower_A: float
    muLower_proof: float
    a: float
    b: float
    R: float = 0.0
    N: int = 0

    @property
    def window(self) -> bool:
        """True when the multiplicity window ``(muLower_proof, muStar)`` is nonempty."""
        return self.muLower_proof < self.muStar

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window_nonempty"] = self.window
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdReport":
        d = {k: v for k, v in d.items() if k != "window_nonempty"}
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def torsion_norms(spec: SystemSpec) -> list[float]:
    return [float(np.max(e)) for e in torsion_state(spec).values]


def torsion_state(spec: SystemSpec) -> SystemState:
    grid = spec.grid
    if spec.is_ball:
        return SystemState(grid, np.stack([radial.torsion(p, grid).values for p in spec.pairs]))
    from .grid2d import torsion_2d
    return SystemState(grid, np.stack([torsion_2d(p, grid) for p in spec.pairs]))


def mu0_scan(spec: SystemSpec, normE=None) -> float:
    """Largest ``2^-k`` with ``f_i(mu |e_1|, ..., mu |e_n|) < 1`` for every i."""
    normE = torsion_norms(spec) if normE is None else normE
    x = np.asarray(normE, dtype=float)
    for k in range(MAX_DYADIC + 1):
        mu = 2.0 ** -k
        if all(float(spec.f.component(i, mu * x)) < 1 for i in range(spec.n)):
            return mu
    raise ThresholdError("no dyadic mu0 found: f does not vanish continuously at the origin")


def thresholds(spec: SystemSpec, a: float, b: float) -> ThresholdReport:
    if not 0 < a < b:
        raise ValueError(f"need 0 < a < b, got a={a}, b={b}")
    N, R = spec.N, spec.R
    normE = torsion_norms(spec)
    Nm, Np, eps, A = [], [], [], []
    for pair in spec.pairs:
        nm, np_ = exponents(pair, N)
        Ai, ei = A_constant(pair, N, R)
        Nm.append(nm), Np.append(np_), eps.append(ei), A.append(Ai)
    fa = [float(spec.f.diagonal(i, a)) for i in range(spec.n)]
    fb = [float(spec.f.diagonal(i, b)) for i in range(spec.n)]
    for i in range(spec.n):
        if fa[i] == 0 or fb[i] == 0:
            raise ThresholdError(
                f"f_{i + 1} vanishes on the diagonal at {'a' if fa[i] == 0 else 'b'}; "
                "the two-scale condition needs f_i(a,...,a) != 0 and f_i(b,...,b) != 0")
    mu_star = min(a / (normE[i] * fa[i]) for i in range(spec.n))
    lower_A = max(A[i] * b / fb[i] for i in range(spec.n))
    lower_proof = max(spec.pairs[i].Lam * A[i] * b / fb[i] for i in range(spec.n))
    return ThresholdReport(Nm, Np, eps, A, normE, mu0_scan(spec, normE), mu_star,
                           lower_A, lower_proof, float(a), float(b), float(R), int(N))


# ---------------------------------------------------------------- bump

@dataclass(frozen=True)
class BumpProfile:
    """``d(r) = b rho(r)``: 1 on ``[0, eps]``, then ``1 - (1 - t^m)^l`` with ``t = (R-r)/(R-eps)``."""

    b: float
    epsilon: float
    l: float
    m: float
    R: float

    def __post_init__(self):
        if not self.b > 0:
            raise ValueError("plateau height b must be positive")
        if not 0 < self.epsilon < self.R:
            raise ValueError(f"need 0 < epsilon < R, got {self.epsilon}")
        if not (self.l > 1 and self.m > 1):
            raise ValueError("need l, m > 1")

    def _t(self, r):
        return (self.R - r) / (self.R - self.epsilon)

    def rho(self, r):
        r = np.asarray(r, dtype=float)
        if np.any((r < 0) | (r > self.R)):
            raise ValueError(f"r outside [0, {self.R}]")
        t = np.clip(self._t(r), 0.0, 1.0)
        out = np.where(r <= self.epsilon, 1.0, 1.0 - (1.0 - t ** self.m) ** self.l)
        return float(out) if out.ndim == 0 else out

    def drho(self, r):
        r = np.asarray(r, dtype=float)
        t = np.clip(self._t(r), 0.0, 1.0)
        inner = np.clip(1.0 - t ** self.m, 0.0, 1.0)
        slope = -self.l * self.m / (self.R - self.epsilon) * inner ** (self.l - 1) * t ** (self.m - 1)
        out = np.where(r <= self.epsilon, 0.0, slope)
        return float(out) if out.ndim == 0 else out

    def d(self, r):
        return self.b * self.rho(r)

    def field(self, grid) -> radial.RadialField:
        if abs(grid.R - self.R) > 1e-12 * self.R:
            raise ValueError("bump radius does not match the grid")
        r = grid.r
        return radial.RadialField(grid, self.b * self.rho(r), self.b * self.drho(r))


def rho(r, p: BumpProfile):
    return p.rho(r)


def proof_constant(spec: SystemSpec, b: float, eps: float) -> float:
    """``max_i b Lam_i N-_i R^(N+_i - 1) / (f_i(b..b) (R - eps) eps^N-_i)``."""
    R, N = spec.R, spec.N
    vals = []
    for i, pair in enumerate(spec.pairs):
        Nm, Np = exponents(pair, N)
        fb = float(spec.f.diagonal(i, b))
        if fb == 0:
            raise ThresholdError(f"f_{i + 1}(b,...,b) = 0")
        vals.append(b * pair.Lam * _A_of_eps(eps, Nm, Np, R) / fb)
    return max(vals)


def choose_bump(spec: SystemSpec, mu: float, b: float, epsilon: float | None = None,
                l0: float = 1.05, headroom: float = 1.1) -> BumpProfile:
    """Bump with ``l = m`` as small as allowed, satisfying ``mu > headroom l m C``."""
    R, N = spec.R, spec.N
    if epsilon is None:
        epsilon = min(A_constant(p, N, R)[1] for p in spec.pairs)
    C = proof_constant(spec, b, epsilon)
    if not mu > headroom * l0 * l0 * C:
        raise ThresholdError(
            f"mu={mu:.6g} too small for the strict subsolution: need mu > {headroom * l0 * l0 * C:.6g}")
    return BumpProfile(float(b), float(epsilon), l0, l0, float(R))


# ---------------------------------------------------------------- certificates

@dataclass
class CertificateReport:
    kind: str
    margins: list[float]
    passed: bool
    slack: float
    tol: float
    worst_nodes: list[int] = field(default_factory=list)
    excluded: int = 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pass"] = d.pop("passed")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CertificateReport":
        d = dict(d)
        d["passed"] = d.pop("pass")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def residual(u: SystemState, spec: SystemSpec, mu: float) -> tuple[np.ndarray, np.ndarray]:
    """``-M+_h(D^2 u_i) - mu f_i(u)`` and ``mu f(u)``, both shaped like ``u.values``."""
    grid = spec.grid
    require_same_grid(u.grid, grid)
    load = mu * spec.f(u.values)
    res = np.stack([-grid.apply(u[i], pair) for i, pair in enumerate(spec.pairs)]) - load
    return res, load


def certify(u: SystemState, spec: SystemSpec, mu: float, kind: str,
            tol_rel: float = 1e-6, exclude=None) -> CertificateReport:
    """Residual-sign certificate of ``u`` as a (strict) sub- or supersolution.

    Non-strict kinds allow ``tol = tol_rel (1 + |mu f|_inf)``. Strict kinds
    need every interior margin to exceed ``tol_rel (1 + |mu f_i(u(x))|)``;
    ``slack`` is the smallest realised margin.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown certificate kind {kind!r}")
    res, load = residual(u, spec, mu)
    mask = np.array(u.grid.interior, dtype=bool)
    if exclude is not None:
        mask &= ~np.asarray(exclude, dtype=bool)
    excluded = int(np.count_nonzero(np.asarray(u.grid.interior)) - np.count_nonzero(mask))
    sign = -1.0 if kind in (SUB, STRICT_SUB) else 1.0
    margin = sign * res[:, mask]  # positive is good
    loads = np.abs(load[:, mask])
    tol = tol_rel * (1.0 + float(np.max(np.abs(load)))) if load.size else tol_rel
    worst = [int(np.flatnonzero(mask)[np.argmin(mi)]) for mi in margin]
    margins = [float(np.min(mi)) for mi in margin]
    slack = min(margins)
    if kind in (SUB, SUP):
        passed = slack >= -tol
    else:
        passed = bool(np.all(margin > tol_rel * (1.0 + loads)))
        tol = tol_rel
    return CertificateReport(kind, margins, bool(passed), slack, tol, worst, excluded)


@dataclass
class OrderingVerdict:
    leq: bool
    witness: dict | None = None

    def to_dict(self) -> dict:
        return {"leq": self.leq, "witness": self.witness}


def check_ordering(x: SystemState, y: SystemState, tol: float = 1e-12,
                   prefer_node: int | None = None) -> OrderingVerdict:
    """Componentwise ``x <= y`` up to ``tol`` (scaled by the field magnitudes)."""
    require_same_grid(x.grid, y.grid)
    if x.values.shape != y.values.shape:
        raise ValueError("states have different numbers of components")
    scale = max(1.0, float(np.max(np.abs(x.values))), float(np.max(np.abs(y.values))))
    excess = x.values - y.values
    bad = excess > tol * scale
    if not np.any(bad):
        return OrderingVerdict(True)
    flat = excess.reshape(excess.shape[0], -1)
    if prefer_node is not None and np.any(bad.reshape(flat.shape)[:, prefer_node]):
        i = int(np.argmax(flat[:, prefer_node]))
        node = prefer_node
    else:
        i, node = np.unravel_index(int(np.argmax(flat)), flat.shape)
        i, node = int(i), int(node)
    witness = {"component": i + 1, "node": node,
               "x": float(x.values.reshape(flat.shape)[i, node]),
               "y": float(y.values.reshape(flat.shape)[i, node])}
    pos = _node_position(x.grid, node)
    if pos is not None:
        witness["position"] = pos
    return OrderingVerdict(False, witness)


def _node_position(grid, node):
    if isinstance(grid, radial.RadialGrid):
        return float(grid.r[node])
    coords = getattr(grid, "coords", None)
    if coords is not None:
        xs, ys = coords
        return [float(xs.ravel()[node]), float(ys.ravel()[node])]
    return None


# ---------------------------------------------------------------- barriers

@dataclass
class BarrierSet:
    psi: SystemState | None = None
    phiSmall: SystemState | None = None
    phiLarge: SystemState | None = None
    phiTilde: SystemState | None = None
    psiTilde: SystemState | None = None
    m_mu: float | None = None
    mTilde_mu: float | None = None
    m_rule: str | None = None
    bump: BumpProfile | None = None

    def scalars(self) -> dict:
        return {"m_mu": self.m_mu, "mTilde_mu": self.mTilde_mu, "m_rule": self.m_rule,
                "bump": asdict(self.bump) if self.bump is not None else None}


def _require_ball(spec: SystemSpec, what: str):
    if not spec.is_ball:
        raise BarrierError(f"{what} is built on ball domains; use grid2d.extend_by_zero for general domains")


def kink_mask(spec: SystemSpec):
    """Nodes excluded from certificates of zero-extended ball barriers (None on balls)."""
    if spec.is_ball:
        return None
    from .grid2d import sphere_shell
    centre, R = spec.grid.inscribed
    return sphere_shell(spec.grid, centre, R)


def eigen_state(spec: SystemSpec) -> tuple[list[float], SystemState]:
    """Principal eigenpairs, on the ball or on the inscribed ball extended by zero."""
    if spec.is_ball:
        grid = spec.grid
        pairs = [radial.principal_eigenpair(p, grid) for p in spec.pairs]
        return [mu for mu, _ in pairs], SystemState(grid, np.stack([phi.values for _, phi in pairs]))
    from .grid2d import extend_by_zero
    centre, R = spec.grid.inscribed
    rgrid = radial.RadialGrid(R, 2, spec.M)
    pairs = [radial.principal_eigenpair(p, rgrid) for p in spec.pairs]
    vals = [extend_by_zero(phi, centre, spec.grid).values for _, phi in pairs]
    return [mu for mu, _ in pairs], SystemState(spec.grid, np.stack(vals))


def _largest_admissible(test, lo_exp: int = MAX_DYADIC, bisect_steps: int = 30) -> float | None:
    # dyadic descent from 1, then bisection between the first pass and its double
    if test(1.0):
        return 1.0
    for k in range(1, lo_exp + 1):
        m = 2.0 ** -k
        if test(m):
            lo, hi = m, 2 * m
            for _ in range(bisect_steps):
                mid = 0.5 * (lo + hi)
                if test(mid):
                    lo = mid
                else:
                    hi = mid
            return lo
    return None


def _axis_test(spec, mu, mus, points=256):
    n = spec.n

    def test(m):
        s = m * np.arange(1, points + 1) / points
        for i in range(n):
            x = np.zeros((n, points))
            x[i] = s
            if not np.all(spec.f.component(i, x) > mus[i] / mu * s):
                return False
        return True
    return test


def _axis_witness(spec, mu, mus, points=256):
    m = 2.0 ** -MAX_DYADIC
    s = m * np.arange(1, points + 1) / points
    for i in range(spec.n):
        x = np.zeros((spec.n, points))
        x[i] = s
        bad = np.flatnonzero(~(spec.f.component(i, x) > mus[i] / mu * s))
        if bad.size:
            return i, float(s[bad[0]])
    return 0, float(m)


def _coupled_test(spec, mu, mus, phis):
    inner = phis.grid.interior

    def test(m):
        x = m * phis.values[:, inner]
        vals = mu * spec.f(x)
        line = np.asarray(mus)[:, None] * x
        # where the eigenfunction vanishes (outside an inscribed ball) f >= 0 suffices
        return bool(np.all(np.where(x > 0, vals > line, vals >= 0)))
    return test


def build_subsolution(spec: SystemSpec, mu: float, max_halvings: int = 40) -> tuple[SystemState, float, str]:
    """``psi_i = m_mu phi1_i`` with the largest admissible ``m_mu`` in ``(0, 1]``.

    ``m_mu`` comes from ``f_i(0,..,s,..,0) > (mu1_i / mu) s`` on ``(0, m]``; when
    that axis condition has no solution (coupled systems whose slope blows up
    only through the other variables) the pointwise inequality
    ``mu f_i(m phi1) > mu1_i m phi1_i`` on the grid is used instead. The result
    is then certified and halved until the certificate passes.
    """
    if not mu > 0:
        raise ValueError("mu must be positive")
    mus, phis = eigen_state(spec)
    m = _largest_admissible(_axis_test(spec, mu, mus))
    rule = "axis"
    if m is None:
        m = _largest_admissible(_coupled_test(spec, mu, mus, phis))
        rule = "coupled"
    if m is None:
        i, s0 = _axis_witness(spec, mu, mus)
        raise BarrierError(f"no admissible scale m_mu: f_{i + 1}(s e_{i + 1}) <= (mu1/mu) s "
                           f"at s={s0:.3e}; f does not dominate the eigenvalue line near 0")
    shell = kink_mask(spec)
    for _ in range(max_halvings):
        psi = phis.scaled(m)
        if certify(psi, spec, mu, SUB, exclude=shell).passed:
            return psi, m, rule
        m *= 0.5
    raise CertificateError(f"eigenfunction subsolution failed to certify down to m={m:.3e}")


def build_small_pair(spec: SystemSpec, mu: float) -> tuple[SystemState, SystemState, float]:
    """``(psi, phi_small, m_mu)`` with ``phi_small = mu e`` and ``psi <= phi_small``."""
    mu0 = mu0_scan(spec)
    if not mu < mu0:
        raise ThresholdError(f"mu={mu} must be below mu0={mu0}")
    e = torsion_state(spec)
    phi = e.scaled(mu)
    psi, m, _ = build_subsolution(spec, mu)
    while not check_ordering(psi, phi).leq:
        m *= 0.5
        psi = psi.scaled(0.5)
    return psi, phi, m


def build_large_supersolution(spec: SystemSpec, mu: float, start: float = 1.0,
                              above: SystemState | None = None) -> tuple[SystemState, float]:
    """``phi_large = mt e`` with ``mt`` the smallest ``start 2^k`` satisfying
    ``mt >= mu f_i(mt |e_1|, ..., mt |e_n|)`` for every i.

    With ``above`` given, ``mt`` keeps doubling until ``above <= phi_large``.
    """
    e = torsion_state(spec)
    normE = np.array([float(np.max(v)) for v in e.values])
    mt = float(start)
    for _ in range(4 * MAX_DYADIC + 1):
        if all(mt >= mu * float(spec.f.component(i, mt * normE)) for i in range(spec.n)):
            phi = e.scaled(mt)
            if above is None or check_ordering(above, phi).leq:
                return phi, mt
        mt *= 2.0
    raise BarrierError(f"no supersolution scale up to {mt / 2:.3e}: f is not sublinear at infinity")


def build_strict_supersolution(spec: SystemSpec, a: float, mu: float) -> SystemState:
    """``phi_tilde_i = a e_i / |e_i|`` -- strict supersolution when ``mu < mu_star``."""
    e = torsion_state(spec)
    normE = [float(np.max(v)) for v in e.values]
    fa = [float(spec.f.diagonal(i, a)) for i in range(spec.n)]
    if any(v == 0 for v in fa):
        raise ThresholdError("f_i(a,...,a) = 0")
    mu_star = min(a / (normE[i] * fa[i]) for i in range(spec.n))
    if not mu < mu_star:
        raise ThresholdError(f"mu={mu} must be below mu_star={mu_star}")
    phi = SystemState(e.grid, np.stack([a * e[i] / normE[i] for i in range(spec.n)]))
    cert = certify(phi, spec, mu, STRICT_SUP)
    need = [0.5 * (a / normE[i] - mu * fa[i]) for i in range(spec.n)]
    if not cert.passed or any(cert.margins[i] < need[i] * (1 - 1e-9) for i in range(spec.n)):
        raise CertificateError("strict supersolution certificate failed", cert)
    return phi


def build_strict_subsolution(spec: SystemSpec, mu: float, p: BumpProfile,
                             check_threshold: bool = True) -> SystemState:
    """Solve the system loaded by ``mu f(d, ..., d)`` and verify ``psi_tilde > d``."""
    _require_ball(spec, "the bump subsolution")
    grid = spec.grid
    if check_threshold:
        lower = proof_constant(spec, p.b, p.epsilon) * p.l * p.m
        if not mu > lower:
            raise ThresholdError(f"mu={mu} must exceed {lower:.6g} for this bump")
    d = p.field(grid)
    psi = radial.solve_auxiliary_system(spec, mu, d)
    inner = grid.interior
    for i, pair in enumerate(spec.pairs):
        gap = psi[i][inner] - d.values[inner]
        if not np.all(gap > 0):
            k = int(np.flatnonzero(gap <= 0)[0])
            raise DominanceError(
                f"psi_tilde_{i + 1} <= d at r={grid.r[k]:.6g} (node {k}): mu too small", i + 1, k)
        dpsi = radial.march(mu * spec.f.diagonal(i, d.values), pair, grid)[1]
        ramp = grid.r > p.epsilon
        if not np.all(-dpsi[ramp] > -d.derivative[ramp]):
            k = int(np.flatnonzero(ramp)[np.argmin(-dpsi[ramp] + d.derivative[ramp])])
            raise DominanceError(
                f"slope dominance fails for component {i + 1} at r={grid.r[k]:.6g}", i + 1, k)
    cert = certify(psi, spec, mu, STRICT_SUB)
    if not cert.passed:
        raise CertificateError("strict subsolution certificate failed", cert)
    return psi
