"""Monotone (Picard) iteration between ordered barriers and the multiplicity workflow."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import subsuper as ss
from .nonlinearity import SystemSpec, audit_C1
from .state import SystemState, require_same_grid

FROM_SUB, FROM_SUP = "from-sub", "from-sup"
DEFAULT_TOL = 1e-8
DEFAULT_MAX_ITER = 10_000
ORDER_TOL = 1e-12


class IterationError(RuntimeError):
    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history or []


class IntervalEscapeError(IterationError):
    pass


class NonMonotoneError(IterationError):
    pass


class OrderIntervalError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class OrderInterval:
    sub: SystemState
    sup: SystemState

    def __post_init__(self):
        require_same_grid(self.sub.grid, self.sup.grid)
        verdict = ss.check_ordering(self.sub, self.sup)
        if not verdict.leq:
            raise OrderIntervalError(f"sub is not below sup: {verdict.witness}")


@dataclass
class SolveReport:
    solution: SystemState
    iterations: int
    residual: float
    monotone_direction: str
    history: list[float] = field(default_factory=list)
    converged: bool = True
    tol_cert: float = 0.0

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "residual": self.residual,
                "monotone_direction": self.monotone_direction, "history": self.history,
                "converged": self.converged, "tol_cert": self.tol_cert,
                "norms": self.solution.norms()}


def residual_norm(u: SystemState, spec: SystemSpec, mu: float, exclude=None) -> tuple[float, float]:
    """Sup-norm of the discrete residual over interior nodes and ``|mu f(u)|_inf``."""
    res, load = ss.residual(u, spec, mu)
    mask = np.array(u.grid.interior, dtype=bool)
    if exclude is not None:
        mask &= ~np.asarray(exclude, dtype=bool)
    return float(np.max(np.abs(res[:, mask]))), float(np.max(np.abs(load)))


def picard_step(u: SystemState, spec: SystemSpec, mu: float) -> SystemState:
    grid = spec.grid
    load = mu * spec.f(u.values)
    return SystemState(grid, np.stack([grid.solve(load[i], pair) for i, pair in enumerate(spec.pairs)]))


def monotone_solve(interval: OrderInterval, spec: SystemSpec, mu: float, start: str = FROM_SUB,
                   tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                   tol_cert: float = 1e-6, check_start: bool = True, exclude=None) -> SolveReport:
    """Picard iteration ``u^{k+1}_i = S_i(mu f_i(u^k))`` started from a barrier.

    Iterates are checked every step: monotone in the expected direction and
    inside the interval, both up to a relative roundoff allowance. The stopping
    rule is ``|u^{k+1} - u^k|_inf <= tol |u^{k+1}|_inf``. ``exclude`` masks
    nodes out of the starting-barrier certificate (the kink of zero-extended
    barriers).
    """
    if start not in (FROM_SUB, FROM_SUP):
        raise ValueError(f"start must be {FROM_SUB!r} or {FROM_SUP!r}")
    if not (mu > 0 and tol > 0):
        raise ValueError("mu and tol must be positive")
    require_same_grid(interval.sub.grid, spec.grid)
    lo, hi = interval.sub.values, interval.sup.values
    u = interval.sub if start == FROM_SUB else interval.sup
    if check_start:
        kind = ss.SUB if start == FROM_SUB else ss.SUP
        cert = ss.certify(u, spec, mu, kind, tol_rel=tol_cert, exclude=exclude)
        if not cert.passed:
            raise ss.CertificateError(f"starting barrier is not a {kind}solution", cert)
    sign = 1.0 if start == FROM_SUB else -1.0
    scale = max(1.0, float(np.max(np.abs(hi))))
    slop = ORDER_TOL * scale
    history = []
    for k in range(1, max_iter + 1):
        nxt = picard_step(u, spec, mu)
        step = nxt.values - u.values
        delta = float(np.max(np.abs(step)))
        history.append(delta)
        allow = max(slop, tol * float(np.max(np.abs(u.values))))
        if np.any(sign * step < -max(slop, 1e-10 * delta)):
            raise NonMonotoneError(f"iterate {k} is not {'nondecreasing' if sign > 0 else 'nonincreasing'}"
                                   f" (worst {float(np.min(sign * step)):.3e})", history)
        if np.any(nxt.values < lo - allow) or np.any(nxt.values > hi + allow):
            out = max(float(np.max(lo - nxt.values)), float(np.max(nxt.values - hi)))
            raise IntervalEscapeError(f"iterate {k} leaves the order interval by {out:.3e};"
                                      " a barrier certificate is faulty", history)
        u = nxt
        if delta <= tol * float(np.max(np.abs(u.values))):
            res, load = residual_norm(u, spec, mu)
            tc = tol_cert * (1.0 + load)
            return SolveReport(u, k, res, start, history, res <= tc, tc)
    raise IterationError(f"no convergence in {max_iter} iterations (last step {history[-1]:.3e})", history)


# ---------------------------------------------------------------- multiplicity

@dataclass
class MultiplicityReport:
    mu: float
    thresholds: ss.ThresholdReport
    barriers: ss.BarrierSet
    certificates: dict = field(default_factory=dict)
    orderings: dict = field(default_factory=dict)
    u1: SolveReport | None = None
    u2: SolveReport | None = None
    distinctness: dict = field(default_factory=dict)
    audits: dict = field(default_factory=dict)
    third_solution_certified: bool = False
    diagnostics: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mu": self.mu,
            "thresholds": self.thresholds.to_dict(),
            "barriers": self.barriers.scalars(),
            "certificates": {k: c.to_dict() for k, c in self.certificates.items()},
            "orderings": {k: v.to_dict() for k, v in self.orderings.items()},
            "u1": self.u1.to_dict() if self.u1 else None,
            "u2": self.u2.to_dict() if self.u2 else None,
            "distinctness": self.distinctness,
            "audits": self.audits,
            "third_solution_certified": self.third_solution_certified,
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, default=float)


def find_multiplicity(spec: SystemSpec, mu: float, a: float, b: float, tol: float = DEFAULT_TOL,
                      max_iter: int = DEFAULT_MAX_ITER, tol_cert: float = 1e-6) -> MultiplicityReport:
    """Build and certify the four barriers and compute the two ordered solutions.

    Raises :class:`pucci.subsuper.ThresholdError` when ``mu`` lies outside
    ``(muLower_proof, mu_star)`` and :class:`pucci.nonlinearity.HypothesisError`
    when the monotonicity audit fails. Certificate or ordering failures are
    reported with ``third_solution_certified = False``.
    """
    from .nonlinearity import HypothesisError

    th = ss.thresholds(spec, a, b)
    if not th.muLower_proof < mu < th.muStar:
        raise ss.ThresholdError(
            f"mu={mu} outside the multiplicity window ({th.muLower_proof:.6g}, {th.muStar:.6g})", th)
    c1 = audit_C1(spec.f)
    if not c1.passed:
        raise HypothesisError("nonlinearity is not monotone", c1)
    rep = MultiplicityReport(mu, th, ss.BarrierSet(), audits={"C1": c1.to_dict()})
    bar = rep.barriers

    try:
        bar.bump = ss.choose_bump(spec, mu, b)
    except ss.ThresholdError as exc:
        # inside the window but below the l m headroom of the bump
        raise ss.ThresholdError(str(exc), th) from exc
    try:
        bar.phiTilde = ss.build_strict_supersolution(spec, a, mu)
        bar.psiTilde = ss.build_strict_subsolution(spec, mu, bar.bump)
    except ss.BarrierError as exc:
        rep.diagnostics.append(str(exc))
        if getattr(exc, "certificate", None) is not None:
            rep.certificates[exc.certificate.kind] = exc.certificate
        return rep

    psi, m, rule = ss.build_subsolution(spec, mu)
    while not (ss.check_ordering(psi, bar.psiTilde).leq and ss.check_ordering(psi, bar.phiTilde).leq):
        m *= 0.5
        psi = psi.scaled(0.5)
    bar.psi, bar.m_mu, bar.m_rule = psi, m, rule
    upper = SystemState(spec.grid, np.maximum(bar.phiTilde.values, bar.psiTilde.values))
    bar.phiLarge, bar.mTilde_mu = ss.build_large_supersolution(spec, mu, above=upper)

    certs = rep.certificates
    certs["psi"] = ss.certify(bar.psi, spec, mu, ss.SUB, tol_cert)
    certs["phi"] = ss.certify(bar.phiLarge, spec, mu, ss.SUP, tol_cert)
    certs["psiTilde"] = ss.certify(bar.psiTilde, spec, mu, ss.STRICT_SUB, tol_cert)
    certs["phiTilde"] = ss.certify(bar.phiTilde, spec, mu, ss.STRICT_SUP, tol_cert)

    o = rep.orderings
    o["psi<=psiTilde"] = ss.check_ordering(bar.psi, bar.psiTilde)
    o["psiTilde<=phi"] = ss.check_ordering(bar.psiTilde, bar.phiLarge)
    o["psi<=phiTilde"] = ss.check_ordering(bar.psi, bar.phiTilde)
    o["phiTilde<=phi"] = ss.check_ordering(bar.phiTilde, bar.phiLarge)
    o["psiTilde<=phiTilde"] = ss.check_ordering(bar.psiTilde, bar.phiTilde, prefer_node=0)
    ordered = all(v.leq for k, v in o.items() if k != "psiTilde<=phiTilde")
    crossing = not o["psiTilde<=phiTilde"].leq
    certified = all(c.passed for c in certs.values())
    strict_slack = certs["psiTilde"].slack > 0 and certs["phiTilde"].slack > 0
    for name, c in certs.items():
        if not c.passed:
            rep.diagnostics.append(f"certificate {name} ({c.kind}) failed, slack {c.slack:.3e}")
    for name, v in o.items():
        if (name == "psiTilde<=phiTilde") == v.leq:
            rep.diagnostics.append(f"ordering {name} has the wrong verdict: {v.witness}")
    if not (ordered and certified):
        return rep

    def run(interval):
        return monotone_solve(interval, spec, mu, FROM_SUB, tol, max_iter, tol_cert)

    with ThreadPoolExecutor(max_workers=2) as pool:
        f1 = pool.submit(run, OrderInterval(bar.psi, bar.phiTilde))
        f2 = pool.submit(run, OrderInterval(bar.psiTilde, bar.phiLarge))
        rep.u1, rep.u2 = f1.result(), f2.result()

    n1, n2 = rep.u1.solution.norms(), rep.u2.solution.norms()
    dist = rep.u1.solution.distance(rep.u2.solution)
    structural = max(n1) <= a * (1 + ORDER_TOL) and min(n2) >= b
    rep.distinctness = {"distance": dist, "u1_norms": n1, "u2_norms": n2, "a": a, "b": b,
                        "separated": bool(structural)}
    converged = rep.u1.converged and rep.u2.converged
    if not converged:
        rep.diagnostics.append("a monotone solve ended with residual above tol_cert")
    rep.third_solution_certified = bool(ordered and crossing and certified and strict_slack
                                        and structural and converged)
    return rep
