"""System description and numerical audits of the structural hypotheses.

The four audits check, on finite samples:

* C1 -- each component is non-decreasing in every variable and vanishes at 0;
* C2 -- the diagonal partial slope blows up at the origin;
* C3 -- sublinear growth along the diagonal;
* C4 -- the two-scale gap between the small-``a`` and large-``b`` thresholds.

C2 and C3 are asymptotic statements, so their audits are heuristics with fixed
thresholds. Every report keeps the raw sequences it judged.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from .core import EllipticityPair
from .exprlang import Expr, evaluate, parse, to_text

DEFAULT_SEED = 0x5EED
NEG_TOL = 1e-12


class NonlinearityError(ValueError):
    pass


class HypothesisError(ValueError):
    """A mandatory structural hypothesis failed its audit."""

    def __init__(self, message: str, report: "AuditReport | None" = None):
        super().__init__(message)
        self.report = report


class ExprComponent:
    def __init__(self, expr: Expr | str, n: int):
        self.expr = parse(expr, n) if isinstance(expr, str) else expr
        self.n = n

    def __call__(self, x):
        return evaluate(self.expr, x)

    def __repr__(self):
        return f"ExprComponent({to_text(self.expr)!r})"


class CombustionComponent:
    """``exp(tau x_i / (tau + x_i)) - 1 + sum_{j != i} x_j ** alpha_j``."""

    def __init__(self, i: int, tau: float, alphas: Sequence[float]):
        self.i = i
        self.tau = float(tau)
        self.alphas = tuple(float(a) for a in alphas)

    def __call__(self, x):
        xi = np.asarray(x[self.i], dtype=float)
        with np.errstate(over="ignore"):
            val = np.expm1(self.tau * xi / (self.tau + xi))
        for j, a in enumerate(self.alphas):
            if j != self.i:
                val = val + np.power(np.asarray(x[j], dtype=float), a)
        return val

    def __repr__(self):
        return f"CombustionComponent(i={self.i}, tau={self.tau}, alphas={self.alphas})"


@dataclass
class Nonlinearity:
    """The right-hand sides ``f_1..f_n`` as vectorised evaluators."""

    components: list[Callable]
    params: dict[str, Any] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.components)

    def raw(self, i: int, x):
        """Unclamped value of component ``i`` (0-based) at ``x`` of shape ``(n, ...)``."""
        return self.components[i](x)

    def component(self, i: int, x):
        v = np.asarray(self.raw(i, x), dtype=float)
        if np.any(v < -NEG_TOL):
            where = np.unravel_index(np.argmin(v), v.shape) if v.ndim else ()
            raise NonlinearityError(
                f"f_{i + 1} is negative ({float(np.min(v)):.3e}) at sample {where}; "
                "sign-changing nonlinearities are not supported")
        return np.maximum(v, 0.0)

    def __call__(self, x) -> np.ndarray:
        """Stack of clamped component values, shape ``(n, ...)``."""
        x = np.asarray(x, dtype=float)
        return np.stack([np.broadcast_to(self.component(i, x), x.shape[1:]) for i in range(self.n)])

    def diagonal(self, i: int, s, clamp: bool = True):
        """``f_i(s, s, ..., s)``."""
        s = np.asarray(s, dtype=float)
        x = np.broadcast_to(s, (self.n,) + s.shape)
        return self.component(i, x) if clamp else self.raw(i, x)

    @classmethod
    def from_expressions(cls, texts: Sequence[str]) -> "Nonlinearity":
        n = len(texts)
        return cls([ExprComponent(t, n) for t in texts], {"expressions": list(texts)})

    def describe(self) -> dict:
        return dict(self.params)


def builtin_combustion(n: int, tau: float, alphas: Sequence[float]) -> Nonlinearity:
    """Coupled combustion-type nonlinearity with Arrhenius parameter ``tau``."""
    if n < 1:
        raise NonlinearityError("n must be >= 1")
    if not (tau > 0 and math.isfinite(tau)):
        raise NonlinearityError(f"tau must be positive, got {tau}")
    alphas = [float(a) for a in alphas]
    if len(alphas) != n:
        raise NonlinearityError(f"need {n} exponents, got {len(alphas)}")
    if any(not 0 < a < 1 for a in alphas):
        raise NonlinearityError(f"exponents must lie in (0, 1), got {alphas}")
    comps = [CombustionComponent(i, tau, alphas) for i in range(n)]
    return Nonlinearity(comps, {"builtin": "combustion", "tau": float(tau), "alphas": alphas})


@dataclass(frozen=True)
class Ball:
    R: float
    N: int

    def __post_init__(self):
        if not self.R > 0:
            raise ValueError(f"ball radius must be positive, got {self.R}")
        if not 1 <= self.N <= 8:
            raise ValueError(f"space dimension must be in 1..8, got {self.N}")


@dataclass
class SystemSpec:
    """``-M+_{lam_i, Lam_i}(D^2 u_i) = mu f_i(u)`` with zero Dirichlet data.

    ``domain`` is a :class:`Ball` (radial discretisation with ``M`` cells) or a
    :class:`pucci.grid2d.Grid2D`.
    """

    pairs: list[EllipticityPair]
    f: Nonlinearity
    domain: Any
    M: int = 4096

    def __post_init__(self):
        if len(self.pairs) != self.f.n:
            raise ValueError(f"{len(self.pairs)} ellipticity pairs but {self.f.n} nonlinearity components")
        if not self.pairs:
            raise ValueError("empty system")

    @property
    def n(self) -> int:
        return len(self.pairs)

    @property
    def is_ball(self) -> bool:
        return isinstance(self.domain, Ball)

    @property
    def grid(self):
        if self.is_ball:
            from .radial import RadialGrid
            return RadialGrid(self.domain.R, self.domain.N, self.M)
        return self.domain

    @property
    def R(self) -> float:
        """Radius of the (largest inscribed) ball."""
        if self.is_ball:
            return self.domain.R
        return self.domain.inscribed_radius

    @property
    def N(self) -> int:
        return self.domain.N if self.is_ball else 2


@dataclass
class AuditReport:
    condition: str
    passed: bool
    witnesses: list[dict] = field(default_factory=list)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.passed and not self.witnesses:
            raise ValueError("a failed audit must carry at least one witness")

    def to_dict(self) -> dict:
        return {"condition": self.condition, "pass": self.passed,
                "witnesses": self.witnesses, "params": self.params}

    @classmethod
    def from_dict(cls, d: dict) -> "AuditReport":
        return cls(d["condition"], bool(d["pass"]), list(d["witnesses"]), dict(d["params"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AuditReport":
        return cls.from_dict(json.loads(text))


def _eval_witness(exc: Exception, **where) -> dict:
    return {"error": f"{type(exc).__name__}: {exc}", **where}


def audit_C1(f: Nonlinearity, box: float = 50.0, samples: int = 1000,
             seed: int = DEFAULT_SEED, tol: float = 1e-10) -> AuditReport:
    """Monotonicity in every variable and ``f(0) = 0`` on random ordered pairs."""
    if not box > 0:
        raise ValueError("box must be positive")
    params = {"box": box, "samples": samples, "seed": seed, "tol": tol}
    rng = np.random.default_rng(seed)
    n = f.n
    x = rng.uniform(0.0, box, size=(n, samples))
    y = x + rng.uniform(0.0, 1.0, size=(n, samples)) * (box - x)
    witnesses = []
    zero = np.zeros(n)
    for i in range(n):
        try:
            f0 = float(f.raw(i, zero))
        except Exception as exc:  # evaluation errors are findings, not crashes
            witnesses.append(_eval_witness(exc, component=i + 1, x=zero.tolist()))
            continue
        if abs(f0) > tol:
            witnesses.append({"component": i + 1, "kind": "nonzero_at_origin", "value": f0})
        try:
            fx = np.broadcast_to(f.raw(i, x), (samples,))
            fy = np.broadcast_to(f.raw(i, y), (samples,))
        except Exception as exc:
            witnesses.append(_eval_witness(exc, component=i + 1))
            continue
        bad = np.flatnonzero(fx > fy + tol)
        if bad.size:
            k = int(bad[np.argmax(fx[bad] - fy[bad])])
            witnesses.append({"component": i + 1, "kind": "decreasing",
                              "x": x[:, k].tolist(), "y": y[:, k].tolist(),
                              "f_x": float(fx[k]), "f_y": float(fy[k]), "violations": int(bad.size)})
    return AuditReport("C1", not witnesses, witnesses, params)


def audit_C2(f: Nonlinearity, s_min: float = 0.5, levels: int = 20,
             threshold: float = 1e3) -> AuditReport:
    """Blow-up of ``(f_i(s e_i) - f_i(0)) / s`` along ``s = s_min 2^-k``."""
    if not 0 < s_min < 1:
        raise ValueError("s_min must lie in (0, 1)")
    s = s_min * 2.0 ** -np.arange(levels + 1)
    params = {"s_min": s_min, "levels": levels, "threshold": threshold, "s": s.tolist(), "slopes": {}}
    witnesses = []
    n = f.n
    for i in range(n):
        x = np.zeros((n, s.size))
        x[i] = s
        try:
            f0 = float(f.raw(i, np.zeros(n)))
            slopes = (np.broadcast_to(f.raw(i, x), s.shape) - f0) / s
        except Exception as exc:
            witnesses.append(_eval_witness(exc, component=i + 1))
            continue
        params["slopes"][str(i + 1)] = slopes.tolist()
        tail = slopes[levels // 2:]
        increasing = bool(np.all(np.diff(tail) > 0))
        if not (increasing and slopes[-1] > threshold):
            witnesses.append({"component": i + 1, "eventually_increasing": increasing,
                              "final_slope": float(slopes[-1]), "s": float(s[-1])})
    return AuditReport("C2", not witnesses, witnesses, params)


def audit_C3(f: Nonlinearity, s_max: float = 1e3, levels: int = 10,
             threshold: float = 0.1) -> AuditReport:
    """Decay of ``f_i(s, ..., s) / s`` along ``s = s_max 2^k``."""
    if not s_max >= 1:
        raise ValueError("s_max must be >= 1")
    s = s_max * 2.0 ** np.arange(levels + 1)
    params = {"s_max": s_max, "levels": levels, "threshold": threshold, "s": s.tolist(), "ratios": {}}
    witnesses = []
    for i in range(f.n):
        try:
            vals = np.broadcast_to(f.diagonal(i, s, clamp=False), s.shape)
        except Exception as exc:
            witnesses.append(_eval_witness(exc, component=i + 1))
            continue
        ratios = vals / s
        params["ratios"][str(i + 1)] = ratios.tolist()
        decreasing = bool(np.all(np.diff(ratios) <= 0))
        small = bool(np.all(ratios < threshold))
        if not (decreasing and small):
            k = int(np.argmax(ratios))
            witnesses.append({"component": i + 1, "decreasing": decreasing,
                              "max_ratio": float(ratios[k]), "s": float(s[k])})
    return AuditReport("C3", not witnesses, witnesses, params)


def check_C4(spec: SystemSpec, a: float, b: float, normsE: Sequence[float],
             A: Sequence[float]) -> AuditReport:
    """Compare ``min_i a / (|e_i| f_i(a..a))`` against ``max_i A_i b / f_i(b..b)``."""
    if not 0 < a < b:
        raise ValueError(f"need 0 < a < b, got a={a}, b={b}")
    n = spec.n
    if len(normsE) != n or len(A) != n:
        raise ValueError("normsE and A need one entry per equation")
    fa = [float(spec.f.diagonal(i, a)) for i in range(n)]
    fb = [float(spec.f.diagonal(i, b)) for i in range(n)]
    witnesses = []
    for i in range(n):
        if fa[i] == 0:
            witnesses.append({"component": i + 1, "kind": "f(a)=0", "a": a})
        if fb[i] == 0:
            witnesses.append({"component": i + 1, "kind": "f(b)=0", "b": b})
    params = {"a": a, "b": b, "normsE": list(map(float, normsE)), "A": list(map(float, A)),
              "f_a": fa, "f_b": fb}
    if witnesses:
        return AuditReport("C4", False, witnesses, params)
    left = min(a / (normsE[i] * fa[i]) for i in range(n))
    right = max(A[i] * b / fb[i] for i in range(n))
    params.update(left=left, right=right)
    if not left > right:
        witnesses.append({"kind": "gap", "left": left, "right": right})
    return AuditReport("C4", not witnesses, witnesses, params)
