"""Command-line front end: ``pucci thresholds|solve|multiplicity|sweep``.

Exit codes: 0 success, 2 configuration or argument error, 3 two-scale
threshold condition violated, 4 barrier, audit or iteration failure, 5 ``mu``
outside the multiplicity window, 6 certificate or ordering failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from . import __version__
from . import iterate as it
from . import subsuper as ss
from .core import EllipticityPair
from .nonlinearity import (Ball, HypothesisError, Nonlinearity, NonlinearityError, SystemSpec,
                           audit_C1, builtin_combustion, check_C4)
from .exprlang import ExprError

EXIT_OK, EXIT_CONFIG, EXIT_C4, EXIT_BARRIER, EXIT_WINDOW, EXIT_CERT = 0, 2, 3, 4, 5, 6


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- config

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True, frozen=True)


class EquationCfg(_Strict):
    lam: float = Field(alias="lambda", gt=0)
    Lam: float = Field(alias="Lambda", gt=0)


class BallCfg(_Strict):
    type: Literal["ball"]
    R: float = Field(gt=0)
    N: int = Field(ge=1, le=8)


class Grid2DCfg(_Strict):
    type: Literal["grid2d"]
    shape: Optional[Literal["disc", "square", "lshape"]] = None
    mask_file: Optional[str] = Field(default=None, alias="mask-file")
    h: Optional[float] = Field(default=None, gt=0)
    K: int = Field(default=4, ge=1)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.shape is None) == (self.mask_file is None):
            raise ValueError("grid2d domain needs exactly one of 'shape' or 'mask-file'")
        if self.shape is not None and self.h is None:
            raise ValueError("grid2d shape needs a spacing 'h'")
        return self


class CombustionCfg(_Strict):
    builtin: Literal["combustion"]
    tau: float = Field(gt=0)
    alphas: list[float]


class ExpressionsCfg(_Strict):
    expressions: list[str]


class NumericsCfg(_Strict):
    M: int = Field(default=4096, ge=16)
    tol: float = Field(default=1e-8, gt=0)
    tol_cert: float = Field(default=1e-6, gt=0)
    max_iter: int = Field(default=10_000, ge=1)
    seed: int = 0x5EED


class Config(_Strict):
    n: int = Field(ge=1)
    equations: list[EquationCfg]
    domain: Union[BallCfg, Grid2DCfg] = Field(discriminator="type")
    nonlinearity: Union[CombustionCfg, ExpressionsCfg]
    numerics: NumericsCfg = NumericsCfg()

    @model_validator(mode="after")
    def _sizes(self):
        if len(self.equations) != self.n:
            raise ValueError(f"{len(self.equations)} equations listed for n={self.n}")
        for k, eq in enumerate(self.equations):
            if eq.lam > eq.Lam:
                raise ValueError(f"equation {k + 1}: need lambda <= Lambda")
        nl = self.nonlinearity
        count = len(nl.alphas) if isinstance(nl, CombustionCfg) else len(nl.expressions)
        if count != self.n:
            raise ValueError(f"nonlinearity has {count} components for n={self.n}")
        return self


def load_config(path) -> tuple[Config, SystemSpec]:
    try:
        text = Path(path).read_text(encoding="utf-8")
        cfg = Config.model_validate(json.loads(text))
    except (OSError, json.JSONDecodeError, ValidationError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    return cfg, build_spec(cfg, Path(path).parent)


def build_spec(cfg: Config, base: Path = Path(".")) -> SystemSpec:
    try:
        pairs = [EllipticityPair(e.lam, e.Lam) for e in cfg.equations]
        nl = cfg.nonlinearity
        if isinstance(nl, CombustionCfg):
            f = builtin_combustion(cfg.n, nl.tau, nl.alphas)
        else:
            f = Nonlinearity.from_expressions(nl.expressions)
        d = cfg.domain
        if isinstance(d, BallCfg):
            domain = Ball(d.R, d.N)
        else:
            from . import grid2d
            if d.shape is not None:
                domain = grid2d.make_grid(d.shape, d.h, d.K)
            else:
                mask_path = Path(d.mask_file)
                if not mask_path.is_absolute():
                    mask_path = base / mask_path
                domain = grid2d.grid_from_maskfile(mask_path.read_text(encoding="utf-8"), d.K)
        return SystemSpec(pairs, f, domain, cfg.numerics.M)
    except (ValueError, NonlinearityError, ExprError, OSError) as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------- output

def _meta() -> dict:
    return {"version": __version__, "timestamp": datetime.now(timezone.utc).isoformat()}


def emit(payload: dict, out: str | None, no_meta: bool) -> None:
    if not no_meta:
        payload = {"meta": _meta(), **payload}
    text = json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def profiles_csv(spec: SystemSpec, states: dict) -> str:
    """Profiles of several states on the common grid, 17 significant digits."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = [f"{name}_u{i + 1}" for name in states for i in range(spec.n)]
    grid = spec.grid
    if spec.is_ball:
        head, coords = ["r"], [grid.r]
    else:
        x, y = grid.coords
        head, coords = ["x", "y"], [x.ravel(), y.ravel()]
    w.writerow(head + names)
    cols = coords + [s.values[i].ravel() for s in states.values() for i in range(spec.n)]
    for row in zip(*cols):
        w.writerow([f"{v:.17g}" for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------- commands

def cmd_thresholds(spec: SystemSpec, a: float, b: float) -> tuple[int, dict]:
    try:
        rep = ss.thresholds(spec, a, b)
    except ss.ThresholdError as exc:
        c4 = check_C4(spec, a, b, ss.torsion_norms(spec),
                      [ss.A_constant(p, spec.N, spec.R)[0] for p in spec.pairs])
        return EXIT_C4, {"error": str(exc), "C4": c4.to_dict()}
    c4 = check_C4(spec, a, b, rep.normE, rep.A)
    payload = {"thresholds": rep.to_dict(), "C4": c4.to_dict()}
    return (EXIT_OK if rep.window else EXIT_C4), payload


def _minimal_pipeline(spec: SystemSpec, mu: float, num: NumericsCfg, both: bool):
    psi, m, rule = ss.build_subsolution(spec, mu)
    phi, mt = ss.build_large_supersolution(spec, mu, above=psi)
    interval = it.OrderInterval(psi, phi)
    shell = ss.kink_mask(spec)
    lo = it.monotone_solve(interval, spec, mu, it.FROM_SUB, num.tol, num.max_iter, num.tol_cert,
                           exclude=shell)
    hi = it.monotone_solve(interval, spec, mu, it.FROM_SUP, num.tol, num.max_iter,
                           num.tol_cert) if both else None
    return {"m_mu": m, "m_rule": rule, "mTilde_mu": mt}, lo, hi


def cmd_solve(spec: SystemSpec, mu: float, num: NumericsCfg) -> tuple[int, dict, dict]:
    c1 = audit_C1(spec.f, seed=num.seed)
    if not c1.passed:
        return EXIT_BARRIER, {"error": "nonlinearity is not monotone", "C1": c1.to_dict()}, {}
    try:
        scalars, lo, hi = _minimal_pipeline(spec, mu, num, both=True)
    except (ss.BarrierError, it.IterationError, it.OrderIntervalError, ArithmeticError) as exc:
        return EXIT_BARRIER, {"error": f"{type(exc).__name__}: {exc}", "C1": c1.to_dict()}, {}
    ordered = ss.check_ordering(lo.solution, hi.solution)
    payload = {"mu": mu, "barriers": scalars, "minimal": lo.to_dict(), "maximal": hi.to_dict(),
               "minimal<=maximal": ordered.to_dict(), "C1": c1.to_dict()}
    ok = lo.converged and hi.converged and ordered.leq
    return (EXIT_OK if ok else EXIT_BARRIER), payload, {"minimal": lo.solution, "maximal": hi.solution}


def cmd_multiplicity(spec: SystemSpec, mu: float, a: float, b: float,
                     num: NumericsCfg) -> tuple[int, dict]:
    if not spec.is_ball:
        return EXIT_CONFIG, {"error": "multiplicity certification needs a ball domain"}
    try:
        rep = it.find_multiplicity(spec, mu, a, b, num.tol, num.max_iter, num.tol_cert)
    except ss.ThresholdError as exc:
        payload = {"error": str(exc)}
        if exc.report is not None:
            th = exc.report
            payload["thresholds"] = th.to_dict()
            payload["reason"] = ("thresholds cross: muLower_proof >= muStar, the window is empty"
                                 if not th.window else
                                 "mu lies outside the window or below the bump headroom")
        return EXIT_WINDOW, payload
    except HypothesisError as exc:
        return EXIT_BARRIER, {"error": str(exc), "C1": exc.report.to_dict() if exc.report else None}
    code = EXIT_OK if rep.third_solution_certified else EXIT_CERT
    return code, rep.to_dict()


def geometric_grid(mu_min: float, mu_max: float, steps: int) -> list[float]:
    mus = np.geomspace(mu_min, mu_max, steps)
    mus[0], mus[-1] = mu_min, mu_max
    return [float(m) for m in mus]


def cmd_sweep(spec: SystemSpec, mu_min: float, mu_max: float, steps: int,
              num: NumericsCfg) -> tuple[int, str, list[dict]]:
    mus = geometric_grid(mu_min, mu_max, steps)

    def row(mu):
        try:
            _, lo, _ = _minimal_pipeline(spec, mu, num, both=False)
            return {"mu": mu, "norms": lo.solution.norms(), "iterations": lo.iterations,
                    "residual": lo.residual, "error": ""}
        except Exception as exc:  # recorded per row
            return {"mu": mu, "norms": [math.nan] * spec.n, "iterations": 0,
                    "residual": math.nan, "error": f"{type(exc).__name__}: {exc}"}

    threads = max(1, int(os.environ.get("PUCCI_THREADS", "1") or 1))
    # warm the per-grid caches once so worker threads only read them
    ss.torsion_state(spec)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        rows = list(pool.map(row, mus))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["mu"] + [f"u{i + 1}_norm" for i in range(spec.n)] + ["iterations", "residual", "error"])
    for r in rows:
        w.writerow([f"{r['mu']:.17g}"] + [f"{v:.17g}" for v in r["norms"]]
                   + [r["iterations"], f"{r['residual']:.17g}", r["error"]])
    ok = sum(1 for r in rows if not r["error"])
    return (EXIT_OK if ok >= 0.9 * len(rows) else EXIT_BARRIER), buf.getvalue(), rows


# ---------------------------------------------------------------- entry point

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pucci", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="JSON configuration file")
        sp.add_argument("--out", help="output path (default: stdout)")
        sp.add_argument("--no-meta", action="store_true", help="omit version and timestamp")

    sp = sub.add_parser("thresholds", help="multiplicity thresholds")
    common(sp)
    sp.add_argument("--a", type=float, required=True)
    sp.add_argument("--b", type=float, required=True)

    sp = sub.add_parser("solve", help="minimal and maximal solutions")
    common(sp)
    sp.add_argument("--mu", type=float, required=True)
    sp.add_argument("--profiles", help="CSV path for the solution profiles")

    sp = sub.add_parser("multiplicity", help="certify the three-solution hypotheses")
    common(sp)
    sp.add_argument("--mu", type=float, required=True)
    sp.add_argument("--a", type=float, required=True)
    sp.add_argument("--b", type=float, required=True)

    sp = sub.add_parser("sweep", help="solution norms over a geometric mu grid")
    common(sp)
    sp.add_argument("--mu-min", type=float, required=True)
    sp.add_argument("--mu-max", type=float, required=True)
    sp.add_argument("--steps", type=int, required=True)
    return p


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad arguments
        return int(exc.code or 0)
    try:
        cfg, spec = load_config(args.config)
        num = cfg.numerics
        if args.command == "thresholds":
            if not 0 < args.a < args.b:
                raise ConfigError(f"need 0 < a < b, got a={args.a}, b={args.b}")
            code, payload = cmd_thresholds(spec, args.a, args.b)
            emit(payload, args.out, args.no_meta)
            return code
        if args.command == "solve":
            if not args.mu > 0:
                raise ConfigError("mu must be positive")
            code, payload, states = cmd_solve(spec, args.mu, num)
            emit(payload, args.out, args.no_meta)
            if states and args.profiles:
                Path(args.profiles).write_text(profiles_csv(spec, states), encoding="utf-8")
            return code
        if args.command == "multiplicity":
            if not args.mu > 0:
                raise ConfigError("mu must be positive")
            if not 0 < args.a < args.b:
                raise ConfigError(f"need 0 < a < b, got a={args.a}, b={args.b}")
            code, payload = cmd_multiplicity(spec, args.mu, args.a, args.b, num)
            emit(payload, args.out, args.no_meta)
            return code
        if args.command == "sweep":
            if not 0 < args.mu_min < args.mu_max:
                raise ConfigError("need 0 < mu-min < mu-max")
            if args.steps < 2:
                raise ConfigError("need at least 2 steps")
            code, text, _ = cmd_sweep(spec, args.mu_min, args.mu_max, args.steps, num)
            if args.out:
                Path(args.out).write_text(text, encoding="utf-8")
            else:
                sys.stdout.write(text)
            return code
    except ConfigError as exc:
        print(f"pucci: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonlinearityError, ExprError) as exc:
        # sign-changing or non-evaluable f: a hypothesis failure, not a config error
        emit({"error": f"{type(exc).__name__}: {exc}"}, args.out, args.no_meta)
        return EXIT_BARRIER
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
