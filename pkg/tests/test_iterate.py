import json

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from pucci import iterate as it
from pucci import subsuper as ss
from pucci.core import EllipticityPair
from pucci.nonlinearity import Ball, HypothesisError, Nonlinearity, SystemSpec, builtin_combustion
from pucci.radial import RadialGrid
from pucci.state import SystemState

P11 = EllipticityPair(1, 1)


def spec_of(exprs, M=512, pair=P11):
    return SystemSpec([pair] * len(exprs), Nonlinearity.from_expressions(exprs), Ball(1.0, 2), M=M)


def laplacian_matrix(grid: RadialGrid):
    """Radial Laplacian on nodes 0..M-1 (u_M = 0), assembled independently of the solver."""
    M, N, h = grid.M, grid.N, grid.h
    rows, cols, vals = [0, 0], [0, 1], [-2 * N / h ** 2, 2 * N / h ** 2]
    for k in range(1, M):
        c = (N - 1) / (grid.r[k] * 2 * h)
        for j, v in ((k - 1, 1 / h ** 2 - c), (k, -2 / h ** 2), (k + 1, 1 / h ** 2 + c)):
            if j < M:
                rows.append(k), cols.append(j), vals.append(v)
    return sp.csr_matrix((vals, (rows, cols)), shape=(M, M))


def newton_sqrt(grid, mu, u0, iters=60):
    L = laplacian_matrix(grid)
    u = u0[:-1].copy()
    for _ in range(iters):
        F = -L @ u - mu * np.sqrt(u)
        J = -L - sp.diags(0.5 * mu / np.sqrt(u))
        du = spla.spsolve(J.tocsc(), -F)
        t = 1.0
        while np.any(u + t * du <= 0):
            t *= 0.5
        u = u + t * du
        if np.max(np.abs(du)) < 1e-14 * np.max(u):
            break
    return np.append(u, 0.0)


class TestMonotoneSolve:
    def test_zero_nonlinearity(self):
        spec = spec_of(["0"], M=128)
        e = ss.torsion_state(spec)
        zero = e.scaled(0.0)
        rep = it.monotone_solve(it.OrderInterval(zero, e), spec, 1.0)
        assert rep.iterations == 1 and np.all(rep.solution.values == 0)

    def test_sqrt_against_newton(self):
        spec = spec_of(["pow(u1, 0.5)"], M=512)
        psi, _, _ = ss.build_subsolution(spec, 1.0)
        phi, _ = ss.build_large_supersolution(spec, 1.0, above=psi)
        tol = 1e-10
        rep = it.monotone_solve(it.OrderInterval(psi, phi), spec, 1.0, tol=tol)
        assert rep.converged
        u = rep.solution
        # fixed point of the solution map
        step = it.picard_step(u, spec, 1.0)
        assert np.max(np.abs(step.values - u.values)) < 10 * tol * u.norms()[0]
        oracle = newton_sqrt(spec.grid, 1.0, phi.values[0])
        np.testing.assert_allclose(u.values[0], oracle, atol=1e-8 * oracle.max())

    def test_history_nonincreasing_and_positive(self):
        spec = spec_of(["pow(u1, 0.5)"], M=256)
        psi, _, _ = ss.build_subsolution(spec, 1.0)
        phi, _ = ss.build_large_supersolution(spec, 1.0, above=psi)
        for start in (it.FROM_SUB, it.FROM_SUP):
            rep = it.monotone_solve(it.OrderInterval(psi, phi), spec, 1.0, start)
            h = np.array(rep.history[1:])
            assert np.all(h[1:] <= h[:-1] * (1 + 1e-9))
            assert np.all(rep.solution.values >= 0) and rep.solution.values[0, 0] > 0

    def test_sub_and_sup_limits_coincide(self, combustion_spec):
        mu, tol = 0.02, 1e-10
        psi, _, _ = ss.build_subsolution(combustion_spec, mu)
        phit = ss.build_strict_supersolution(combustion_spec, 1.0, mu)
        interval = it.OrderInterval(psi, phit)
        lo = it.monotone_solve(interval, combustion_spec, mu, it.FROM_SUB, tol=tol)
        hi = it.monotone_solve(interval, combustion_spec, mu, it.FROM_SUP, tol=tol)
        assert ss.check_ordering(lo.solution, hi.solution).leq
        scale = max(hi.solution.norms())
        assert lo.solution.distance(hi.solution) < 10 * tol * scale
        assert lo.residual < 1e-6 and hi.residual < 1e-6

    def test_interval_validation(self):
        spec = spec_of(["u1"], M=64)
        e = ss.torsion_state(spec)
        with pytest.raises(it.OrderIntervalError):
            it.OrderInterval(e, e.scaled(0.5))

    def test_bad_start(self):
        spec = spec_of(["pow(u1, 0.5)"], M=64)
        e = ss.torsion_state(spec)
        with pytest.raises(ValueError):
            it.monotone_solve(it.OrderInterval(e.scaled(0), e), spec, 1.0, "sideways")

    def test_uncertified_start_rejected(self):
        spec = spec_of(["pow(u1, 0.5)"], M=128)
        e = ss.torsion_state(spec)
        # 1000 e is far above the solution: not a subsolution
        with pytest.raises(ss.CertificateError):
            it.monotone_solve(it.OrderInterval(e.scaled(1000), e.scaled(2000)), spec, 1.0)

    def test_escape_detected(self):
        # an uncertified "supersolution" below the solution makes the iterates leave the interval
        spec = spec_of(["pow(u1, 0.5)"], M=128)
        psi, _, _ = ss.build_subsolution(spec, 1.0)
        top = SystemState(spec.grid, 1.5 * psi.values)
        with pytest.raises(it.IntervalEscapeError) as err:
            it.monotone_solve(it.OrderInterval(psi, top), spec, 1.0)
        assert err.value.history

    def test_non_monotone_detected(self):
        spec = spec_of(["pow(u1, 0.5)"], M=128)
        phi, _ = ss.build_large_supersolution(spec, 1.0)
        # skipping the certificate, iterate upward from a supersolution: the first step goes down
        with pytest.raises(it.NonMonotoneError):
            it.monotone_solve(it.OrderInterval(phi, phi.scaled(4)), spec, 1.0, check_start=False)

    def test_max_iter(self):
        spec = spec_of(["pow(u1, 0.5)"], M=128)
        psi, _, _ = ss.build_subsolution(spec, 1.0)
        phi, _ = ss.build_large_supersolution(spec, 1.0, above=psi)
        with pytest.raises(it.IterationError) as err:
            it.monotone_solve(it.OrderInterval(psi, phi), spec, 1.0, max_iter=2)
        assert len(err.value.history) == 2


class TestDecay:
    def test_minimal_solution_decays(self, combustion_spec):
        norms = []
        for mu in (0.0025, 0.005, 0.01, 0.02):
            psi, _, _ = ss.build_subsolution(combustion_spec, mu)
            phit = ss.build_strict_supersolution(combustion_spec, 1.0, mu)
            rep = it.monotone_solve(it.OrderInterval(psi, phit), combustion_spec, mu)
            norms.append(max(rep.solution.norms()))
        assert all(x < y for x, y in zip(norms, norms[1:]))
        assert norms[0] < 0.05


class TestMultiplicity:
    def test_combustion(self, combustion_spec):
        rep = it.find_multiplicity(combustion_spec, 0.1, 1.0, 20.0)
        assert rep.third_solution_certified, rep.diagnostics
        assert max(rep.u1.solution.norms()) <= 1
        assert min(rep.u2.solution.norms()) >= 20
        assert rep.distinctness["distance"] >= 19
        assert rep.orderings["psiTilde<=phiTilde"].witness["node"] == 0
        assert all(c.passed for c in rep.certificates.values())
        assert rep.certificates["psiTilde"].slack > 0 and rep.certificates["phiTilde"].slack > 0
        d = json.loads(rep.to_json())
        assert d["third_solution_certified"] is True

    def test_outside_window(self, combustion_spec):
        th = ss.thresholds(combustion_spec, 1.0, 20.0)
        with pytest.raises(ss.ThresholdError) as err:
            it.find_multiplicity(combustion_spec, 2 * th.muStar, 1.0, 20.0)
        assert err.value.report.muStar == th.muStar

    def test_below_bump_headroom(self, combustion_spec):
        th = ss.thresholds(combustion_spec, 1.0, 20.0)
        with pytest.raises(ss.ThresholdError) as err:
            it.find_multiplicity(combustion_spec, 1.05 * th.muLower_proof, 1.0, 20.0)
        assert err.value.report is not None and err.value.report.window

    def test_small_tau_thresholds_cross(self):
        spec = SystemSpec([P11, P11], builtin_combustion(2, 1.0, [0.5, 0.5]), Ball(1.0, 2), M=512)
        th = ss.thresholds(spec, 1.0, 20.0)
        assert th.muLower_proof > th.muStar
        assert th.muStar == pytest.approx(1 / (0.25 * np.exp(0.5)), rel=1e-9)
        assert th.muLower_proof == pytest.approx(13.5 * 20 / (np.exp(20 / 21) - 1 + np.sqrt(20)), rel=1e-9)
        with pytest.raises(ss.ThresholdError):
            it.find_multiplicity(spec, 1.0, 1.0, 20.0)

    def test_non_monotone_nonlinearity(self):
        spec = spec_of(["(exp(u1/2) - 1) * (u1 - 5)*(u1 - 5)/((u1 - 5)*(u1 - 5) + 4)"], M=256)
        with pytest.raises(HypothesisError) as err:
            it.find_multiplicity(spec, 0.1, 1.0, 20.0)
        assert err.value.report.witnesses
