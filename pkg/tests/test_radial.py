import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from pucci.core import EllipticityPair
from pucci.nonlinearity import Ball, Nonlinearity, SystemSpec, builtin_combustion
from pucci.radial import (EigenConvergenceError, RadialField, RadialGrid, RadialSolveError, apply_pucci, march,
                          principal_eigenpair, solve_auxiliary_system, solve_radial, torsion)
from pucci.subsuper import BumpProfile

J01 = float(mp.besseljzero(0, 1))


def grid(M=256, R=1.0, N=2):
    return RadialGrid(R, N, M)


class TestGrid:
    def test_validation(self):
        for args in [(0.0, 2, 32), (1.0, 0, 32), (1.0, 2, 15)]:
            with pytest.raises(ValueError):
                RadialGrid(*args)

    def test_nodes(self):
        g = grid(16, R=2.0)
        assert g.h == 0.125 and g.r[0] == 0 and g.r[-1] == 2.0 and g.r.size == 17


class TestSolve:
    def test_zero_load(self):
        u = solve_radial(np.zeros(257), EllipticityPair(1, 2), grid())
        assert np.all(u.values == 0)

    @pytest.mark.parametrize("lam, Lam, N", [(1, 1, 2), (1, 2, 2), (2, 3, 3), (0.5, 4, 5)])
    def test_unit_load_closed_form(self, lam, Lam, N):
        # u'' < 0 and u' < 0 so only the lam branch is active: u = (R^2 - r^2) / (2 N lam)
        errs = []
        for M in (512, 1024):
            g = grid(M, N=N)
            u = solve_radial(np.ones(M + 1), EllipticityPair(lam, Lam), g)
            errs.append(np.max(np.abs(u.values - (1 - g.r ** 2) / (2 * N * lam))))
        if (N - 1) * Lam <= 2 * lam:
            # centred stencil everywhere reproduces quadratics
            assert max(errs) < 1e-13
        else:
            # slope upwinded on the first few nodes: second order, not exact
            assert errs[0] / errs[1] > 3.5 and errs[1] < 1e-5
        assert np.all(np.diff(u.values) < 0)
        assert np.all(u.derivative[1:] < 0)
        d2 = np.diff(u.values, 2)
        assert np.all(d2 < 0)

    def test_rejects_negative_load(self):
        with pytest.raises(RadialSolveError):
            solve_radial(-np.ones(257), EllipticityPair(1, 1), grid())

    def test_rejects_nonfinite_load(self):
        g = np.ones(257)
        g[17] = np.nan
        with pytest.raises(RadialSolveError, match="node 17"):
            solve_radial(g, EllipticityPair(1, 1), grid())

    @pytest.mark.parametrize("lam, Lam, N", [(1, 1, 2), (1, 3, 2), (2, 5, 3)])
    def test_second_order_convergence(self, lam, Lam, N):
        # manufactured solution u = 1 - r^4: u' < 0, u'' < 0, load lam (12 + 4 (N - 1)) r^2
        errs = []
        for M in (64, 128, 256, 512):
            g = grid(M, N=N)
            load = lam * (12 + 4 * (N - 1)) * g.r ** 2
            u = solve_radial(load, EllipticityPair(lam, Lam), g)
            errs.append(np.max(np.abs(u.values - (1 - g.r ** 4))))
        ratios = np.array(errs[:-1]) / np.array(errs[1:])
        assert np.all(ratios >= 3.5)

    def test_mixed_branch_residual(self):
        # load that makes u'' change sign: discrete equation is satisfied to roundoff
        g = grid(1024)
        load = np.exp(-30 * (g.r - 0.6) ** 2) * 50
        pair = EllipticityPair(1, 3)
        u, _ = march(load, pair, g)
        res = -apply_pucci(u, pair, g)[:-1] - load[:-1]
        assert np.max(np.abs(res)) < 1e-9 * np.max(load)
        assert np.any(np.diff(u, 2) > 0) and np.any(np.diff(u, 2) < 0)


@given(arrays(np.float64, 65, elements=st.floats(0, 100)), arrays(np.float64, 65, elements=st.floats(0, 100)),
       st.floats(0.2, 2), st.floats(1, 5), st.integers(1, 4))
def test_monotone_loading(g1, extra, lam, ratio, N):
    g = grid(64, N=N)
    pair = EllipticityPair(lam, lam * ratio)
    u1 = march(g1, pair, g)[0]
    u2 = march(g1 + extra, pair, g)[0]
    scale = 1 + np.max(np.abs(u2))
    assert np.all(u1 <= u2 + 1e-12 * scale)


@given(arrays(np.float64, 65, elements=st.floats(0, 100)), st.floats(0.2, 2), st.floats(1, 5), st.integers(1, 4))
def test_nonnegative_and_nonincreasing(load, lam, ratio, N):
    g = grid(64, N=N)
    u = march(load, EllipticityPair(lam, lam * ratio), g)[0]
    scale = 1e-12 * (1 + np.max(np.abs(u)))
    assert np.all(u >= -scale)
    assert np.all(np.diff(u) <= scale)


class TestTorsion:
    def test_unit_disc(self):
        e = torsion(EllipticityPair(1, 1), grid(4096))
        assert e.norm == pytest.approx(0.25, abs=1e-12)
        assert np.all(e.values >= 0)

    def test_scaling(self):
        pair = EllipticityPair(1, 2.5)
        e1 = torsion(pair, RadialGrid(1.0, 2, 512))
        e2 = torsion(pair, RadialGrid(2.0, 2, 512))
        assert e2.norm == pytest.approx(4 * e1.norm, rel=1e-12)

    def test_three_dimensions(self):
        e = torsion(EllipticityPair(2, 3), RadialGrid(1.0, 3, 1024))
        assert e.norm == pytest.approx(1 / 12, abs=1e-6)


class TestEigenpair:
    def test_bessel(self):
        mu, phi = principal_eigenpair(EllipticityPair(1, 1), RadialGrid(1.0, 2, 4096))
        assert mu == pytest.approx(J01 ** 2, rel=1e-6)
        assert phi.norm == pytest.approx(1.0)
        assert np.all(phi.values[:-1] > 0)

    def test_scaling(self):
        pair = EllipticityPair(1, 2)
        mu1, _ = principal_eigenpair(pair, RadialGrid(1.0, 2, 512))
        mu2, _ = principal_eigenpair(pair, RadialGrid(2.0, 2, 512))
        assert mu2 == pytest.approx(mu1 / 4, rel=1e-8)

    def test_refinement_self_consistent(self):
        pair = EllipticityPair(1, 2)
        mu1, _ = principal_eigenpair(pair, RadialGrid(1.0, 2, 1024))
        mu2, _ = principal_eigenpair(pair, RadialGrid(1.0, 2, 2048))
        assert abs(mu1 - mu2) < 1e-3 * mu2

    @pytest.mark.parametrize("lam, Lam, N", [(1, 1, 2), (1, 2, 2), (1, 4, 3)])
    def test_residual(self, lam, Lam, N):
        tol = 1e-10
        pair = EllipticityPair(lam, Lam)
        g = RadialGrid(1.0, N, 1024)
        mu, phi = principal_eigenpair(pair, g, tol)
        res = -apply_pucci(phi.values, pair, g)[:-1] - mu * phi.values[:-1]
        assert np.max(np.abs(res)) <= 10 * tol * mu

    def test_nonconvergence(self):
        with pytest.raises(EigenConvergenceError) as err:
            principal_eigenpair(EllipticityPair(1, 2), RadialGrid(1.0, 2, 64), 1e-15, 3)
        assert err.value.gap > 0


class TestField:
    def test_csv_round_trip(self, tmp_path):
        e = torsion(EllipticityPair(1, 2), grid(64))
        text = e.to_csv(tmp_path / "e.csv")
        back = RadialField.from_csv((tmp_path / "e.csv").read_text(), 2)
        assert text.splitlines()[0] == "r,value,derivative"
        np.testing.assert_array_equal(back.values, e.values)
        np.testing.assert_array_equal(back.derivative, e.derivative)
        assert back.grid == e.grid

    def test_interpolation(self):
        g = grid(64)
        f = RadialField(g, 1 - g.r)
        assert f(0.5) == pytest.approx(0.5)
        assert f(2.0) == 0.0

    def test_shape_check(self):
        with pytest.raises(ValueError):
            RadialField(grid(64), np.zeros(10))


class TestAuxiliary:
    def test_zero_bump(self, combustion_spec):
        d = RadialField(combustion_spec.grid, np.zeros(combustion_spec.M + 1))
        assert np.all(solve_auxiliary_system(combustion_spec, 1.0, d).values == 0)

    def test_constant_load_is_torsion(self):
        spec = SystemSpec([EllipticityPair(1, 1)], Nonlinearity.from_expressions(["1"]), Ball(1, 2), M=256)
        g = spec.grid
        psi = solve_auxiliary_system(spec, 1.0, RadialField(g, np.full(257, 3.0)))
        np.testing.assert_allclose(psi[0], (1 - g.r ** 2) / 4, atol=1e-13)

    def test_combustion_bump(self, combustion_spec):
        bump = BumpProfile(20.0, 2 / 3, 2.0, 2.0, 1.0)
        d = bump.field(combustion_spec.grid)
        psi = solve_auxiliary_system(combustion_spec, 0.02, d)
        assert np.all(psi.values[:, 0] > 20)
        assert psi.values[0, 0] == pytest.approx(96.26, abs=0.01)

    def test_negative_bump_rejected(self, combustion_spec):
        d = RadialField(combustion_spec.grid, -np.ones(combustion_spec.M + 1))
        with pytest.raises(ValueError):
            solve_auxiliary_system(combustion_spec, 1.0, d)


@pytest.mark.parametrize("N", [3, 4, 6])
def test_point_load_at_axis_stays_nonnegative(N):
    # centred slope weights turn negative near the axis for large N or ratio
    load = np.zeros(65)
    load[0] = 1.0
    u = march(load, EllipticityPair(1.0, 5.0), grid(64, N=N))[0]
    assert np.all(u >= 0) and np.all(np.diff(u) <= 0)
