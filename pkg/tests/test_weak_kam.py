import json

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings, strategies as st

from weakkam_nbody.action_potential import minimize_action
from weakkam_nbody.geometry import DomainError
from weakkam_nbody.paths import action
from weakkam_nbody.weak_kam import (Grid, GridFunction, PairSolver, PhiTable, ReducedProblem,
                                    batch_free_phi, check_domination, check_eikonal_residual,
                                    extract_calibrated_ray, fit_eikonal_constant,
                                    fixed_point_defect, grid_tolerance, iterate_to_fixed_point,
                                    kepler_oracle, lax_oleinik_step, quantize)

PROB = ReducedProblem.collinear(0.5, 0.5, 8.0)
GRID = Grid.for_problem(PROB, 0.25)
T_STEP = 0.25
TABLE = PhiTable(PROB, GRID, T_STEP)
REF = GRID.nearest([2.0])


def oracle_u(name, grid=GRID, ref=REF):
    return GridFunction.from_callable(grid, lambda p: kepler_oracle(name, p[0]), ref)


def dyadic(rng, n, scale=2 ** 6):
    return np.round(rng.uniform(-scale, scale, n) * 2 ** 20) / 2 ** 20


class TestReducedProblem:
    def test_coefficients(self):
        assert PROB.masses == (0.5,) and PROB.k == 1.0
        pl = ReducedProblem.planar(0.5)
        assert pl.a == 2.0 and pl.k == pytest.approx(0.5)

    def test_invalid(self):
        with pytest.raises(DomainError):
            ReducedProblem.collinear(0.5, 0.0, 1.0)
        with pytest.raises(DomainError):
            ReducedProblem("other", 0.5, 1, 1, 0, 1)

    @pytest.mark.parametrize("prob,a,b", [
        (ReducedProblem.collinear(0.5), [[1.0]], [[4.0]]),
        (ReducedProblem.collinear(0.3), [[0.7]], [[2.0]]),
        (ReducedProblem.planar(0.5), [[1.0, 0.0]], [[0.3, 1.2]]),
    ])
    def test_lift_reproduces_action(self, prob, a, b):
        est = minimize_action(prob, a, b, 1.5, 32)
        lifted = prob.lift(est.path)
        assert action(prob.full_spec(), lifted) == pytest.approx(action(prob, est.path), abs=1e-10)


class TestPairSolver:
    def test_matches_minimize_action(self):
        f, _ = PairSolver(PROB, 49).solve([[1.0]], [[4.0]], 7 / 3)
        est = minimize_action(PROB, [[1.0]], [[4.0]], 7 / 3, 49, times=np.linspace(0, 7 / 3, 49))
        assert f[0] == pytest.approx(est.value, rel=1e-10)

    def test_free_phi_closed_form(self):
        v = batch_free_phi(PROB, [[1.0], [0.5], [2.0]], [[4.0], [2.0], [2.0]], nodes=48)
        assert v[0] == pytest.approx(2.0, rel=1e-3)
        assert v[1] == pytest.approx(2 * (np.sqrt(2) - np.sqrt(0.5)), rel=1e-3)
        assert v[2] == 0.0

    def test_planar_avoids_origin(self):
        pl = ReducedProblem.planar(0.5)
        f, X = PairSolver(pl).solve([[-1.0, 0.0]], [[1.0, 0.0]], 1.0)
        assert np.isfinite(f[0])
        assert np.min(np.linalg.norm(X[0], axis=1)) > 0


class TestGridFunction:
    def test_normalize(self):
        u = oracle_u("u_minus").normalized()
        assert u.values[REF] == 0.0

    def test_csv_and_matrix(self):
        u = oracle_u("u_minus")
        lines = u.to_csv().splitlines()
        assert lines[0] == "x0,value,trusted" and len(lines) == GRID.size + 1
        assert len(u.to_gnuplot_matrix().splitlines()) == GRID.size
        pl = ReducedProblem.planar(0.5, half_width=1.0, collar=0.1)
        g = Grid.for_problem(pl, 0.25)
        v = GridFunction.from_callable(g, lambda p: kepler_oracle("rotation_invariant", p))
        rows = v.to_gnuplot_matrix().splitlines()
        assert len(rows) == 1 + len(g.axes[1]) and any("nan" in r for r in rows[1:])

    def test_bad_length(self):
        with pytest.raises(DomainError):
            GridFunction(GRID, np.zeros(3))


class TestOperatorAlgebra:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_monotone(self, seed):
        rng = np.random.default_rng(seed)
        u = GridFunction(GRID, dyadic(rng, GRID.size), REF)
        v = u.replace(u.values + np.abs(dyadic(rng, GRID.size)))
        a = lax_oleinik_step(PROB, u, T_STEP, TABLE, normalize=False)
        b = lax_oleinik_step(PROB, v, T_STEP, TABLE, normalize=False)
        assert np.all(a.values <= b.values)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31), st.integers(-2 ** 30, 2 ** 30))
    def test_constants_commute(self, seed, c_int):
        c = c_int / 2 ** 24
        rng = np.random.default_rng(seed)
        u = GridFunction(GRID, dyadic(rng, GRID.size), REF)
        a = lax_oleinik_step(PROB, u, T_STEP, TABLE, normalize=False)
        b = lax_oleinik_step(PROB, u.replace(u.values + c), T_STEP, TABLE, normalize=False)
        assert np.array_equal(b.values, a.values + c)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 31))
    def test_nonexpansive(self, seed):
        rng = np.random.default_rng(seed)
        u = GridFunction(GRID, dyadic(rng, GRID.size), REF)
        v = GridFunction(GRID, dyadic(rng, GRID.size), REF)
        a = lax_oleinik_step(PROB, u, T_STEP, TABLE, normalize=False)
        b = lax_oleinik_step(PROB, v, T_STEP, TABLE, normalize=False)
        assert np.max(np.abs(a.values - b.values)) <= np.max(np.abs(u.values - v.values))

    def test_forward_monotone(self):
        rng = np.random.default_rng(0)
        u = GridFunction(GRID, dyadic(rng, GRID.size), REF)
        v = u.replace(u.values + 1.0)
        a = lax_oleinik_step(PROB, u, T_STEP, TABLE, forward=True, normalize=False)
        b = lax_oleinik_step(PROB, v, T_STEP, TABLE, forward=True, normalize=False)
        assert np.array_equal(b.values, a.values + 1.0)

    def test_quantize_is_dyadic(self):
        q = quantize([0.1, 1 / 3])
        assert np.array_equal(q * 2 ** 32, np.round(q * 2 ** 32))

    def test_zero_function(self):
        z = GridFunction.constant(GRID, 0.0, REF)
        w = lax_oleinik_step(PROB, z, T_STEP, TABLE, normalize=False)
        assert np.all(w.values >= 0)
        assert np.all(w.values <= TABLE.diagonal())

    def test_table_mismatch(self):
        with pytest.raises(DomainError):
            lax_oleinik_step(PROB, oracle_u("u_minus"), 0.5, TABLE)


class TestSemigroup:
    def test_oracle_nearly_fixed(self):
        d = fixed_point_defect(PROB, oracle_u("u_minus"), T_STEP, TABLE)
        assert d < 2 * grid_tolerance(GRID.h)

    def test_forward_oracle(self):
        d = fixed_point_defect(PROB, oracle_u("u_plus"), T_STEP, TABLE, forward=True)
        assert d < 2 * grid_tolerance(GRID.h)

    def test_semigroup_property(self):
        u = oracle_u("u_minus")
        table2 = PhiTable(PROB, GRID, 2 * T_STEP)
        twice = lax_oleinik_step(PROB, lax_oleinik_step(PROB, u, T_STEP, TABLE), T_STEP, TABLE)
        once = lax_oleinik_step(PROB, u, 2 * T_STEP, table2)
        mask = twice.trusted & once.trusted
        assert np.max(np.abs(twice.values - once.values)[mask]) <= 2 * grid_tolerance(GRID.h)

    def test_iterate_from_zero(self):
        u0 = GridFunction.constant(GRID, 0.0, REF)
        u, rep = iterate_to_fixed_point(PROB, u0, T_STEP, 1e-4, table=TABLE, domination_pairs=20)
        assert rep.converged and rep.sup_change < 1e-4
        assert rep.dominated_violation <= grid_tolerance(GRID.h)
        assert json.loads(rep.to_json())["t_step"] == T_STEP
        # dominated functions satisfy u ≤ T_t u (up to the grid tolerance)
        w = lax_oleinik_step(PROB, u, T_STEP, TABLE, normalize=False)
        assert np.all((u.values - w.values)[w.trusted] <= grid_tolerance(GRID.h))

    def test_bad_tol(self):
        with pytest.raises(DomainError):
            iterate_to_fixed_point(PROB, oracle_u("u_minus"), T_STEP, 0.0, table=TABLE)


class TestDomination:
    def test_constant(self):
        u = GridFunction.constant(GRID, 3.0, REF)
        pairs = [(i, j) for i in range(0, GRID.size, 5) for j in range(0, GRID.size, 7)]
        assert check_domination(PROB, u, pairs) <= 0

    def test_oracle_calibrated_along_ray(self):
        u = oracle_u("u_minus")
        pairs = [(GRID.nearest([1.0]), GRID.nearest([4.0])), (GRID.nearest([2.0]), GRID.nearest([6.0]))]
        assert abs(check_domination(PROB, u, pairs)) < 5e-3

    def test_steep_function_violates(self):
        u = oracle_u("u_minus")
        u10 = u.replace(10 * u.values)
        pairs = [(GRID.nearest([1.0]), GRID.nearest([4.0]))]
        assert check_domination(PROB, u10, pairs) > 1.0


class TestOracles:
    def test_values(self):
        assert kepler_oracle("u_minus", [4.0]) == -4.0
        assert kepler_oracle("u_plus", [3.0, -1.0]) == 4.0
        assert kepler_oracle("rotation_invariant", [1.0, 0.0]) == -1.0
        assert kepler_oracle("planar_busemann", [-2.0, 0.0]) == 0.0
        assert kepler_oracle("busemann_b_plus", [1.0, 0.0]) == -2.0
        assert kepler_oracle("busemann_b_plus", [0.0, 1.0]) == 2.0

    def test_symbolic_eikonal(self):
        x, y = sp.symbols("x y", real=True)
        r = sp.sqrt(x ** 2 + y ** 2)
        u = -2 * sp.sqrt(x - y)
        assert sp.simplify(sp.diff(u, x) ** 2 + sp.diff(u, y) ** 2 - 2 / (x - y)) == 0
        rot = -r ** sp.Rational(1, 2)
        bus = -sp.sqrt(r + x)
        g_rot = sp.simplify(sp.diff(rot, x) ** 2 + sp.diff(rot, y) ** 2)
        g_bus = sp.simplify(sp.diff(bus, x) ** 2 + sp.diff(bus, y) ** 2)
        pt = {x: sp.Rational(3, 5), y: sp.Rational(4, 5)}
        assert g_rot.subs(pt) == sp.Rational(1, 4)
        assert sp.nsimplify(g_bus.subs(pt)) == sp.Rational(1, 2)

    def test_collinear_residual_order(self):
        res = []
        for h in (0.25, 0.125):
            g = Grid.for_problem(PROB, h)
            u = oracle_u("u_minus", g, 0)
            rep = check_eikonal_residual(PROB, u, away=1.0)
            res.append(rep.max_abs)
        assert res[0] / res[1] >= 1.8

    def test_constant_is_strict_subsolution(self):
        rep = check_eikonal_residual(PROB, GridFunction.constant(GRID, 1.0))
        assert rep.max_positive < 0 and not rep.solution(grid_tolerance(GRID.h))

    def test_fit_constant(self):
        pl = ReducedProblem.planar(0.5, half_width=2.0, collar=0.1)
        g = Grid.for_problem(pl, 0.05)
        u = GridFunction.from_callable(g, lambda p: kepler_oracle("rotation_invariant", p))
        assert fit_eikonal_constant(u, "rotation_invariant") == pytest.approx(0.25, rel=1e-2)


class TestCalibratedRays:
    def test_u_minus_expands(self):
        u = oracle_u("u_minus")
        ray = extract_calibrated_ray(PROB, u, GRID.nearest([1.0]), 2.0, 0.5)
        pts = GRID.points[ray.node_indices, 0]
        assert np.all(np.diff(pts) > 0)
        assert ray.ok

    def test_constant_fails(self):
        u = GridFunction.constant(GRID, 0.0)
        ray = extract_calibrated_ray(PROB, u, GRID.nearest([3.0]), 1.0, 0.25,
                                     tol=grid_tolerance(GRID.h))
        assert not ray.ok and min(ray.defects) > 0

    def test_truncation_flag(self):
        u = oracle_u("u_minus")
        ray = extract_calibrated_ray(PROB, u, GRID.nearest([6.0]), 20.0, 0.5)
        assert ray.truncated and not ray.ok
