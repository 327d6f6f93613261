import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from weakkam_nbody.dynamics import potential
from weakkam_nbody.geometry import DomainError, ProblemSpec
from weakkam_nbody.paths import (DiscretePath, action, action_parts, build_reparam,
                                 clustered_constants, collides, collision_parameters, connect,
                                 connect_clustered, graded_grid, holder_ok,
                                 intermediate_configuration, linear_path, segment_clearance,
                                 stationary_path,
                                 connector_constants)


class TestDiscretePath:
    def test_csv_round_trip(self):
        p = DiscretePath([0.0, 0.5, 1.0], np.random.default_rng(0).standard_normal((3, 2, 2)))
        q = DiscretePath.from_csv(p.to_csv())
        assert np.array_equal(p.times, q.times) and np.array_equal(p.nodes, q.nodes)

    def test_validation(self):
        with pytest.raises(DomainError):
            DiscretePath([0.0, 0.0], np.zeros((2, 1, 1)))
        with pytest.raises(DomainError):
            DiscretePath([0.0, 1.0], np.zeros((3, 1, 1)))

    def test_stationary_action(self):
        spec = ProblemSpec.unit(2, 1, 0.5)
        x = np.array([[0.0], [4.0]])
        assert action(spec, stationary_path(x, 3.0)) == pytest.approx(3.0 * potential(spec, x))

    def test_straight_kinetic_exact(self):
        spec = ProblemSpec.unit(2, 1, 0.5)
        x, y = np.array([[0.0], [4.0]]), np.array([[1.0], [6.0]])
        kin, _ = action_parts(spec, linear_path(x, y, np.linspace(0, 2, 7)))
        assert kin == pytest.approx(0.5 * (1 + 4) / 2)

    def test_crossing_has_finite_action(self):
        # κ < 1: passing through a collision costs a finite (integrable) amount
        spec = ProblemSpec.unit(2, 1, 0.5)
        p = linear_path(np.array([[0.0], [1.0]]), np.array([[1.0], [0.0]]), np.linspace(0, 1, 3))
        assert np.isfinite(action(spec, p))
        assert collides(spec, p.nodes)

    def test_leaving_collision_is_not_a_crossing(self):
        spec = ProblemSpec.unit(2, 1, 0.5)
        p = linear_path(np.zeros((2, 1)), np.array([[-1.0], [1.0]]), np.linspace(0, 1, 5))
        assert not collides(spec, p.nodes)
        assert segment_clearance(spec, p.nodes) == pytest.approx(0.5)

    def test_sampled_collision_is_infinite(self):
        spec = ProblemSpec.unit(2, 1, 0.5)
        p = DiscretePath([0.0, 1.0], np.array([[[0.0], [0.0]], [[0.0], [0.0]]]))
        assert action(spec, p) == np.inf

    def test_holder(self):
        spec = ProblemSpec.unit(2, 1, 0.5)
        p = linear_path(np.array([[0.0], [1.0]]), np.array([[0.5], [2.0]]), np.linspace(0, 1, 9))
        assert holder_ok(spec, p)


class TestReparam:
    def test_single_point(self):
        rm = build_reparam(0.5, [0.4])
        assert rm(0.0) == pytest.approx(0.0, abs=1e-12)
        assert rm(1.0) == pytest.approx(1.0, abs=1e-12)
        assert rm(rm.b[0]) == pytest.approx(0.4, abs=1e-12)
        integral = quad(lambda t: rm.derivative(t), 0, 1, points=[rm.b[0]], limit=200)[0]
        assert integral == pytest.approx(1.0, abs=1e-8)

    def test_energy_against_quadrature(self):
        rm = build_reparam(0.7, [-0.3, 0.1, 0.45])
        cuts = sorted({0.0, 1.0, *[b for b in rm.b if 0 < b < 1]})
        num = sum(quad(lambda t: rm.derivative(t) ** 2, lo, hi, limit=400)[0]
                  for lo, hi in zip(cuts[:-1], cuts[1:]))
        assert rm.energy() == pytest.approx(num, rel=1e-6)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 10), st.floats(0.05, 0.95), st.integers(0, 2 ** 31))
    def test_item1_and_energy_bounds(self, m, kappa, seed):
        a = np.random.default_rng(seed).uniform(-0.499, 0.499, m)
        rm = build_reparam(kappa, a)
        assert abs(rm(0.0)) <= 1e-9 and abs(rm(1.0) - 1) <= 1e-9
        assert np.allclose(rm(np.array(rm.b)), np.sort(a), atol=1e-9)
        assert rm.item1_margin(np.linspace(0, 1, 513)).min() >= -1e-9
        assert rm.energy() <= rm.energy_bound()

    def test_monotone(self):
        rm = build_reparam(0.3, [-0.2, 0.2])
        t = np.linspace(0, 1, 1001)
        assert np.all(np.diff(rm(t)) > 0)

    def test_graded_grid(self):
        g = graded_grid(8, [0.5], levels=4)
        assert g[0] == 0.0 and g[-1] == 1.0 and 0.5 in g and np.all(np.diff(g) > 0)


class TestConnect:
    def test_constants(self):
        a, b = connector_constants(0.5, 2, 2.0)
        assert a == pytest.approx(640 * 3 * 2 * 16)
        assert b == pytest.approx(2 * 3 * 2 ** 4 * 4)

    def test_intermediate_spacing(self):
        p = intermediate_configuration(np.zeros(2), 1.0, 3)
        assert np.allclose(np.diff(p[:, 0]), 6.0)

    def test_collision_parameters(self):
        x = np.array([[0.0], [1.0]])
        p = np.array([[1.0], [0.0]])
        assert collision_parameters(x, p) == pytest.approx([0.5])

    @settings(max_examples=40, deadline=None)
    @given(st.sampled_from([2, 3, 5]), st.sampled_from([1, 2]), st.sampled_from([0.3, 0.5, 0.7]),
           st.sampled_from([0.5, 1.0, 5.0]), st.sampled_from([0.5, 2.0, 10.0]),
           st.integers(0, 2 ** 31))
    def test_certificate(self, n, d, kappa, R, T, seed):
        spec = ProblemSpec.unit(n, d, kappa)
        rng = np.random.default_rng(seed)
        x = rng.uniform(-R, R, (n, d)) / np.sqrt(d)
        y = rng.uniform(-R, R, (n, d)) / np.sqrt(d)
        path, cert = connect(spec, x, y, T, np.zeros(d), R)
        assert cert.satisfied
        assert np.array_equal(path.start, x) and np.array_equal(path.end, y)
        assert path.duration == pytest.approx(T)
        assert json.loads(cert.to_json())["satisfied"] is True

    def test_x_equals_y_legs_mirror(self):
        spec = ProblemSpec.unit(3, 1, 0.5)
        x = np.array([[-0.5], [0.0], [0.5]])
        path, cert = connect(spec, x, x, 2.0, [0.0], 1.0)
        assert cert.satisfied
        mid = path.at([0.5, 1.5])
        assert np.allclose(mid[0], mid[1])

    def test_outside_ball(self):
        spec = ProblemSpec.unit(2, 1, 0.5)
        with pytest.raises(DomainError):
            connect(spec, [[0.0], [3.0]], [[0.0], [0.5]], 1.0, [0.0], 1.0)

    def test_clustered(self):
        spec = ProblemSpec.unit(3, 1, 0.5)
        x = np.array([[0.0], [0.1], [10.0]])
        path, cert = connect_clustered(spec, x, x + 0.02, 1.0)
        assert cert.satisfied and cert.details["W0"] <= cert.details["W0_bound"]
        a1, b1 = clustered_constants(spec)
        assert cert.alpha_used == a1 and cert.beta_used == b1

    def test_clustered_from_collision(self):
        spec = ProblemSpec.unit(2, 2, 0.5)
        path, cert = connect_clustered(spec, np.zeros((2, 2)), [[0.5, 0], [-0.5, 0]], 1.0)
        assert cert.satisfied and np.isfinite(cert.action_computed)

    def test_clustered_bound_scaling(self):
        # φ(x,x,T) ≤ (α1+β1) T^{(1−κ)/(1+κ)} with ε = T^{1/(1+κ)}
        spec = ProblemSpec.unit(2, 1, 0.5)
        x = np.array([[0.0], [1.0]])
        a1, b1 = clustered_constants(spec)
        for T in (0.01, 1.0, 100.0):
            _, cert = connect_clustered(spec, x, x, T, epsilon=T ** (1 / 1.5))
            assert cert.action_computed <= (a1 + b1) * T ** (1 / 3)
