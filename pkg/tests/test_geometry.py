import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weakkam_nbody.geometry import (ConsistencyError, DomainError, ProblemSpec,
                                    assign_clusters, cluster_partition, mass_norm,
                                    max_norm, min_mutual_distance, moment_of_inertia)


class TestProblemSpec:
    def test_valid(self):
        spec = ProblemSpec(3, 2, (1, 2, 3), 0.5)
        assert spec.total_mass == 6.0
        assert spec.min_mass == 1.0
        assert spec.as_config(np.arange(6)).shape == (3, 2)

    @pytest.mark.parametrize("kw", [
        dict(n_bodies=2, dim=1, masses=(1, -1), kappa=0.5),
        dict(n_bodies=2, dim=1, masses=(1,), kappa=0.5),
        dict(n_bodies=2, dim=1, masses=(1, 1), kappa=1.0),
        dict(n_bodies=2, dim=1, masses=(1, 1), kappa=0.0),
        dict(n_bodies=0, dim=1, masses=(), kappa=0.5),
    ])
    def test_invalid(self, kw):
        with pytest.raises(DomainError):
            ProblemSpec(**kw)

    def test_subproblem(self):
        spec = ProblemSpec(3, 1, (1, 2, 3), 0.3)
        sub = spec.subproblem([0, 2])
        assert sub.masses == (1.0, 3.0) and sub.kappa == 0.3


class TestNorms:
    def test_max_norm(self):
        assert max_norm([[3, 4], [1, 0]]) == 5.0

    def test_inertia(self):
        x = np.array([[1.0, 0.0], [0.0, 2.0]])
        assert moment_of_inertia([1, 2], x) == 9.0
        assert mass_norm([1, 2], x) == 3.0

    def test_min_mutual_distance(self):
        assert min_mutual_distance([[0.0], [1.0], [3.0]]) == 1.0
        assert min_mutual_distance([[0.0], [0.0]]) == 0.0
        with pytest.raises(DomainError):
            min_mutual_distance([[0.0]])

    @given(st.lists(st.floats(-10, 10), min_size=4, max_size=4),
           st.lists(st.floats(-10, 10), min_size=4, max_size=4))
    def test_max_norm_triangle(self, a, b):
        x = np.reshape(a, (2, 2))
        y = np.reshape(b, (2, 2))
        assert max_norm(x + y) <= max_norm(x) + max_norm(y) + 1e-12


class TestClusters:
    def test_example(self):
        p = cluster_partition([[0.0], [1.0], [10.0]], 2.0, 1.0)
        assert p.check() == (True, True)
        assert 1.0 <= p.size_R < 4.0 ** 3

    def test_single_point(self):
        p = cluster_partition([[1.0, 2.0]], 3.0, 0.5)
        assert p.size_R == 0.5 and p.centers == (0,)

    def test_duplicates_collapse(self):
        p = cluster_partition([[0.0], [0.0], [5.0]], 2.0, 1.0)
        assert len(p.points) == 2

    def test_bad_args(self):
        with pytest.raises(DomainError):
            cluster_partition([[0.0]], 1.0, 1.0)
        with pytest.raises(DomainError):
            cluster_partition([[0.0]], 2.0, 0.0)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 9), st.integers(1, 3), st.floats(1.05, 60), st.floats(1e-3, 10),
           st.integers(0, 2 ** 31))
    def test_partition_conditions(self, n, d, lam, eps, seed):
        rng = np.random.default_rng(seed)
        pts = rng.standard_normal((n, d)) * 10 ** rng.uniform(-2, 2)
        p = cluster_partition(pts, lam, eps)
        assert p.check() == (True, True)
        assert eps <= p.size_R < (2 * lam) ** len(p.points) * eps

    def test_assign(self):
        x = np.array([[0.0], [0.1], [10.0]])
        part = cluster_partition(x, 2.0, 0.2)
        groups = assign_clusters(x, x + 0.01, part)
        assert sorted(map(sorted, groups)) == [[0, 1], [2]]

    def test_assign_inconsistent(self):
        x = np.array([[0.0], [10.0]])
        part = cluster_partition(x, 2.0, 0.1)
        with pytest.raises(ConsistencyError):
            assign_clusters(x, x + 5.0, part)
