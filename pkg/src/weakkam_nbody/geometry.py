"""Configuration-space primitives and cluster partitions.

Configurations are stored as float arrays of shape ``(N, d)``: row ``i`` is
the position of body ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

DEDUP_TOL = 1e-12
MEMBERSHIP_RTOL = 1e-9


class DomainError(ValueError):
    """An operation was called outside its domain of definition."""


class ConsistencyError(RuntimeError):
    """Inputs violate a precondition that can only be detected late."""


@dataclass(frozen=True)
class ProblemSpec:
    n_bodies: int
    dim: int
    masses: tuple
    kappa: float

    def __post_init__(self):
        masses = tuple(float(m) for m in self.masses)
        object.__setattr__(self, "masses", masses)
        if self.n_bodies < 1 or self.dim < 1:
            raise DomainError("n_bodies and dim must be positive")
        if len(masses) != self.n_bodies:
            raise DomainError(f"expected {self.n_bodies} masses, got {len(masses)}")
        if any(not np.isfinite(m) or m <= 0 for m in masses):
            raise DomainError("masses must be strictly positive")
        if not 0.0 < self.kappa < 1.0:
            raise DomainError("kappa must lie in (0, 1)")

    @classmethod
    def unit(cls, n_bodies: int, dim: int, kappa: float) -> "ProblemSpec":
        return cls(n_bodies, dim, (1.0,) * n_bodies, kappa)

    @property
    def mass_array(self) -> np.ndarray:
        return np.asarray(self.masses)

    @property
    def total_mass(self) -> float:
        return float(sum(self.masses))

    @property
    def min_mass(self) -> float:
        return float(min(self.masses))

    def as_config(self, x) -> np.ndarray:
        """Coerce ``x`` to a configuration array of this problem's shape."""
        arr = np.asarray(x, dtype=float).reshape(self.n_bodies, self.dim)
        return arr

    def potential_samples(self, X) -> np.ndarray:
        from .dynamics import potential_batch
        return potential_batch(self.masses, self.kappa, X)

    def potential_grad_samples(self, X) -> np.ndarray:
        from .dynamics import potential_grad_batch
        return potential_grad_batch(self.masses, self.kappa, X)

    def potential_hess_samples(self, X) -> np.ndarray:
        from .dynamics import potential_hess_batch
        return potential_hess_batch(self.masses, self.kappa, X)

    def subproblem(self, indices: Sequence[int]) -> "ProblemSpec":
        return ProblemSpec(len(indices), self.dim,
                           tuple(self.masses[i] for i in indices), self.kappa)


def max_norm(x) -> float:
    """max_i ||r_i||."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return 0.0
    return float(np.max(np.linalg.norm(x, axis=-1)))


def moment_of_inertia(masses, x) -> float:
    x = np.asarray(x, dtype=float)
    return float(np.sum(np.asarray(masses) * np.sum(x * x, axis=-1)))


def mass_norm(masses, x) -> float:
    return float(np.sqrt(moment_of_inertia(masses, x)))


def mass_inner(masses, x, y) -> float:
    return float(np.sum(np.asarray(masses)[:, None] * np.asarray(x) * np.asarray(y)))


def pair_distances(x) -> np.ndarray:
    """Condensed vector of ||r_i - r_j|| for i < j (lexicographic order)."""
    x = np.asarray(x, dtype=float)
    i, j = np.triu_indices(len(x), k=1)
    return np.linalg.norm(x[i] - x[j], axis=-1)


def min_mutual_distance(x) -> float:
    """Smallest distance between two bodies; zero exactly at collisions."""
    x = np.asarray(x, dtype=float)
    if len(x) < 2:
        raise DomainError("min_mutual_distance needs at least two bodies")
    return float(np.min(pair_distances(x)))


@dataclass(frozen=True)
class ClusterPartition:
    """Centers (indices into the deduplicated point list) and size R.

    ``points`` holds the deduplicated input points, ``source_index`` maps each
    of them back to its first occurrence in the original input.
    """

    centers: tuple
    size_R: float
    lam: float
    points: np.ndarray = field(repr=False)
    source_index: tuple = field(repr=False)

    @property
    def center_points(self) -> np.ndarray:
        return self.points[list(self.centers)]

    def check(self) -> tuple[bool, bool]:
        """(condition 1 holds, condition 2 holds)."""
        c = self.center_points
        sep_ok = all(np.linalg.norm(c[a] - c[b]) >= 2 * self.lam * self.size_R
                     for a, b in combinations(range(len(c)), 2))
        d = np.linalg.norm(self.points[:, None, :] - c[None, :, :], axis=-1)
        cover_ok = bool(np.all(d.min(axis=1) <= self.size_R * (1 + MEMBERSHIP_RTOL)))
        return sep_ok, cover_ok


def _dedup(points: np.ndarray) -> tuple[np.ndarray, list[int]]:
    keep: list[int] = []
    for i, p in enumerate(points):
        if all(np.max(np.abs(p - points[k])) > DEDUP_TOL for k in keep):
            keep.append(i)
    return points[keep], keep


def cluster_partition(points, lam: float, epsilon: float) -> ClusterPartition:
    """λ-cluster partition of a finite point set, built by recursive merging.

    Stage ``k`` (starting at 1) tests the current set at size
    ``(2 lam)**(k-1) * epsilon``.  When a pair is closer than ``2 lam R`` the
    higher-indexed point of the first such pair (lexicographic scan) is
    dropped and the size grows by ``2 lam``.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] == 0:
        raise DomainError("need at least one point")
    if lam <= 1:
        raise DomainError("lambda must exceed 1")
    if epsilon <= 0:
        raise DomainError("epsilon must be positive")
    pts, src = _dedup(pts)

    active = list(range(len(pts)))
    R = float(epsilon)
    while True:
        bad = None
        for a, b in combinations(active, 2):
            if np.linalg.norm(pts[a] - pts[b]) < 2 * lam * R:
                bad = b
                break
        if bad is None:
            # chained removals can leave a point slightly outside every ball;
            # then grow once more without removing anything
            part = ClusterPartition(tuple(active), R, float(lam), pts, tuple(src))
            if part.check()[1]:
                return part
        else:
            active.remove(bad)
        R *= 2 * lam


def assign_clusters(x, y, partition: ClusterPartition) -> list[list[int]]:
    """Group body indices so that body ``i`` is in cluster ``j`` iff both
    ``x[i]`` and ``y[i]`` lie in ``B(center_j, 2R)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    centers = partition.center_points
    radius = 2 * partition.size_R * (1 + MEMBERSHIP_RTOL)
    groups: list[list[int]] = [[] for _ in centers]
    for i in range(len(x)):
        dx = np.linalg.norm(centers - x[i], axis=1)
        dy = np.linalg.norm(centers - y[i], axis=1)
        hits = np.flatnonzero((dx <= radius) & (dy <= radius))
        if len(hits) == 0:
            raise ConsistencyError(f"body {i} is not inside any cluster ball")
        groups[int(hits[0])].append(i)
    return [g for g in groups if g]
