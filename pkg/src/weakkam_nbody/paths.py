"""Discrete paths, action quadrature and the explicit bounded-action connectors."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import bisect

from .geometry import (DomainError, ProblemSpec, assign_clusters,
                       cluster_partition, max_norm)

INF = float("inf")

_GL_X, _GL_W = np.polynomial.legendre.leggauss(5)
GAUSS_NODES = 0.5 * (_GL_X + 1.0)
GAUSS_WEIGHTS = 0.5 * _GL_W

A_CLIP = 0.5 - 1e-9
A_DEDUP = 1e-12


class NumericalError(RuntimeError):
    pass


# -- discrete paths ----------------------------------------------------------

@dataclass
class DiscretePath:
    """Piecewise-linear curve through ``nodes`` (shape (K+1, N, d)) at ``times``."""

    times: np.ndarray
    nodes: np.ndarray

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.nodes.ndim == 2:
            self.nodes = self.nodes[:, :, None]
        if len(self.times) != len(self.nodes):
            raise DomainError("times and nodes must have the same length")
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise DomainError("times must be strictly increasing with at least two entries")

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    @property
    def start(self) -> np.ndarray:
        return self.nodes[0]

    @property
    def end(self) -> np.ndarray:
        return self.nodes[-1]

    def at(self, t) -> np.ndarray:
        """Linear interpolation at times ``t`` (scalar or array)."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        k = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, len(self.times) - 2)
        t0, t1 = self.times[k], self.times[k + 1]
        w = ((t - t0) / (t1 - t0))[:, None, None]
        return (1 - w) * self.nodes[k] + w * self.nodes[k + 1]

    def resample(self, times) -> "DiscretePath":
        return DiscretePath(np.asarray(times, dtype=float), self.at(times))

    def rescaled(self, duration: float) -> "DiscretePath":
        """Same geometric curve run over [t0, t0 + duration]."""
        t0 = self.times[0]
        return DiscretePath(t0 + (self.times - t0) * (duration / self.duration), self.nodes)

    def to_csv(self) -> str:
        n, d = self.nodes.shape[1:]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"body{i}_x{j}" for i in range(n) for j in range(d)])
        for t, x in zip(self.times, self.nodes):
            w.writerow([f"{t:.17g}"] + [f"{v:.17g}" for v in x.ravel()])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DiscretePath":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        n = 1 + max(int(h.split("_")[0][4:]) for h in header[1:])
        d = 1 + max(int(h.split("_x")[1]) for h in header[1:])
        data = np.array([[float(v) for v in r] for r in rows[1:]])
        return cls(data[:, 0], data[:, 1:].reshape(-1, n, d))


def _segment_samples(path: DiscretePath):
    x0, x1 = path.nodes[:-1], path.nodes[1:]
    xi = GAUSS_NODES[None, :, None, None]
    return (1 - xi) * x0[:, None] + xi * x1[:, None]


def segment_clearance(system, X, floor: float = 1e-13) -> np.ndarray:
    """Smallest distance to the collision set along each polygonal curve.

    ``X`` has shape (..., K+1, N, d).  Closest approach is exact on every
    segment, so collisions between quadrature samples are not missed.
    Pairs already in collision at an endpoint of the curve are ignored on
    the adjacent segment (leaving a collision is allowed).  For one-body
    systems the collision set is the origin.
    """
    X = np.asarray(X, dtype=float)
    n = X.shape[-2]
    if n >= 2:
        i, j = np.triu_indices(n, k=1)
        R = X[..., i, :] - X[..., j, :]
    elif hasattr(system, "collision_distance"):
        R = X
    else:
        return np.full(X.shape[:-3], INF)
    u, v = R[..., :-1, :, :], np.diff(R, axis=-3)
    vv = np.sum(v * v, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        tau = np.where(vv > 0, -np.sum(u * v, axis=-1) / np.where(vv > 0, vv, 1), 0.0)
    tau = np.clip(tau, 0.0, 1.0)
    gap = np.linalg.norm(u + tau[..., None] * v, axis=-1)
    scale = 1.0 + np.max(np.linalg.norm(X, axis=-1), axis=(-2, -1))
    tiny = floor * scale[..., None]
    start = np.linalg.norm(R[..., 0, :, :], axis=-1) < tiny
    end = np.linalg.norm(R[..., -1, :, :], axis=-1) < tiny
    gap[..., 0, :] = np.where(start & (vv[..., 0, :] > 0), INF, gap[..., 0, :])
    gap[..., -1, :] = np.where(end & (vv[..., -1, :] > 0), INF, gap[..., -1, :])
    return gap.min(axis=(-2, -1))


def collides(system, X, floor: float = 1e-13) -> np.ndarray:
    """True where a curve meets the collision set away from its endpoints."""
    X = np.asarray(X, dtype=float)
    scale = 1.0 + np.max(np.linalg.norm(X, axis=-1), axis=(-2, -1))
    return segment_clearance(system, X, floor) < floor * scale


def action_parts(system, path: DiscretePath) -> tuple[float, float]:
    """(kinetic, potential) integrals of the piecewise-linear path.

    Kinetic is exact for the interpolant; the potential uses 5-point
    Gauss-Legendre on every segment.  ``system`` needs ``masses``,
    ``potential_samples``.
    """
    m = np.asarray(system.masses, dtype=float)
    dt = np.diff(path.times)
    dx = np.diff(path.nodes, axis=0)
    kin = float(np.sum(np.sum(m[None, :, None] * dx * dx, axis=(1, 2)) / (2 * dt)))
    S = _segment_samples(path)
    K, G = S.shape[:2]
    V = system.potential_samples(S.reshape(K * G, *S.shape[2:])).reshape(K, G)
    if not np.all(np.isfinite(V)):
        return kin, INF
    pot = float(np.sum(dt * (V @ GAUSS_WEIGHTS)))
    return kin, pot


def action(system, path: DiscretePath) -> float:
    kin, pot = action_parts(system, path)
    return kin + pot


def holder_ok(system, path: DiscretePath, value: float | None = None) -> bool:
    """Check |γ(t)−γ(s)| ≤ 2 A(γ) |t−s|^{1/2} over all node pairs."""
    a = action(system, path) if value is None else value
    m = np.asarray(system.masses)
    X = path.nodes
    d = np.sqrt(np.einsum("n,ijnk->ij", m, (X[:, None] - X[None, :]) ** 2))
    gap = np.sqrt(np.abs(path.times[:, None] - path.times[None, :]))
    return bool(np.all(d <= 2 * a * gap + 1e-12))


# -- reparametrisation -------------------------------------------------------

@dataclass(frozen=True)
class ReparamMap:
    """F(t) = ∫_0^t max_i c |s − b_i|^{−κ/(1+κ)} ds with F(b_i) = a_i."""

    kappa: float
    a: tuple
    b: tuple
    c: float

    @property
    def m(self) -> int:
        return len(self.a)

    @property
    def a_min(self) -> float:
        return float(min(abs(v) for v in self.a))

    def _G(self, x):
        k = self.kappa
        return self.c * (1 + k) * np.sign(x) * np.abs(x) ** (1 / (1 + k))

    def _cell(self, t):
        b = np.asarray(self.b)
        mids = 0.5 * (b[:-1] + b[1:])
        return np.searchsorted(mids, t)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        j = self._cell(t)
        return np.asarray(self.a)[j] + self._G(t - np.asarray(self.b)[j])

    def derivative(self, t):
        t = np.asarray(t, dtype=float)
        j = self._cell(t)
        with np.errstate(divide="ignore"):
            return self.c * np.abs(t - np.asarray(self.b)[j]) ** (-self.kappa / (1 + self.kappa))

    def energy(self) -> float:
        """∫_0^1 F'(t)^2 dt, exactly, piece by piece."""
        k = self.kappa
        b = np.asarray(self.b)
        mids = 0.5 * (b[:-1] + b[1:])
        cuts = np.unique(np.concatenate([[0.0, 1.0], mids, b]))
        cuts = cuts[(cuts >= 0.0) & (cuts <= 1.0)]
        lo, hi = cuts[:-1], cuts[1:]
        j = self._cell(0.5 * (lo + hi))
        e = (1 - k) / (1 + k)

        def H(x):
            return self.c ** 2 * (1 + k) / (1 - k) * np.sign(x) * np.abs(x) ** e

        return float(np.sum(H(hi - b[j]) - H(lo - b[j])))

    def item1_margin(self, t) -> np.ndarray:
        """min_i |F(t) − a_i| − |t − b_i|^{1/(1+κ)}/(2m); never negative."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        F = self(t)
        a = np.asarray(self.a)[:, None]
        b = np.asarray(self.b)[:, None]
        gap = np.abs(F[None] - a) - np.abs(t[None] - b) ** (1 / (1 + self.kappa)) / (2 * self.m)
        return gap.min(axis=0)

    def energy_bound(self) -> float:
        k = self.kappa
        return (4 + 2 * self.a_min) * (self.m + 1) * (1 + k) / (1 - k)


def _b_for(kappa, a, c):
    """Positions b(c) realizing F(b_i) = a_i and F(0) = 0."""
    k = kappa
    a = np.asarray(a)
    A = np.diff(a)
    B = 2.0 ** (-k) * (A / (c * (1 + k))) ** (1 + k)
    rel = np.concatenate([[0.0], np.cumsum(B)])

    def G(x):
        return c * (1 + k) * np.sign(x) * np.abs(x) ** (1 / (1 + k))

    half = G(B / 2)
    lo = np.concatenate([[-INF], a[1:] - half])
    # F(0)=0 sits in the cell whose F-range [a_j - G(B_{j-1}/2), a_j + G(B_j/2)] contains 0
    j = int(np.searchsorted(lo, 0.0, side="right") - 1)
    y = -a[j]
    bj = -np.sign(y) * (np.abs(y) / (c * (1 + k))) ** (1 + k)
    return rel - rel[j] + bj


def build_reparam(kappa: float, a) -> ReparamMap:
    """Solve δ(c) = 1 by bisection on [1/(2m(1+κ)), 2 + min|a_i|]."""
    a = np.sort(np.asarray(a, dtype=float).ravel())
    if a.size == 0:
        raise DomainError("need at least one target value")
    keep = np.concatenate([[True], np.diff(a) > A_DEDUP])
    a = a[keep]
    m = len(a)
    a_min = float(np.min(np.abs(a)))

    def delta_minus_one(c):
        rm = ReparamMap(kappa, tuple(a), tuple(_b_for(kappa, a, c)), c)
        return float(rm(1.0)) - 1.0

    lo, hi = 1.0 / (2 * m * (1 + kappa)), 2.0 + a_min
    flo, fhi = delta_minus_one(lo), delta_minus_one(hi)
    if flo == 0.0:
        c = lo
    elif fhi == 0.0:
        c = hi
    elif flo * fhi > 0:
        raise NumericalError(f"bisection bracket has no sign change: {flo}, {fhi}")
    else:
        c = bisect(delta_minus_one, lo, hi, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                   maxiter=400)
    return ReparamMap(kappa, tuple(map(float, a)), tuple(map(float, _b_for(kappa, a, c))), float(c))


def graded_grid(n_base: int, singular=(), levels: int = 12) -> np.ndarray:
    """Uniform grid on [0,1] refined geometrically (ratio 1/2) around each point
    of ``singular``, which is included itself when it lies inside."""
    h0 = 1.0 / n_base
    pts = [np.linspace(0.0, 1.0, n_base + 1)]
    offs = h0 * 0.5 ** np.arange(levels + 1)
    for s in singular:
        pts.append(np.array([s]))
        pts.append(s + offs)
        pts.append(s - offs)
    g = np.concatenate(pts)
    g = np.unique(g[(g >= 0.0) & (g <= 1.0)])
    # drop near-duplicates produced by overlapping refinements
    keep = np.concatenate([[True], np.diff(g) > 1e-15])
    g = g[keep]
    g[-1] = 1.0
    return g


# -- connectors --------------------------------------------------------------

@dataclass
class BoundCertificate:
    action_computed: float
    bound_value: float
    alpha_used: float
    beta_used: float
    satisfied: bool
    details: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, default=float)


def connector_constants(kappa: float, n_bodies: int, total_mass: float) -> tuple[float, float]:
    """(α, β) of the explicit connector bound."""
    q = (1 + kappa) / (1 - kappa)
    alpha = 640 * q * total_mass * n_bodies ** 4
    beta = 2 * q * n_bodies ** (4 * kappa + 2) * total_mass ** 2
    return alpha, beta


def intermediate_configuration(center, R: float, n_bodies: int) -> np.ndarray:
    """p_i = center + (i−1) v with v = 6R along the first axis."""
    center = np.asarray(center, dtype=float)
    v = np.zeros_like(center)
    v[0] = 6.0 * R
    return center[None, :] + np.arange(n_bodies)[:, None] * v[None, :]


def collision_parameters(x, p) -> np.ndarray:
    """t_ij = −<u_ij, v_ij>/||v_ij||² for the segment x → p (pairs with v_ij ≠ 0)."""
    x = np.asarray(x)
    p = np.asarray(p)
    i, j = np.triu_indices(len(x), k=1)
    u = x[i] - x[j]
    v = (p[i] - p[j]) - u
    vv = np.sum(v * v, axis=1)
    ok = vv > 0
    return -np.sum(u[ok] * v[ok], axis=1) / vv[ok]


class _Leg:
    """z(τ) = x + F(τ)(p − x) on τ ∈ [0, 1]."""

    def __init__(self, x, p, kappa):
        self.x = np.asarray(x, dtype=float)
        self.p = np.asarray(p, dtype=float)
        t = np.clip(collision_parameters(self.x, self.p), -A_CLIP, A_CLIP)
        self.reparam = build_reparam(kappa, t) if t.size else None

    def psi(self, tau):
        return np.asarray(tau, dtype=float) if self.reparam is None else self.reparam(tau)

    def __call__(self, tau):
        f = self.psi(tau)
        return self.x[None] + np.asarray(f)[:, None, None] * (self.p - self.x)[None]

    def singular(self):
        return () if self.reparam is None else self.reparam.b


class ConnectorCurve:
    """Explicit connector x → p → y on [0, T] for the bodies of one ball."""

    def __init__(self, x, y, T, center, R, kappa):
        self.T = float(T)
        self.p = intermediate_configuration(center, R, len(x))
        self.out = _Leg(x, self.p, kappa)
        self.back = _Leg(y, self.p, kappa)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        tau = 2 * t / self.T
        first = tau <= 1.0
        res = np.empty((len(t),) + self.p.shape)
        if np.any(first):
            res[first] = self.out(tau[first])
        if np.any(~first):
            res[~first] = self.back(2.0 - tau[~first])
        return res

    def time_grid(self, n_base: int = 64, levels: int = 12) -> np.ndarray:
        g1 = graded_grid(n_base, self.out.singular(), levels) * (self.T / 2)
        g2 = self.T - graded_grid(n_base, self.back.singular(), levels)[::-1] * (self.T / 2)
        return np.unique(np.concatenate([g1, g2]))


def _check_in_ball(x, center, R, what):
    d = np.linalg.norm(np.asarray(x) - np.asarray(center)[None], axis=1)
    if np.any(d > R * (1 + 1e-12)):
        raise DomainError(f"{what} is not contained in B(center, R)")


def connect(spec: ProblemSpec, x, y, T: float, center, R: float,
            n_base: int = 64, levels: int = 12):
    """Bounded-action path from x to y in time T through the spread-out
    configuration p, each leg reparametrized to tame the collisions."""
    x = spec.as_config(x)
    y = spec.as_config(y)
    center = np.asarray(center, dtype=float).reshape(spec.dim)
    if T <= 0 or R <= 0:
        raise DomainError("T and R must be positive")
    _check_in_ball(x, center, R, "x")
    _check_in_ball(y, center, R, "y")
    curve = ConnectorCurve(x, y, T, center, R, spec.kappa)
    times = curve.time_grid(n_base, levels)
    path = DiscretePath(times, curve(times))
    path.nodes[0], path.nodes[-1] = x, y
    return path, certify_connector(spec, path, T, center, R)


def certify_connector(spec: ProblemSpec, path: DiscretePath, T: float, center, R: float):
    alpha, beta = connector_constants(spec.kappa, spec.n_bodies, spec.total_mass)
    kin, pot = action_parts(spec, path)
    kb, pb = alpha * R ** 2 / T, beta * T * R ** (-2 * spec.kappa)
    spread = np.max(np.linalg.norm(path.nodes - np.asarray(center)[None, None], axis=-1))
    contained = bool(spread <= 6 * spec.n_bodies * R * (1 + 1e-12))
    ok = bool(kin <= kb and pot <= pb and contained)
    details = dict(kinetic=kin, potential=pot, kinetic_bound=kb, potential_bound=pb,
                   contained=contained, max_radius=float(spread), R=float(R), T=float(T),
                   n_bodies=spec.n_bodies, total_mass=spec.total_mass, kappa=spec.kappa)
    return BoundCertificate(kin + pot, kb + pb, alpha, beta, ok, details)


def clustered_constants(spec: ProblemSpec) -> tuple[float, float]:
    """(α_1, β_1) for the cluster-decomposed connector.

    Each cluster runs the connector in a ball of radius 2R(ε) with
    ε ≤ R(ε) < (48N)^N ε; bodies of distinct clusters stay 24N R(ε) apart.
    """
    n, M, k = spec.n_bodies, spec.total_mass, spec.kappa
    alpha, beta = connector_constants(k, n, M)
    growth = (48.0 * n) ** n
    alpha1 = 4.0 * alpha * growth ** 2
    beta1 = 2.0 ** (-2 * k) * beta + n ** 2 * M ** 2 * (24.0 * n) ** (-2 * k)
    return alpha1, beta1


def clustered_epsilon(x, y) -> float:
    return max(max_norm(np.asarray(x) - np.asarray(y)) * (1 + 1e-9), 1e-8 * (1 + max_norm(x)))


def connect_clustered(spec: ProblemSpec, x, y, T: float, epsilon: float | None = None,
                      n_base: int = 64, levels: int = 12):
    """Connector for arbitrary x, y: split the bodies into well separated
    clusters (λ = 24N) and run the ball connector inside each one."""
    x = spec.as_config(x)
    y = spec.as_config(y)
    if T <= 0:
        raise DomainError("T must be positive")
    eps = clustered_epsilon(x, y) if epsilon is None else float(epsilon)
    if eps <= max_norm(x - y):
        raise DomainError("epsilon must exceed max_norm(x - y)")
    lam = 24.0 * spec.n_bodies
    part = cluster_partition(x, lam, eps)
    groups = assign_clusters(x, y, part)
    R = part.size_R
    curves = []
    for g in groups:
        ctr = part.center_points[[np.argmin(np.linalg.norm(part.center_points - x[g[0]], axis=1))]][0]
        curves.append((g, ConnectorCurve(x[g], y[g], T, ctr, 2 * R, spec.kappa)))
    times = np.unique(np.concatenate([c.time_grid(n_base, levels) for _, c in curves]))
    nodes = np.empty((len(times), spec.n_bodies, spec.dim))
    for g, c in curves:
        nodes[:, g, :] = c(times)
    nodes[0], nodes[-1] = x, y
    path = DiscretePath(times, nodes)

    kin, pot = action_parts(spec, path)
    alpha1, beta1 = clustered_constants(spec)
    k = spec.kappa
    inner = 0.0
    cluster_ok = True
    for g, c in curves:
        sub = spec.subproblem(g)
        sp = DiscretePath(times, nodes[:, g, :])
        skin, spot = action_parts(sub, sp)
        inner += spot
        a_j, b_j = connector_constants(k, len(g), sub.total_mass)
        cluster_ok &= bool(skin <= a_j * (2 * R) ** 2 / T and spot <= b_j * T * (2 * R) ** (-2 * k))
    w0 = pot - inner
    w0_bound = spec.n_bodies ** 2 * spec.total_mass ** 2 * (24.0 * spec.n_bodies * R) ** (-2 * k) * T
    bound = alpha1 * eps ** 2 / T + beta1 * T * eps ** (-2 * k)
    total = kin + pot
    ok = bool(total <= bound and w0 <= w0_bound * (1 + 1e-12) and cluster_ok)
    details = dict(kinetic=kin, potential=pot, epsilon=eps, R_eps=R, lam=lam,
                   clusters=[list(map(int, g)) for g in groups], W0=w0, W0_bound=w0_bound,
                   clusters_ok=cluster_ok, T=float(T), kappa=k, n_bodies=spec.n_bodies,
                   total_mass=spec.total_mass)
    return path, BoundCertificate(total, bound, alpha1, beta1, ok, details)


def stationary_path(x, T: float, nodes: int = 2) -> DiscretePath:
    x = np.asarray(x, dtype=float)
    return DiscretePath(np.linspace(0.0, T, nodes), np.repeat(x[None], nodes, axis=0))


def linear_path(x, y, times) -> DiscretePath:
    times = np.asarray(times, dtype=float)
    w = ((times - times[0]) / (times[-1] - times[0]))[:, None, None]
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return DiscretePath(times, (1 - w) * x[None] + w * y[None])
