"""Numerical estimates of the action potential φ(x,y,T) and φ(x,y).

A discrete curve is a piecewise-linear path through ``nodes`` points on a
fixed time template; its action is minimized over the interior nodes by a
damped Newton iteration on the block-tridiagonal Hessian.  Every estimate
carries a certified lower bound and the explicit connector upper bound.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded
from scipy.optimize import minimize_scalar

from .geometry import DomainError, ProblemSpec, max_norm, min_mutual_distance
from .paths import (GAUSS_NODES, GAUSS_WEIGHTS, INF, DiscretePath,
                    NumericalError, action, clustered_constants, collides, connect_clustered,
                    linear_path, connector_constants)

log = logging.getLogger(__name__)

GRAD_TOL = 1e-8
STALL_RTOL = 1e-12
STALL_WINDOW = 5
MAX_ITER = 5000
# relative accuracy we claim for free-time estimates at the default resolution
MINIMIZER_TOL = 5e-3
GRADE_POWER = 3.0


class BracketError(RuntimeError):
    """The free-time minimum is not inside the search bracket."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


@dataclass
class PhiEstimate:
    value: float
    path: DiscretePath | None
    lower_bound: float
    upper_bound: float
    converged: bool
    iterations: int
    T: float = 0.0
    grad_norm: float = 0.0
    start_values: tuple = ()

    def to_dict(self, with_path: bool = False) -> dict:
        out = dict(value=self.value, lower_bound=self.lower_bound,
                   upper_bound=self.upper_bound, converged=self.converged,
                   iterations=self.iterations, T=self.T, grad_norm=self.grad_norm,
                   start_values=list(self.start_values))
        if with_path and self.path is not None:
            out["times"] = self.path.times.tolist()
            out["nodes"] = self.path.nodes.tolist()
        return out


# -- bounds ------------------------------------------------------------------

def lower_bound(system, x, y, T: float) -> float:
    """(m/2T) max_norm(x − y)² with m the smallest mass."""
    m = float(min(system.masses))
    return m / (2 * T) * max_norm(np.asarray(x) - np.asarray(y)) ** 2


def _ball_bound(spec: ProblemSpec, x, y, T):
    pts = np.concatenate([x, y])
    center = pts.mean(axis=0)
    r_min = float(np.max(np.linalg.norm(pts - center, axis=1)))
    alpha, beta = connector_constants(spec.kappa, spec.n_bodies, spec.total_mass)
    k = spec.kappa
    # any R ≥ r_min is admissible; take the minimizer of the bound if larger
    r_opt = (k * beta * T * T / alpha) ** (1 / (2 + 2 * k))
    R = max(r_min, r_opt)
    return alpha * R ** 2 / T + beta * T * R ** (-2 * k)


def _cluster_bound(spec: ProblemSpec, x, y, T):
    a1, b1 = clustered_constants(spec)
    k = spec.kappa
    e_opt = (k * b1 * T * T / a1) ** (1 / (2 + 2 * k))
    eps = max(e_opt, max_norm(x - y) * (1 + 1e-9))
    return a1 * eps ** 2 / T + b1 * T * eps ** (-2 * k)


def upper_bound(spec: ProblemSpec, x, y, T: float) -> float:
    """Smallest of the ball connector and cluster connector bounds."""
    x = spec.as_config(x)
    y = spec.as_config(y)
    return float(min(_ball_bound(spec, x, y, T), _cluster_bound(spec, x, y, T)))


def phi_xx_constant(spec: ProblemSpec) -> float:
    """μ with φ(x,x,T) ≤ μ T^{(1−κ)/(1+κ)} (cluster bound at ε = T^{1/(1+κ)})."""
    a1, b1 = clustered_constants(spec)
    return a1 + b1


def holder_constant(spec: ProblemSpec) -> float:
    """η with φ(x,y) ≤ η max_norm(x−y)^{1−κ} (cluster bound at T = ||x−y||^{1+κ})."""
    a1, b1 = clustered_constants(spec)
    return a1 + b1


def local_lipschitz_constant(spec: ProblemSpec, z) -> float:
    """k(z) = MN/2 + M²N²(δ(z)/2)^{−2κ}, valid for ||x|| < δ(z)/4."""
    z = spec.as_config(z)
    M, n = spec.total_mass, spec.n_bodies
    return M * n / 2 + M ** 2 * n ** 2 * (min_mutual_distance(z) / 2) ** (-2 * spec.kappa)


# -- discrete action with derivatives ----------------------------------------

def time_template(nodes: int, grade_start: bool = False, grade_end: bool = False,
                  q: float = GRADE_POWER) -> np.ndarray:
    """Node parameters in [0, 1], graded like s^q towards collision ends.

    Templates with ``nodes - 1`` doubled are nested in the coarser ones.
    """
    s = np.linspace(0.0, 1.0, nodes)
    if grade_start and grade_end:
        g = np.where(s < 0.5, 0.5 * (2 * s) ** q, 1 - 0.5 * (2 - 2 * s) ** q)
    elif grade_start:
        g = s ** q
    elif grade_end:
        g = 1 - (1 - s) ** q
    else:
        g = s
    g[0], g[-1] = 0.0, 1.0
    return g


class _Discrete:
    """Action of the piecewise-linear curve as a function of its interior nodes."""

    def __init__(self, system, times, xa, xb):
        self.system = system
        self.times = np.asarray(times, dtype=float)
        self.xa = np.asarray(xa, dtype=float)
        self.xb = np.asarray(xb, dtype=float)
        self.shape = self.xa.shape
        self.n = self.xa.size
        self.K = len(self.times) - 1
        self.dt = np.diff(self.times)
        self.m = np.repeat(np.asarray(system.masses, dtype=float), self.shape[1])
        self.W = self.dt[:, None] * GAUSS_WEIGHTS[None, :]
        # set once the starting curve is known: forbid steps through collisions
        self.guard = False

    def nodes(self, z):
        inner = z.reshape(self.K - 1, *self.shape)
        return np.concatenate([self.xa[None], inner, self.xb[None]])

    def _samples(self, X):
        xi = GAUSS_NODES[None, :, None, None]
        S = (1 - xi) * X[:-1, None] + xi * X[1:, None]
        return S.reshape(-1, *self.shape)

    def value(self, z):
        X = self.nodes(z)
        dx = np.diff(X, axis=0).reshape(self.K, self.n)
        kin = np.sum(np.sum(self.m * dx * dx, axis=1) / (2 * self.dt))
        V = self.system.potential_samples(self._samples(X)).reshape(self.K, -1)
        if not np.all(np.isfinite(V)) or (self.guard and collides(self.system, X)):
            return INF
        return float(kin + np.sum(self.W * V))

    def grad(self, z, with_hess=False):
        X = self.nodes(z)
        K, n = self.K, self.n
        S = self._samples(X)
        dx = np.diff(X, axis=0).reshape(K, n)
        vel = self.m * dx / self.dt[:, None]
        g = vel[:-1] - vel[1:]
        G = self.system.potential_grad_samples(S).reshape(K, -1, n)
        xi = GAUSS_NODES
        left = np.einsum("kg,kgn->kn", self.W * (1 - xi), G)
        right = np.einsum("kg,kgn->kn", self.W * xi, G)
        g = g + left[1:] + right[:-1]
        if not with_hess:
            return g.ravel()
        H = self.system.potential_hess_samples(S).reshape(K, -1, n, n)
        Dl = np.einsum("kg,kgab->kab", self.W * (1 - xi) ** 2, H)
        Dr = np.einsum("kg,kgab->kab", self.W * xi ** 2, H)
        C = np.einsum("kg,kgab->kab", self.W * xi * (1 - xi), H)
        md = np.diag(self.m)
        inv = 1.0 / self.dt
        diag = Dl[1:] + Dr[:-1] + (inv[:-1] + inv[1:])[:, None, None] * md[None]
        off = C[1:-1] - inv[1:-1, None, None] * md[None]
        return g.ravel(), _banded(diag, off)


def _banded(diag, off):
    """Lower banded storage of the symmetric block-tridiagonal matrix."""
    nb, n, _ = diag.shape
    D = nb * n
    ab = np.zeros((2 * n, D))
    base = np.arange(nb) * n
    for a in range(n):
        for b in range(a + 1):
            ab[a - b, base + b] = diag[:, a, b]
    for a in range(n):
        for b in range(n):
            ab[n + a - b, base[:-1] + b] = off[:, a, b]
    return ab


def _newton(prob: _Discrete, z, max_iter: int, tol: float):
    """Damped Newton with Levenberg shift and Armijo backtracking.

    Trial points whose action is infinite are rejected, so every iterate
    stays collision free.  Returns (z, value, grad max-norm, converged, iters).
    """
    f = prob.value(z)
    if not np.isfinite(f):
        raise NumericalError("starting path has infinite action")
    history = [f]
    shift = 0.0
    it = 0
    gmax = INF
    for it in range(1, max_iter + 1):
        g, ab = prob.grad(z, with_hess=True)
        gmax = float(np.max(np.abs(g)))
        if gmax < tol * (1 + abs(f)):
            return z, f, gmax, True, it - 1
        scale = float(np.max(np.abs(ab[0]))) or 1.0
        while True:
            abs_ = ab.copy()
            abs_[0] += shift
            try:
                p = solveh_banded(abs_, -g, lower=True)
                slope = float(g @ p)
                if np.all(np.isfinite(p)) and slope < 0:
                    break
            except (LinAlgError, ValueError):
                pass
            shift = max(4 * shift, 1e-10 * scale)
            if shift > 1e20 * scale:
                return z, f, gmax, False, it
        s = 1.0
        while True:
            zt = z + s * p
            ft = prob.value(zt)
            if np.isfinite(ft) and ft <= f + 1e-4 * s * slope:
                break
            s *= 0.5
            if s < 1e-20:
                break
        if s < 1e-20:
            # line search failed: stiffen the model and retry from the same point
            shift = max(16 * shift, 1e-6 * scale)
            if shift > 1e20 * scale:
                return z, f, gmax, False, it
            continue
        shift = shift / 4 if s == 1.0 else shift
        if shift < 1e-14 * scale:
            shift = 0.0
        z, f = zt, ft
        history.append(f)
        if len(history) > STALL_WINDOW:
            old = history[-1 - STALL_WINDOW]
            if old - f <= STALL_RTOL * abs(f):
                g = prob.grad(z)
                return z, f, float(np.max(np.abs(g))), True, it
    g = prob.grad(z)
    gmax = float(np.max(np.abs(g)))
    return z, f, gmax, gmax < tol * (1 + abs(f)), max_iter


def euler_lagrange_residual(system, path: DiscretePath) -> float:
    """Max-norm of the discrete action gradient at the interior nodes."""
    prob = _Discrete(system, path.times, path.nodes[0], path.nodes[-1])
    return float(np.max(np.abs(prob.grad(path.nodes[1:-1].ravel()))))


# -- initial curves ----------------------------------------------------------

def _collision_distance(system, x) -> float:
    if hasattr(system, "collision_distance"):
        return float(system.collision_distance(x))
    if x.shape[0] < 2:
        return INF
    return min_mutual_distance(x)


def _length_scale(system, x, y, T):
    return max(max_norm(x - y), T ** (1 / (1 + system.kappa)))


def default_times(system, x, y, T: float, nodes: int) -> np.ndarray:
    L = _length_scale(system, x, y, T)
    gs = _collision_distance(system, x) < 0.1 * L
    ge = _collision_distance(system, y) < 0.1 * L
    return T * time_template(nodes, gs, ge)


def _starts(system, x, y, times, n_random: int, seed: int):
    T = times[-1]
    out = []
    if isinstance(system, ProblemSpec):
        try:
            cp, _ = connect_clustered(system, x, y, T)
            out.append(cp.resample(times))
        except (DomainError, NumericalError) as exc:
            log.debug("connector start unavailable: %s", exc)
    base = linear_path(x, y, times)
    out.append(base)
    rng = np.random.default_rng(seed)
    amp = 0.5 * _length_scale(system, x, y, T)
    s = (times / T)[:, None, None]
    for _ in range(n_random):
        direction = rng.standard_normal(x.shape)
        direction /= max_norm(direction)
        out.append(DiscretePath(times, base.nodes + amp * np.sin(np.pi * s) * direction))
    return out


# -- φ(x, y, T) --------------------------------------------------------------

def _as_config(system, x):
    n = len(system.masses)
    return np.asarray(x, dtype=float).reshape(n, -1)


def minimize_action(system, x, y, T: float, nodes: int = 64, init: DiscretePath | None = None,
                    starts: int = 4, seed: int = 0, max_iter: int = MAX_ITER,
                    tol: float = GRAD_TOL, times=None) -> PhiEstimate:
    """Estimate φ(x,y,T) by minimizing the discrete action.

    Parameters
    ----------
    system : ProblemSpec or any object with ``masses``, ``kappa`` and the
        batched ``potential_samples`` / ``potential_grad_samples`` /
        ``potential_hess_samples`` methods.
    nodes : number of time nodes including both endpoints (≥ 8).
    init : optional starting curve; resampled onto the time template.
    starts : number of default initial curves (connector, straight, and
        randomized bent paths) used when ``init`` is not given.
    times : explicit time nodes overriding the default template.
    """
    x = _as_config(system, x)
    y = _as_config(system, y)
    if T <= 0:
        raise DomainError("T must be positive")
    if nodes < 8:
        raise DomainError("nodes must be at least 8")
    if times is None:
        times = default_times(system, x, y, T, nodes)
    times = np.asarray(times, dtype=float)
    if init is not None:
        if abs(init.duration - T) > 1e-12 * T or not (
                np.allclose(init.start, x, atol=1e-12) and np.allclose(init.end, y, atol=1e-12)):
            raise DomainError("init endpoints or duration do not match the query")
        candidates = [DiscretePath(times, init.resample(times + init.times[0]).nodes)]
    else:
        candidates = _starts(system, x, y, times, max(starts - 2, 0), seed)[:max(starts, 1)]

    best = None
    values = []
    total_it = 0
    for cand in candidates:
        prob = _Discrete(system, times, x, y)
        z0 = cand.nodes[1:-1].ravel()
        prob.guard = not bool(collides(system, prob.nodes(z0)))
        if not np.isfinite(prob.value(z0)):
            values.append(INF)
            continue
        z, f, gmax, ok, it = _newton(prob, z0, max_iter, tol)
        total_it += it
        values.append(f)
        if best is None or f < best[1]:
            best = (prob.nodes(z), f, gmax, ok)
    if best is None:
        raise NumericalError("every initial curve passes through a collision")
    X, f, gmax, ok = best
    X[0], X[-1] = x, y
    if isinstance(system, ProblemSpec):
        ub = upper_bound(system, x, y, T)
    else:
        # no explicit connector for reduced systems: use the best initial curve
        ub = min(action(system, c) for c in candidates)
    return PhiEstimate(float(f), DiscretePath(times, X), lower_bound(system, x, y, T), float(ub),
                       bool(ok), int(total_it), float(T), float(gmax), tuple(values))


# -- φ(x, y) -----------------------------------------------------------------

def free_phi(system, x, y, nodes: int = 64, init: DiscretePath | None = None,
             bracket=(1e-3, 1e3), scan: int = 13, xtol: float = 1e-3,
             seed: int = 0) -> PhiEstimate:
    """Estimate φ(x,y) = inf_T φ(x,y,T) by golden-section search on log T.

    A coarse log-spaced scan over the bracket (scaled by ||x−y||^{1+κ})
    locates the minimum; golden section then refines it.  Each evaluation
    is warm-started from the argmin of the nearest T already evaluated,
    run over the new duration.
    """
    x = _as_config(system, x)
    y = _as_config(system, y)
    k = system.kappa
    L = max_norm(x - y)
    if L == 0.0:
        return PhiEstimate(0.0, None, 0.0, 0.0, True, 0, 0.0)
    t_lo, t_hi = bracket[0] * L ** (1 + k), bracket[1] * L ** (1 + k)
    cache: dict[float, PhiEstimate] = {}

    def evaluate(logT):
        if logT in cache:
            return cache[logT].value
        T = float(np.exp(logT))
        est = minimize_action(system, x, y, T, nodes, starts=4, seed=seed)
        warm = []
        if cache:
            near = min(cache, key=lambda s: abs(s - logT))
            warm.append(cache[near].path)
        if init is not None:
            warm.append(init)
        for w in warm:
            try:
                alt = minimize_action(system, x, y, T, nodes,
                                      init=w.rescaled(T), times=est.path.times)
            except NumericalError:
                continue
            if alt.value < est.value:
                alt.start_values = est.start_values + alt.start_values
                alt.upper_bound = est.upper_bound
                est = alt
        cache[logT] = est
        return est.value

    grid = np.linspace(np.log(t_lo), np.log(t_hi), scan)
    vals = np.array([evaluate(g) for g in grid])
    i = int(np.argmin(vals))
    if i == 0 or i == scan - 1:
        raise BracketError("free-time minimum lies at the edge of the T bracket",
                           dict(T=np.exp(grid).tolist(), values=vals.tolist()))
    minimize_scalar(evaluate, bracket=(grid[i - 1], grid[i], grid[i + 1]),
                    method="golden", options=dict(xtol=xtol))
    best = min(cache.values(), key=lambda e: e.value)
    return best


# -- certification helpers ---------------------------------------------------

@dataclass
class HomogeneityReport:
    lam: float
    phi_base: float
    phi_scaled: float
    ratio: float
    expected: float
    rel_error: float

    def to_dict(self):
        return dict(self.__dict__)


def certify_homogeneity(system, x, y, lam: float, nodes: int = 64,
                        base: PhiEstimate | None = None) -> HomogeneityReport:
    """Compare free_phi at (λx, λy) with λ^{1−κ} free_phi(x, y)."""
    x = _as_config(system, x)
    y = _as_config(system, y)
    if lam <= 0:
        raise DomainError("lambda must be positive")
    if max_norm(x - y) == 0:
        raise DomainError("x must differ from y")
    k = system.kappa
    est = base if base is not None else free_phi(system, x, y, nodes)
    expected = lam ** (1 - k)
    if lam == 1.0:
        return HomogeneityReport(1.0, est.value, est.value, 1.0, 1.0, 0.0)
    # the rescaled argmin is an admissible curve for the scaled problem
    warm = DiscretePath(est.path.times * lam ** (1 + k), est.path.nodes * lam)
    scaled = free_phi(system, lam * x, lam * y, nodes, init=warm)
    ratio = scaled.value / est.value
    return HomogeneityReport(float(lam), est.value, scaled.value, float(ratio), float(expected),
                             float(abs(ratio - expected) / expected))


@dataclass
class AxiomReport:
    symmetric: bool
    triangle: bool
    worst_asymmetry: float
    worst_triangle_excess: float
    slack: float
    rows: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.symmetric and self.triangle


def certify_distance_axioms(system, sample, nodes: int = 64,
                            tol: float = MINIMIZER_TOL) -> AxiomReport:
    """Check φ(x,y) = φ(y,x) and φ(x,y) ≤ φ(x,z) + φ(z,y) on the sample.

    The estimates are upper approximations; the slack is three times the
    relative minimizer tolerance times the largest value involved.
    """
    cache = {}

    def phi(a, b):
        key = (a.tobytes(), b.tobytes())
        if key not in cache:
            cache[key] = free_phi(system, a, b, nodes).value
        return cache[key]

    worst_sym = worst_tri = 0.0
    sym_ok = tri_ok = True
    rows = []
    slack_used = 0.0
    for x, y, z in sample:
        x, y, z = (_as_config(system, v) for v in (x, y, z))
        xy, yx, xz, zy = phi(x, y), phi(y, x), phi(x, z), phi(z, y)
        slack = 3 * tol * max(xy, yx, xz, zy)
        slack_used = max(slack_used, slack)
        asym = abs(xy - yx)
        excess = xy - (xz + zy)
        worst_sym = max(worst_sym, asym)
        worst_tri = max(worst_tri, excess)
        sym_ok &= asym <= slack
        tri_ok &= excess <= slack
        rows.append(dict(xy=xy, yx=yx, xz=xz, zy=zy))
    return AxiomReport(bool(sym_ok), bool(tri_ok), float(worst_sym), float(worst_tri),
                       float(slack_used), rows)


def certify_local_lipschitz(spec: ProblemSpec, z, displacements, nodes: int = 64,
                            tol: float = MINIMIZER_TOL) -> dict:
    """Check φ(z, z+x) ≤ k(z)||x|| for displacements with ||x|| < δ(z)/4."""
    z = spec.as_config(z)
    kz = local_lipschitz_constant(spec, z)
    radius = min_mutual_distance(z) / 4
    rows = []
    ok = True
    for dx in displacements:
        dx = spec.as_config(dx)
        r = max_norm(dx)
        if not 0 < r < radius:
            raise DomainError("displacement outside the validity radius δ(z)/4")
        val = free_phi(spec, z, z + dx, nodes).value
        bound = kz * r
        good = val <= bound * (1 + 3 * tol)
        ok &= good
        rows.append(dict(norm=r, value=val, bound=bound, ok=bool(good)))
    return dict(k=kz, radius=radius, ok=bool(ok), rows=rows)


# -- batch queries -----------------------------------------------------------

def run_batch(queries, nodes: int = 64) -> list[dict]:
    """Evaluate a list of {x, y, T?, kappa, masses} queries."""
    out = []
    for q in queries:
        masses = tuple(q["masses"])
        x = np.asarray(q["x"], dtype=float)
        dim = x.size // len(masses)
        spec = ProblemSpec(len(masses), dim, masses, float(q["kappa"]))
        y = np.asarray(q["y"], dtype=float)
        if q.get("T") is not None:
            est = minimize_action(spec, x, y, float(q["T"]), nodes)
        else:
            est = free_phi(spec, x, y, nodes)
        rec = est.to_dict()
        rec["query"] = dict(x=x.tolist(), y=y.tolist(), T=q.get("T"),
                            kappa=spec.kappa, masses=list(masses))
        out.append(rec)
    return out


def batch_jsonl(text: str, nodes: int = 64) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in run_batch(json.loads(text), nodes))
