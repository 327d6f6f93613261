"""Grid Lax-Oleinik semigroup on reduced Kepler problems and the explicit
weak KAM solutions of the two-body problem.

Reduced problems have a single "body" with Lagrangian
``L(x, v) = a|v|²/2 + k|x|^{−2κ}``.  The collinear two-body problem with
unit masses and fixed center of mass reduces to the separation ``s > 0``
(``a = 1/2``, ``k = 1``); the planar one to ``x`` with bodies at ``±x``
(``a = 2``, ``k = 2^{−2κ}``).

Action values φ̂ between grid nodes are computed by a batched Newton
solver over all requested pairs at once and rounded to multiples of
``2^{−32}``, so the grid operator is a min/max over exactly representable
sums: monotonicity, commutation with constants and non-expansiveness hold
bit for bit on dyadic data.
"""
from __future__ import annotations

import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import DomainError, ProblemSpec
from .paths import GAUSS_NODES, GAUSS_WEIGHTS, INF, DiscretePath, collides

log = logging.getLogger(__name__)

QUANTUM = 2.0 ** -32
COLLISION_FLOOR = 1e-12
RADIUS_MARGIN = 1e-6
PATH_NODES = 24


def grid_tolerance(h: float) -> float:
    """tol(h) used by the domination, eikonal and calibration checks."""
    return h * h


def quantize(v):
    return np.round(np.asarray(v, dtype=float) / QUANTUM) * QUANTUM


# -- reduced problems --------------------------------------------------------

@dataclass(frozen=True)
class ReducedProblem:
    """Single-body Lagrangian a|v|²/2 + k|x|^{−2κ} on a box minus a collar.

    ``lo``/``hi`` bound every coordinate; nodes with |x| < ``collar`` are
    excluded.  For the collinear kind the domain is ``[lo, hi]`` with
    ``lo > 0``.
    """

    kind: str
    kappa: float
    a: float
    k: float
    lo: float
    hi: float
    collar: float = 0.0

    def __post_init__(self):
        if self.kind not in ("collinear-two-body", "planar-kepler-centerfix"):
            raise DomainError(f"unknown reduced problem kind {self.kind!r}")
        if not 0 < self.kappa < 1 or self.a <= 0 or self.k <= 0:
            raise DomainError("need 0 < kappa < 1 and positive coefficients")
        if self.hi <= self.lo:
            raise DomainError("empty domain")
        if self.kind == "collinear-two-body" and self.lo <= 0:
            raise DomainError("collinear domain must stay away from the collision s = 0")

    @classmethod
    def collinear(cls, kappa: float = 0.5, lo: float = 0.2, hi: float = 20.0):
        return cls("collinear-two-body", kappa, 0.5, 1.0, lo, hi)

    @classmethod
    def planar(cls, kappa: float = 0.5, half_width: float = 2.5, collar: float = 0.1,
               k: float | None = None):
        kk = 2.0 ** (-2 * kappa) if k is None else k
        return cls("planar-kepler-centerfix", kappa, 2.0, kk, -half_width, half_width, collar)

    def with_eikonal_constant(self, C: float) -> "ReducedProblem":
        """Same problem with k chosen so that |∇u|² = C|x|^{−2κ} is its HJ equation."""
        return ReducedProblem(self.kind, self.kappa, self.a, C / (2 * self.a),
                              self.lo, self.hi, self.collar)

    @property
    def dim(self) -> int:
        return 1 if self.kind == "collinear-two-body" else 2

    @property
    def n_bodies(self) -> int:
        return 1

    @property
    def masses(self) -> tuple:
        return (self.a,)

    # batched potential interface shared with ProblemSpec; X has shape (S, 1, d)
    def potential_samples(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float).reshape(len(X), -1)
        r = np.linalg.norm(X, axis=1)
        bad = r < COLLISION_FLOOR
        if self.kind == "collinear-two-body":
            bad |= X[:, 0] <= 0
        with np.errstate(divide="ignore"):
            v = self.k * r ** (-2 * self.kappa)
        v[bad] = INF
        return v

    def potential_grad_samples(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        x = X.reshape(len(X), -1)
        r2 = np.sum(x * x, axis=1)
        g = -2 * self.kappa * self.k * r2[:, None] ** (-self.kappa - 1) * x
        return g.reshape(X.shape)

    def potential_hess_samples(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        x = X.reshape(len(X), -1)
        d = x.shape[1]
        r2 = np.sum(x * x, axis=1)
        coef = -2 * self.kappa * self.k * r2 ** (-self.kappa - 1)
        outer = x[:, :, None] * x[:, None, :] / r2[:, None, None]
        H = coef[:, None, None] * (np.eye(d)[None] - (2 * self.kappa + 2) * outer)
        return H.reshape(len(X), 1, d, 1, d)

    def collision_distance(self, x) -> float:
        return float(np.linalg.norm(np.asarray(x, dtype=float)))

    def potential(self, x) -> float:
        return float(self.potential_samples(np.asarray(x, dtype=float).reshape(1, 1, -1))[0])

    # -- lift to the two-body problem --
    def full_spec(self) -> ProblemSpec:
        return ProblemSpec.unit(2, self.dim, self.kappa)

    def lift(self, path: DiscretePath) -> DiscretePath:
        """Positions of the two unit masses for a reduced path."""
        z = path.nodes[:, 0, :]
        if self.kind == "collinear-two-body":
            nodes = np.stack([-z / 2, z / 2], axis=1)
        else:
            nodes = np.stack([z, -z], axis=1)
        return DiscretePath(path.times, nodes)

    def echo(self) -> dict:
        return asdict(self)


# -- grids and grid functions ------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Rectangular lattice with spacing h over the problem's domain."""

    h: float
    axes: tuple
    mask: np.ndarray = field(repr=False)
    lo: float = 0.0
    hi: float = 0.0
    collar: float = 0.0
    lower_open: bool = False

    @classmethod
    def for_problem(cls, problem: ReducedProblem, h: float) -> "Grid":
        n = int(round((problem.hi - problem.lo) / h))
        if n < 2 or abs(n * h - (problem.hi - problem.lo)) > 1e-9 * (problem.hi - problem.lo):
            raise DomainError("h must divide the domain length")
        axis = problem.lo + h * np.arange(n + 1)
        axes = (axis,) * problem.dim
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, problem.dim)
        mask = np.linalg.norm(pts, axis=1) >= problem.collar
        return cls(h, axes, mask, problem.lo, problem.hi, problem.collar)

    @property
    def shape(self) -> tuple:
        return tuple(len(a) for a in self.axes)

    @property
    def points(self) -> np.ndarray:
        pts = np.stack(np.meshgrid(*self.axes, indexing="ij"), axis=-1).reshape(-1, len(self.axes))
        return pts[self.mask]

    @property
    def size(self) -> int:
        return int(self.mask.sum())

    def nearest(self, x) -> int:
        return int(np.argmin(np.linalg.norm(self.points - np.asarray(x, dtype=float), axis=1)))

    def on_boundary(self, x) -> np.ndarray:
        """Nodes in the outermost layer of the box or next to the collar."""
        x = np.atleast_2d(x)
        edge = np.any((x <= self.lo + self.h / 2) | (x >= self.hi - self.h / 2), axis=1)
        if self.collar > 0:
            edge |= np.linalg.norm(x, axis=1) < self.collar + self.h
        return edge

    def ball_inside(self, x, r) -> np.ndarray:
        """Whether B(x, r) stays inside the box and off the collar."""
        x = np.atleast_2d(x)
        r = np.asarray(r, dtype=float)
        inside = np.all((x - r[:, None] >= self.lo - 1e-12) & (x + r[:, None] <= self.hi + 1e-12),
                        axis=1)
        if self.collar > 0:
            inside &= np.linalg.norm(x, axis=1) - r >= self.collar
        return inside


@dataclass
class GridFunction:
    """Values on the grid nodes, pinned to 0 at ``reference_node`` when normalized."""

    grid: Grid
    values: np.ndarray
    reference_node: int = 0
    trusted: np.ndarray | None = None
    shift: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.size,):
            raise DomainError("one value per grid node expected")
        if self.trusted is None:
            self.trusted = np.ones(self.grid.size, dtype=bool)

    @classmethod
    def from_callable(cls, grid: Grid, f, reference_node: int = 0) -> "GridFunction":
        return cls(grid, np.array([f(p) for p in grid.points]), reference_node)

    @classmethod
    def constant(cls, grid: Grid, c: float = 0.0, reference_node: int = 0) -> "GridFunction":
        return cls(grid, np.full(grid.size, float(c)), reference_node)

    def normalized(self) -> "GridFunction":
        c = self.values[self.reference_node]
        return GridFunction(self.grid, self.values - c, self.reference_node,
                            self.trusted.copy(), self.shift + c)

    def replace(self, values) -> "GridFunction":
        return GridFunction(self.grid, values, self.reference_node, self.trusted.copy())

    def to_csv(self) -> str:
        pts = self.grid.points
        buf = io.StringIO()
        cols = [f"x{j}" for j in range(pts.shape[1])]
        buf.write(",".join(cols + ["value", "trusted"]) + "\n")
        for p, v, t in zip(pts, self.values, self.trusted):
            buf.write(",".join(f"{c:.17g}" for c in p) + f",{v:.17g},{int(t)}\n")
        return buf.getvalue()

    def to_gnuplot_matrix(self) -> str:
        """1-D: two columns; 2-D: gnuplot ``nonuniform matrix`` layout (NaN off-domain)."""
        g = self.grid
        full = np.full(int(np.prod(g.shape)), np.nan)
        full[g.mask] = self.values
        buf = io.StringIO()
        if len(g.axes) == 1:
            for x, v in zip(g.axes[0], full):
                buf.write(f"{x:.17g} {v:.17g}\n")
            return buf.getvalue()
        mat = full.reshape(g.shape)
        buf.write(f"{len(g.axes[0])} " + " ".join(f"{x:.17g}" for x in g.axes[0]) + "\n")
        for j, y in enumerate(g.axes[1]):
            buf.write(f"{y:.17g} " + " ".join(f"{v:.17g}" for v in mat[:, j]) + "\n")
        return buf.getvalue()


# -- batched action minimization ---------------------------------------------

class PairSolver:
    """Minimize the discrete action for many (x, y, t) triples at once.

    Each curve has ``K = nodes − 1`` uniform segments; the dense Hessian of
    every pair is eigen-clamped (modified Newton) and steps are
    backtracked independently until the action decreases without meeting
    the collision.
    """

    def __init__(self, problem, nodes: int = PATH_NODES, max_iter: int = 200,
                 gtol: float = 1e-12):
        self.problem = problem
        self.K = nodes - 1
        self.max_iter = max_iter
        self.gtol = gtol
        self.a = float(problem.masses[0])

    def _samples(self, X):
        xi = GAUSS_NODES[None, None, :, None]
        return (1 - xi) * X[:, :-1, None] + xi * X[:, 1:, None]

    def _value(self, X, dt, guard=None):
        dx = np.diff(X, axis=1)
        kin = self.a * np.sum(dx * dx, axis=(1, 2)) / (2 * dt)
        S = self._samples(X)
        P, K, G, d = S.shape
        V = self.problem.potential_samples(S.reshape(-1, 1, d)).reshape(P, K, G)
        pot = dt * np.sum(V @ GAUSS_WEIGHTS, axis=1)
        out = kin + pot
        out[~np.isfinite(out)] = INF
        if guard is not None:
            out[guard & collides(self.problem, X[:, :, None, :])] = INF
        return out

    def _derivs(self, X, dt):
        P, K1, d = X.shape
        K = K1 - 1
        S = self._samples(X)
        flat = S.reshape(-1, 1, d)
        G = self.problem.potential_grad_samples(flat).reshape(P, K, -1, d)
        H = self.problem.potential_hess_samples(flat).reshape(P, K, -1, d, d)
        W = dt[:, None, None] * GAUSS_WEIGHTS[None, None, :]
        xi = GAUSS_NODES
        vel = self.a * np.diff(X, axis=1) / dt[:, None, None]
        g = vel[:, :-1] - vel[:, 1:]
        g = g + np.einsum("pkg,pkgd->pkd", W * (1 - xi), G)[:, 1:]
        g = g + np.einsum("pkg,pkgd->pkd", W * xi, G)[:, :-1]
        Dl = np.einsum("pkg,pkgab->pkab", W * (1 - xi) ** 2, H)
        Dr = np.einsum("pkg,pkgab->pkab", W * xi ** 2, H)
        C = np.einsum("pkg,pkgab->pkab", W * xi * (1 - xi), H)
        eye = np.eye(d)
        kin = (self.a / dt)[:, None, None]
        n = K - 1
        Hm = np.zeros((P, n, d, n, d))
        idx = np.arange(n)
        Hm[:, idx, :, idx, :] = np.moveaxis(Dl[:, 1:] + Dr[:, :-1], 1, 0) + 2 * kin[None] * eye
        off = np.moveaxis(C[:, 1:-1], 1, 0) - kin[None] * eye
        Hm[:, idx[:-1], :, idx[1:], :] = off
        Hm[:, idx[1:], :, idx[:-1], :] = np.swapaxes(off, -1, -2)
        return g.reshape(P, n * d), Hm.reshape(P, n * d, n * d)

    def initial(self, x, y, bend: float = 0.0):
        s = np.linspace(0.0, 1.0, self.K + 1)[None, :, None]
        X = (1 - s) * x[:, None] + s * y[:, None]
        if bend:
            d = x.shape[1]
            if d == 2:
                u = y - x
                perp = np.stack([-u[:, 1], u[:, 0]], axis=1)
                nrm = np.linalg.norm(perp, axis=1, keepdims=True)
                perp = np.where(nrm > 0, perp / np.where(nrm > 0, nrm, 1), [[0.0, 1.0]])
            else:
                perp = np.ones_like(x)
            X = X + bend * np.sin(np.pi * s) * perp[:, None]
        return X

    def solve(self, x, y, t, init=None):
        """Return (values, node arrays (P, K+1, d)) for pairs of points ``x``, ``y``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.atleast_2d(np.asarray(y, dtype=float))
        P, d = x.shape
        t = np.broadcast_to(np.asarray(t, dtype=float), (P,)).copy()
        dt = t / self.K
        X = self.initial(x, y) if init is None else np.array(init, dtype=float)
        every = np.ones(P, dtype=bool)
        f = self._value(X, dt, every)
        # straight segments can cross the collision; bend those away from it
        bad = ~np.isfinite(f)
        scale = np.maximum(np.linalg.norm(y - x, axis=1), 0.5 * np.linalg.norm(x, axis=1))
        tries = 0
        while np.any(bad) and tries < 6:
            alt = self.initial(x[bad], y[bad], bend=1.0)
            sub = self.initial(x[bad], y[bad])
            amp = scale[bad] * 2.0 ** tries
            alt = sub + (alt - sub) * amp[:, None, None]
            X[bad] = alt
            f[bad] = self._value(X[bad], dt[bad], every[bad])
            bad = ~np.isfinite(f)
            tries += 1
        if np.any(bad):
            f[bad] = self._value(X[bad], dt[bad])
        guard = ~collides(self.problem, X[:, :, None, :])
        active = np.isfinite(f)
        for _ in range(self.max_iter):
            if not np.any(active):
                break
            ids = np.flatnonzero(active)
            g, H = self._derivs(X[ids], dt[ids])
            gmax = np.max(np.abs(g), axis=1)
            done = gmax <= self.gtol * (1 + np.abs(f[ids]))
            active[ids[done]] = False
            ids, g, H = ids[~done], g[~done], H[~done]
            if len(ids) == 0:
                break
            lam, Q = np.linalg.eigh(H)
            top = np.max(np.abs(lam), axis=1, keepdims=True)
            lam = np.maximum(np.abs(lam), 1e-10 * top)
            p = -np.einsum("pij,pj->pi", Q, np.einsum("pji,pj->pi", Q, g) / lam)
            slope = np.sum(g * p, axis=1)
            step = np.ones(len(ids))
            pending = np.ones(len(ids), dtype=bool)
            Xi = X[ids]
            newX = Xi.copy()
            newf = f[ids].copy()
            for _ls in range(60):
                if not np.any(pending):
                    break
                j = np.flatnonzero(pending)
                trial = Xi[j].copy()
                trial[:, 1:-1] += step[j, None, None] * p[j].reshape(len(j), -1, d)
                ft = self._value(trial, dt[ids[j]], guard[ids[j]])
                ok = np.isfinite(ft) & (ft <= f[ids[j]] + 1e-4 * step[j] * slope[j])
                newX[j[ok]] = trial[ok]
                newf[j[ok]] = ft[ok]
                pending[j[ok]] = False
                step[j[~ok]] *= 0.5
            stalled = pending | (newf >= f[ids])
            X[ids] = newX
            f[ids] = np.minimum(newf, f[ids])
            active[ids[stalled]] = False
        return f, X


# -- φ̂ tables ----------------------------------------------------------------

class PhiTable:
    """Lazily filled, symmetric table of quantized φ̂(x_i, x_j, t) on a grid."""

    def __init__(self, problem, grid: Grid, t: float, nodes: int = PATH_NODES):
        if t <= 0:
            raise DomainError("t must be positive")
        self.problem = problem
        self.grid = grid
        self.t = float(t)
        self.solver = PairSolver(problem, nodes)
        self.pts = grid.points
        self._store: dict[tuple[int, int], float] = {}
        self._paths: dict[tuple[int, int], np.ndarray] = {}

    def ensure(self, pairs):
        want = sorted({(min(i, j), max(i, j)) for i, j in pairs} - self._store.keys())
        if not want:
            return
        chunk = 4096
        for s in range(0, len(want), chunk):
            part = np.array(want[s:s + chunk])
            f, X = self.solver.solve(self.pts[part[:, 0]], self.pts[part[:, 1]], self.t)
            for (i, j), v, path in zip(map(tuple, part), quantize(f), X):
                self._store[(int(i), int(j))] = float(v)
                self._paths[(int(i), int(j))] = path

    def value(self, i: int, j: int) -> float:
        key = (min(i, j), max(i, j))
        if key not in self._store:
            self.ensure([key])
        return self._store[key]

    def row(self, i: int, js) -> np.ndarray:
        js = np.asarray(js, dtype=int)
        self.ensure([(i, int(j)) for j in js])
        return np.array([self._store[(min(i, j), max(i, j))] for j in js])

    def path(self, i: int, j: int) -> np.ndarray:
        """Minimizing node sequence from x_i to x_j."""
        key = (min(i, j), max(i, j))
        self.value(i, j)
        p = self._paths[key]
        return p if i <= j else p[::-1]

    def diagonal(self) -> np.ndarray:
        n = self.grid.size
        self.ensure([(i, i) for i in range(n)])
        return np.array([self._store[(i, i)] for i in range(n)])


def _slopes(u: GridFunction, pts, forward: bool) -> np.ndarray:
    """L_x = max_y (u(x) − u(y))/|x − y| (backward) or (u(y) − u(x))/|x − y| (forward)."""
    v = u.values
    n = len(v)
    out = np.zeros(n)
    for s in range(0, n, 512):
        d = np.linalg.norm(pts[s:s + 512, None] - pts[None], axis=-1)
        diff = (v[None] - v[s:s + 512, None]) if forward else (v[s:s + 512, None] - v[None])
        with np.errstate(divide="ignore", invalid="ignore"):
            q = np.where(d > 0, diff / np.where(d > 0, d, 1), 0.0)
        out[s:s + 512] = np.max(q, axis=1)
    return np.maximum(out, 0.0)


def search_radius(problem, t: float, slope, phi_xx) -> np.ndarray:
    """k(x) = (t/a)(L_x + sqrt(L_x² + 2aφ̂(x,x,t)/t)).

    Grid nodes farther than k(x) from x cannot improve on y = x, because
    φ̂(x,y,t) ≥ (a/2t)|x − y|².
    """
    a = float(problem.masses[0])
    L = np.asarray(slope, dtype=float)
    ph = np.asarray(phi_xx, dtype=float) + RADIUS_MARGIN
    return (t / a) * (L + np.sqrt(L * L + 2 * a * ph / t)) + RADIUS_MARGIN


def lax_oleinik_step(problem, u: GridFunction, t: float, table: PhiTable | None = None,
                     forward: bool = False, normalize: bool = True) -> GridFunction:
    """One application of T⁻_t (inf) or, with ``forward``, T⁺_t (sup) on the grid.

    Nodes whose search ball leaves the domain get ``trusted = False``.
    With ``normalize`` the value at the reference node is subtracted and
    recorded in ``shift``.
    """
    if t <= 0:
        raise DomainError("t must be positive")
    if table is None:
        table = PhiTable(problem, u.grid, t)
    elif table.grid is not u.grid or table.t != t:
        raise DomainError("phi table was built for a different grid or time")
    pts = table.pts
    n = u.grid.size
    diag = table.diagonal()
    radius = search_radius(problem, t, _slopes(u, pts, forward), diag)
    out = np.empty(n)
    for i in range(n):
        js = np.flatnonzero(np.linalg.norm(pts - pts[i], axis=1) <= radius[i])
        ph = table.row(i, js)
        if forward:
            out[i] = np.max(u.values[js] - ph)
        else:
            out[i] = np.min(u.values[js] + ph)
    trusted = u.grid.ball_inside(pts, radius)
    res = GridFunction(u.grid, out, u.reference_node, trusted)
    if normalize:
        res = res.normalized()
        res.shift = float(out[u.reference_node] - u.values[u.reference_node])
    return res


@dataclass
class SemigroupReport:
    t_step: float
    sup_change: float
    dominated_violation: float
    drift_c: float
    converged: bool = False
    iterations: int = 0
    history: list = field(default_factory=list)
    h: float = 0.0
    tol: float = 0.0
    trusted_nodes: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def iterate_to_fixed_point(problem, u0: GridFunction, t: float, tol: float,
                           max_iter: int = 500, table: PhiTable | None = None,
                           forward: bool = False, domination_pairs: int = 0,
                           seed: int = 0):
    """Iterate the normalized grid operator until the trusted sup-change < tol."""
    if tol <= 0:
        raise DomainError("tol must be positive")
    table = table or PhiTable(problem, u0.grid, t)
    u = u0.normalized()
    history = []
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        new = lax_oleinik_step(problem, u, t, table, forward=forward)
        mask = new.trusted
        change = float(np.max(np.abs(new.values - u.values)[mask])) if mask.any() else INF
        history.append(dict(sup_change=change, shift=new.shift))
        u = new
        if change < tol:
            converged = True
            break
    viol = 0.0
    if domination_pairs:
        rng = np.random.default_rng(seed)
        idx = np.flatnonzero(u.trusted)
        pairs = rng.choice(idx, size=(domination_pairs, 2)) if len(idx) else np.zeros((0, 2), int)
        viol = check_domination(problem, u, pairs)
    rep = SemigroupReport(float(t), history[-1]["sup_change"], float(viol),
                          history[-1]["shift"] / t, converged, it, history,
                          float(u0.grid.h), float(tol), int(u.trusted.sum()))
    if not converged:
        log.warning("fixed-point iteration hit the cap (%d)", max_iter)
    return u, rep


def fixed_point_defect(problem, u: GridFunction, t: float, table: PhiTable | None = None,
                       forward: bool = False) -> float:
    """sup over trusted nodes of |normalized T_t u − normalized u|."""
    new = lax_oleinik_step(problem, u, t, table, forward=forward)
    base = u.normalized()
    mask = new.trusted
    return float(np.max(np.abs(new.values - base.values)[mask]))


# -- free-time φ̂ between arbitrary points ------------------------------------

def batch_free_phi(problem, x, y, nodes: int = PATH_NODES, scan: int = 33,
                   bracket=(1e-2, 1e2), refine: int = 30) -> np.ndarray:
    """φ̂(x, y) = min_T φ̂(x, y, T) for many pairs: log-T scan, then golden section."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    P = len(x)
    dist = np.linalg.norm(x - y, axis=1)
    out = np.zeros(P)
    live = dist > 0
    if not np.any(live):
        return out
    xs, ys, ds = x[live], y[live], dist[live]
    solver = PairSolver(problem, nodes)
    k = problem.kappa
    base = ds ** (1 + k)
    logs = np.linspace(np.log(bracket[0]), np.log(bracket[1]), scan)
    vals = np.empty((len(xs), scan))
    X = None
    for j, s in enumerate(logs):
        f, X = solver.solve(xs, ys, base * np.exp(s), init=X)
        vals[:, j] = f
    j = np.clip(np.argmin(vals, axis=1), 1, scan - 2)
    lo, hi = logs[j - 1], logs[j + 1]
    g = (np.sqrt(5) - 1) / 2
    c, d = hi - g * (hi - lo), lo + g * (hi - lo)
    fc, Xc = solver.solve(xs, ys, base * np.exp(c))
    fd, Xd = solver.solve(xs, ys, base * np.exp(d))
    for _ in range(refine):
        left = fc < fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        nc = np.where(left, hi - g * (hi - lo), d)
        nd = np.where(left, c, lo + g * (hi - lo))
        newT = np.where(left, nc, nd)
        warm = np.where(left[:, None, None], Xc, Xd)
        fn, Xn = solver.solve(xs, ys, base * np.exp(newT), init=warm)
        fd_new = np.where(left, fc, fn)
        fc_new = np.where(left, fn, fd)
        Xd_new = np.where(left[:, None, None], Xc, Xn)
        Xc_new = np.where(left[:, None, None], Xn, Xd)
        c, d, fc, fd, Xc, Xd = nc, nd, fc_new, fd_new, Xc_new, Xd_new
    out[live] = np.minimum(np.minimum(fc, fd), vals.min(axis=1))
    return out


def check_domination(problem, u: GridFunction, pairs, phi=None) -> float:
    """max over pairs of u(x) − u(y) − φ̂(x, y); ≤ 0 means dominated on the sample."""
    pairs = np.asarray(pairs, dtype=int).reshape(-1, 2)
    if len(pairs) == 0:
        return -INF
    pts = u.grid.points
    if phi is None:
        phi = batch_free_phi(problem, pts[pairs[:, 0]], pts[pairs[:, 1]])
    diff = u.values[pairs[:, 0]] - u.values[pairs[:, 1]]
    return float(np.max(diff - np.asarray(phi)))


# -- explicit solutions ------------------------------------------------------

ORACLES = ("u_plus", "u_minus", "busemann_b_plus", "rotation_invariant", "planar_busemann")


def kepler_oracle(name: str, point) -> float:
    """Closed-form weak KAM solutions of the κ = 1/2 two-body problems.

    Collinear oracles take either the pair of positions (x, y) or the signed
    separation s = x − y; planar oracles take (x1, x2).
    """
    p = np.asarray(point, dtype=float).ravel()
    if name in ("u_plus", "u_minus", "busemann_b_plus"):
        s = float(p[0] - p[1]) if p.size == 2 else float(p[0])
        if name == "u_plus":
            return 2.0 * np.sqrt(abs(s))
        if name == "u_minus":
            return -2.0 * np.sqrt(abs(s))
        return -2.0 * np.sqrt(abs(s)) if s >= 0 else 2.0 * np.sqrt(abs(s))
    if p.size != 2:
        raise DomainError(f"{name} expects a planar point")
    r = float(np.hypot(p[0], p[1]))
    if name == "rotation_invariant":
        return -r ** 0.5
    if name == "planar_busemann":
        return -max(r + p[0], 0.0) ** 0.5
    raise DomainError(f"unknown oracle {name!r}")


def kink_distance(name: str, points) -> np.ndarray:
    """Distance from each point to the set where the oracle is not smooth."""
    P = np.atleast_2d(np.asarray(points, dtype=float))
    if name in ("u_plus", "u_minus", "busemann_b_plus"):
        s = P[:, 0] - P[:, 1] if P.shape[1] == 2 else P[:, 0]
        return np.abs(s) / (np.sqrt(2) if P.shape[1] == 2 else 1.0)
    r = np.linalg.norm(P, axis=1)
    if name == "rotation_invariant":
        return r
    # origin plus the closed half-line {x1 ≤ 0, x2 = 0}
    return np.where(P[:, 0] <= 0, np.abs(P[:, 1]), r)


@dataclass
class EikonalReport:
    residual: np.ndarray
    valid: np.ndarray
    max_abs: float
    max_positive: float
    h: float

    def subsolution(self, tol: float) -> bool:
        return self.max_positive <= tol

    def solution(self, tol: float) -> bool:
        return self.max_abs <= tol


def _fd_gradient(values, h):
    """Central differences on the interior of a full lattice (NaN elsewhere)."""
    grads = []
    for ax in range(values.ndim):
        g = np.full(values.shape, np.nan)
        sl_c = [slice(None)] * values.ndim
        sl_p = [slice(None)] * values.ndim
        sl_m = [slice(None)] * values.ndim
        sl_c[ax], sl_p[ax], sl_m[ax] = slice(1, -1), slice(2, None), slice(None, -2)
        g[tuple(sl_c)] = (values[tuple(sl_p)] - values[tuple(sl_m)]) / (2 * h)
        grads.append(g)
    return grads


def lattice_eikonal_residual(values, axes, masses, potential, h):
    """Σ_i (∂_i u)²/m_i − 2V on a full lattice; ``potential`` maps (S, d) points to V."""
    grads = _fd_gradient(values, h)
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, len(axes))
    V = potential(pts).reshape(values.shape)
    q = sum(g * g / m for g, m in zip(grads, masses))
    return q - 2 * V


def check_eikonal_residual(problem, u: GridFunction, kink: str | None = None,
                           collar: float | None = None, away: float = 0.0) -> EikonalReport:
    """|∇u|²_reduced − 2V at interior nodes by central differences.

    Nodes within ``collar`` (default 2h) of the oracle's kink set, or closer
    than ``away`` to the collision, are excluded from the statistics.
    """
    g = u.grid
    h = g.h
    full = np.full(int(np.prod(g.shape)), np.nan)
    full[g.mask] = u.values
    full = full.reshape(g.shape)
    masses = [problem.a] * problem.dim

    def pot(P):
        return problem.potential_samples(P[:, None, :])

    res = lattice_eikonal_residual(full, g.axes, masses, pot, h).reshape(-1)[g.mask]
    pts = g.points
    valid = np.isfinite(res)
    collar = 2 * h if collar is None else collar
    if kink is not None:
        valid &= kink_distance(kink, pts) > collar
    if away > 0:
        valid &= np.linalg.norm(pts, axis=1) >= away
    r = res[valid]
    return EikonalReport(res, valid, float(np.max(np.abs(r))) if r.size else 0.0,
                         float(np.max(r)) if r.size else 0.0, float(h))


def fit_eikonal_constant(u: GridFunction, kink: str | None = None, away: float = 0.5,
                         kappa: float = 0.5) -> float:
    """Least-squares C in |∇u|² = C|x|^{−2κ} over the smooth interior nodes."""
    g = u.grid
    full = np.full(int(np.prod(g.shape)), np.nan)
    full[g.mask] = u.values
    grads = _fd_gradient(full.reshape(g.shape), g.h)
    q = sum(gr * gr for gr in grads).reshape(-1)[g.mask]
    pts = g.points
    w = np.linalg.norm(pts, axis=1) ** (-2 * kappa)
    ok = np.isfinite(q) & (np.linalg.norm(pts, axis=1) >= away)
    if kink is not None:
        ok &= kink_distance(kink, pts) > 2 * g.h
    return float(np.sum(q[ok] * w[ok]) / np.sum(w[ok] * w[ok]))


# -- calibrated rays ----------------------------------------------------------

@dataclass
class CalibratedRay:
    path: DiscretePath
    node_indices: list
    defects: list
    step: float
    truncated: bool
    ok: bool
    defect_per_time: float


def extract_calibrated_ray(problem, u: GridFunction, x0: int, t_max: float, step: float,
                           tol: float | None = None, nodes: int = PATH_NODES) -> CalibratedRay:
    """Follow argmin_y u(y) + φ̂(x, y, step) from node ``x0`` for t_max/step steps.

    The ray is truncated (and flagged) when the argmin lands on the domain
    boundary, where the grid minimum no longer represents the true one.

    The defect of a step is u(y) + φ̂(x, y, step) − u(x); a calibrated
    curve has zero defect.  ``ok`` requires every defect per unit time to
    stay below ``tol`` (default 10 tol(h)) and no truncation.
    """
    if step <= 0 or t_max <= 0:
        raise DomainError("step and t_max must be positive")
    tol = 10 * grid_tolerance(u.grid.h) if tol is None else tol
    pts = u.grid.points
    solver = PairSolver(problem, nodes)
    n_steps = int(round(t_max / step))
    cur = int(x0)
    idx = [cur]
    defects = []
    segs = [pts[cur][None]]
    truncated = False
    for _ in range(n_steps):
        L = _slopes_one(u, pts, cur)
        fxx, _ = solver.solve(pts[cur][None], pts[cur][None], step)
        r = float(search_radius(problem, step, L, fxx)[0])
        js = np.flatnonzero(np.linalg.norm(pts - pts[cur], axis=1) <= r)
        f, X = solver.solve(np.repeat(pts[cur][None], len(js), 0), pts[js], step)
        tot = u.values[js] + quantize(f)
        b = int(np.argmin(tot))
        if u.grid.on_boundary(pts[js[b]][None])[0]:
            truncated = True
            break
        defects.append(float(tot[b] - u.values[cur]))
        segs.append(X[b][1:])
        cur = int(js[b])
        idx.append(cur)
    nodes_arr = np.concatenate(segs)
    times = np.linspace(0.0, step * (len(idx) - 1), len(nodes_arr)) if len(idx) > 1 else np.array([0.0, step])
    if len(idx) == 1:
        nodes_arr = np.repeat(nodes_arr, 2, axis=0)
    path = DiscretePath(times, nodes_arr[:, None, :])
    per_time = max(abs(d) for d in defects) / step if defects else INF
    ok = bool(defects) and not truncated and per_time <= tol
    return CalibratedRay(path, idx, defects, float(step), truncated, ok, float(per_time))


def _slopes_one(u: GridFunction, pts, i: int) -> np.ndarray:
    d = np.linalg.norm(pts - pts[i], axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(d > 0, (u.values[i] - u.values) / np.where(d > 0, d, 1), 0.0)
    return np.array([max(float(np.max(q)), 0.0)])
