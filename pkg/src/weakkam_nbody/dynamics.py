"""Potential, Hamiltonian, central configurations and parabolic homothetic motions."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .geometry import (DomainError, ProblemSpec, max_norm, mass_inner,
                       moment_of_inertia)

log = logging.getLogger(__name__)

COLLISION_FLOOR = 1e-13
INF = float("inf")


class ConvergenceError(RuntimeError):
    """Iterative solver hit its cap; ``best`` carries the best iterate."""

    def __init__(self, msg, best=None):
        super().__init__(msg)
        self.best = best


def _pairs(n):
    return np.triu_indices(n, k=1)


def potential_batch(masses, kappa: float, X: np.ndarray) -> np.ndarray:
    """U_κ for a stack of configurations ``X`` of shape (S, N, d).

    Entries closer to collision than the floor come back as ``inf``.
    """
    X = np.asarray(X, dtype=float)
    m = np.asarray(masses, dtype=float)
    i, j = _pairs(X.shape[1])
    if len(i) == 0:
        return np.zeros(X.shape[0])
    r = np.linalg.norm(X[:, i, :] - X[:, j, :], axis=-1)
    scale = 1.0 + np.max(np.linalg.norm(X, axis=-1), axis=1)
    hit = np.any(r < COLLISION_FLOOR * scale[:, None], axis=1)
    with np.errstate(divide="ignore"):
        val = np.sum(m[i] * m[j] * r ** (-2 * kappa), axis=1)
    val[hit] = INF
    return val


def potential_grad_batch(masses, kappa: float, X: np.ndarray) -> np.ndarray:
    """Euclidean gradient dU/dr_i for a stack of configurations (S, N, d)."""
    X = np.asarray(X, dtype=float)
    m = np.asarray(masses, dtype=float)
    diff = X[:, :, None, :] - X[:, None, :, :]
    r2 = np.sum(diff * diff, axis=-1)
    n = X.shape[1]
    eye = np.eye(n, dtype=bool)
    r2 = np.where(eye, 1.0, r2)
    coef = -2 * kappa * (m[:, None] * m[None, :]) * r2 ** (-kappa - 1)
    coef = np.where(eye, 0.0, coef)
    return np.einsum("sij,sijk->sik", coef, diff)


def potential_hess_batch(masses, kappa: float, X: np.ndarray) -> np.ndarray:
    """Euclidean Hessian of U_κ for a stack (S, N, d); shape (S, N, d, N, d)."""
    X = np.asarray(X, dtype=float)
    S, n, d = X.shape
    H = np.zeros((S, n, d, n, d))
    eye = np.eye(d)
    for a, b in zip(*_pairs(n)):
        u = X[:, a] - X[:, b]
        r2 = np.sum(u * u, axis=1)
        coef = -2 * kappa * masses[a] * masses[b] * r2 ** (-kappa - 1)
        outer = u[:, :, None] * u[:, None, :] / r2[:, None, None]
        blk = coef[:, None, None] * (eye[None] - (2 * kappa + 2) * outer)
        H[:, a, :, a, :] += blk
        H[:, b, :, b, :] += blk
        H[:, a, :, b, :] -= blk
        H[:, b, :, a, :] -= blk
    return H


def potential(spec: ProblemSpec, x) -> float:
    x = spec.as_config(x)
    return float(potential_batch(spec.masses, spec.kappa, x[None])[0])


def potential_gradient(spec: ProblemSpec, x) -> np.ndarray:
    """Gradient of U_κ with respect to the mass scalar product."""
    x = spec.as_config(x)
    if not np.isfinite(potential(spec, x)):
        raise DomainError("potential gradient undefined at a collision")
    g = potential_grad_batch(spec.masses, spec.kappa, x[None])[0]
    return g / spec.mass_array[:, None]


def potential_hessian(spec: ProblemSpec, x) -> np.ndarray:
    """Euclidean Hessian of U_κ as an (N*d, N*d) matrix."""
    x = spec.as_config(x)
    n, d = x.shape
    return potential_hess_batch(spec.masses, spec.kappa, x[None])[0].reshape(n * d, n * d)


def legendre(spec: ProblemSpec, v) -> np.ndarray:
    """Covector p_i = m_i v_i."""
    return spec.mass_array[:, None] * spec.as_config(v)


def hamiltonian(spec: ProblemSpec, x, p) -> float:
    p = spec.as_config(p)
    kin = 0.5 * float(np.sum(np.sum(p * p, axis=1) / spec.mass_array))
    return kin - potential(spec, x)


@dataclass(frozen=True)
class EnergyReport:
    kinetic: float
    potential_value: float
    total_energy: float


def energy(spec: ProblemSpec, x, v) -> EnergyReport:
    kin = 0.5 * moment_of_inertia(spec.masses, spec.as_config(v))
    pot = potential(spec, x)
    return EnergyReport(kin, pot, kin - pot)


# -- central configurations ------------------------------------------------

@dataclass(frozen=True)
class CentralConfiguration:
    config: np.ndarray
    u0: float
    is_minimal: bool
    residual: float = 0.0
    restart_values: tuple = ()


def scale_invariant_potential(spec: ProblemSpec, x) -> float:
    """Ũ_κ = I^κ U_κ, invariant under x -> λx."""
    x = spec.as_config(x)
    return moment_of_inertia(spec.masses, x) ** spec.kappa * potential(spec, x)


def _center(spec, x):
    m = spec.mass_array
    return x - (m @ x) / m.sum()


def _normalize(spec, x):
    x = _center(spec, x)
    return x / np.sqrt(moment_of_inertia(spec.masses, x))


def _tangent(spec, x, g):
    """Project a mass-metric vector onto the tangent space of {I=1, com=0} at x."""
    g = _center(spec, g)
    return g - mass_inner(spec.masses, g, x) * x


def sphere_residual(spec: ProblemSpec, x) -> float:
    """Mass norm of the projected gradient of U_κ on the inertia sphere."""
    g = potential_gradient(spec, x)
    t = _tangent(spec, spec.as_config(x), g)
    return float(np.sqrt(moment_of_inertia(spec.masses, t)))


def _descend(spec, x, tol, max_iter):
    # projected gradient with Barzilai-Borwein trial steps and a nonmonotone
    # Armijo safeguard (reference = max of the last few accepted values)
    x = _normalize(spec, x)
    f = potential(spec, x)
    history = [f]
    step = 1e-2
    g = _tangent(spec, x, potential_gradient(spec, x))
    for it in range(max_iter):
        gn2 = moment_of_inertia(spec.masses, g)
        if np.sqrt(gn2) < tol:
            return x, f, np.sqrt(gn2), True
        ref = max(history[-10:])
        s = step
        while True:
            trial = _normalize(spec, x - s * g)
            ft = potential(spec, trial)
            if np.isfinite(ft) and ft <= ref - 1e-4 * s * gn2:
                break
            # below roundoff the Armijo test is blind; fall back on the residual
            if (np.isfinite(ft) and ft <= f + 1e-13 * abs(f)
                    and sphere_residual(spec, trial) < np.sqrt(gn2)):
                break
            s *= 0.5
            if s < 1e-30:
                return x, f, np.sqrt(gn2), False
        g_new = _tangent(spec, trial, potential_gradient(spec, trial))
        dx, dg = trial - x, g_new - g
        curv = mass_inner(spec.masses, dx, dg)
        step = mass_inner(spec.masses, dx, dx) / curv if curv > 0 else 2.0 * s
        step = min(max(step, 1e-12), 1e6)
        x, f, g = trial, ft, g_new
        history.append(f)
    res = np.sqrt(moment_of_inertia(spec.masses, g))
    return x, f, res, res < tol


def find_central_configuration(spec: ProblemSpec, seed: int = 0, restarts: int = 16,
                               tol: float = 1e-8, max_iter: int = 20000,
                               agree_rtol: float = 1e-6) -> CentralConfiguration:
    """Minimize U_κ on the sphere I = 1 by projected gradient descent.

    Every restart starts from a Gaussian configuration drawn from its own
    child seed; the lowest converged value wins.  ``is_minimal`` only records
    that all restarts agree on the minimum value.
    """
    if spec.n_bodies < 2:
        raise DomainError("central configurations need at least two bodies")
    children = np.random.SeedSequence(seed).spawn(restarts)
    results = []
    for child in children:
        rng = np.random.default_rng(child)
        x0 = rng.standard_normal((spec.n_bodies, spec.dim))
        results.append(_descend(spec, x0, tol, max_iter))
    converged = [r for r in results if r[3]]
    if not converged:
        best = min(results, key=lambda r: r[1])
        raise ConvergenceError("no restart reached the residual tolerance", best=best[0])
    best = min(converged, key=lambda r: r[1])
    values = tuple(float(r[1]) for r in results)
    agree = len(converged) == len(results) and all(
        abs(v - best[1]) <= agree_rtol * best[1] for v in values)
    return CentralConfiguration(best[0], float(best[1]), agree, float(best[2]), values)


# -- parabolic homothetic motion -------------------------------------------

def parabolic_constant(u0: float, kappa: float) -> float:
    """c with x(t) = c t^{1/(1+κ)} x_0 of zero energy (I(x_0) = 1)."""
    return (2 * u0) ** (1 / (2 + 2 * kappa)) * (1 + kappa) ** (1 / (1 + kappa))


def parabolic_homothetic(central: CentralConfiguration, spec: ProblemSpec, t):
    """Position and velocity of the parabolic motion through ``central`` at time t."""
    t = float(t)
    if t <= 0:
        raise DomainError("t must be positive")
    k = spec.kappa
    c = parabolic_constant(central.u0, k)
    x0 = spec.as_config(central.config)
    pos = c * t ** (1 / (1 + k)) * x0
    vel = c / (1 + k) * t ** (-k / (1 + k)) * x0
    return pos, vel


def parabolic_action_parts(central: CentralConfiguration, spec: ProblemSpec, T: float):
    """(kinetic, potential) closed-form integrals over [0, T]."""
    k = spec.kappa
    c = parabolic_constant(central.u0, k)
    p = T ** ((1 - k) / (1 + k))
    kin = c ** 2 / (2 * (1 - k * k)) * p
    pot = c ** (-2 * k) * central.u0 * (1 + k) / (1 - k) * p
    return kin, pot


def parabolic_action_closed_form(central: CentralConfiguration, spec: ProblemSpec,
                                 T: float) -> float:
    if T <= 0:
        raise DomainError("T must be positive")
    kin, pot = parabolic_action_parts(central, spec, T)
    return kin + pot


def max_norm_config(x) -> float:
    return max_norm(x)


def graded_times(T: float, nodes: int, q: float = 3.0) -> np.ndarray:
    """t_k = T (k/K)^q, clustering nodes at the collision t = 0."""
    s = np.linspace(0.0, 1.0, nodes)
    return T * s ** q


def parabolic_discrete_path(central: CentralConfiguration, spec: ProblemSpec, T: float,
                            nodes: int = 2000, q: float = 3.0):
    """Nodes of the parabolic motion at graded times; (times, positions)."""
    from .paths import DiscretePath
    t = graded_times(T, nodes, q)
    c = parabolic_constant(central.u0, spec.kappa)
    x0 = spec.as_config(central.config)
    pos = c * t[:, None, None] ** (1 / (1 + spec.kappa)) * x0[None]
    return DiscretePath(t, pos)


def parabolic_quadrature(central: CentralConfiguration, spec: ProblemSpec, T: float,
                         nodes: int = 2000, q: float = 3.0) -> tuple[float, float]:
    """(kinetic, potential) of the motion by composite 5-point Gauss in σ, t = Tσ^q.

    The Lagrangian is sampled from the motion itself (positions and
    velocities), so the result only carries quadrature error.
    """
    from .paths import GAUSS_NODES, GAUSS_WEIGHTS
    s = np.linspace(0.0, 1.0, nodes)
    ds = np.diff(s)
    sig = (s[:-1, None] + ds[:, None] * GAUSS_NODES[None]).ravel()
    w = (ds[:, None] * GAUSS_WEIGHTS[None]).ravel()
    t = T * sig ** q
    jac = q * T * sig ** (q - 1)
    k = spec.kappa
    c = parabolic_constant(central.u0, k)
    x0 = spec.as_config(central.config)
    pos = c * t[:, None, None] ** (1 / (1 + k)) * x0[None]
    speed2 = (c / (1 + k)) ** 2 * t ** (-2 * k / (1 + k)) * moment_of_inertia(spec.masses, x0)
    kin_v = 0.5 * speed2
    pot_v = potential_batch(spec.masses, k, pos)
    kin = float(np.sum(w * jac * kin_v))
    pot = float(np.sum(w * jac * pot_v))
    return kin, pot
