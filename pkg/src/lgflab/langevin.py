"""Companion-matrix Langevin systems and their Gaussian mixing bounds.

For even d >= 4 the order p = (d-2)/2 system has drift eigenvalues
-(d-2k), k = 1..p. All matrix functions go through the Vandermonde
eigenvectors of the companion matrix, which are exact here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConditioningError, DomainError
from .stochastic import RngSeed, rng_for

__all__ = [
    "LangevinSystem",
    "GaussianState",
    "companion_system",
    "stationary_covariance",
    "transition",
    "exact_step",
    "augmented_matrices",
    "augmented_exp",
    "augmented_covariance",
    "kl_divergence",
    "tv_bound",
    "mixing_profile",
]

T_GUARD = 1e-4


@dataclass(frozen=True)
class LangevinSystem:
    p: int
    a_coeffs: np.ndarray
    A: np.ndarray
    b_vec: np.ndarray
    eigenvalues: np.ndarray  # the negative reals -lambda_k
    weights: np.ndarray  # c_k = 1 / prod_{j != k} (lambda_j - lambda_k)
    V: np.ndarray
    V_inv: np.ndarray

    @property
    def lambdas(self) -> np.ndarray:
        return -self.eigenvalues

    @property
    def d(self) -> int:
        return 2 * self.p + 2


@dataclass(frozen=True)
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray


def companion_system(d: int) -> LangevinSystem:
    if int(d) != d or d < 4 or d % 2:
        raise DomainError(f"companion system needs even d >= 4, got {d!r}")
    d = int(d)
    p = (d - 2) // 2
    lam = np.array([d - 2 * k for k in range(1, p + 1)], dtype=float)
    # np.poly gives [1, a_{p-1}, ..., a_0] for prod (x + lambda_k)
    a = np.poly(-lam)[1:][::-1].real
    A = np.zeros((p, p))
    A[np.arange(p - 1), np.arange(1, p)] = 1.0
    A[-1, :] = -a
    b = np.zeros(p)
    b[-1] = 2.0 ** (d / 2 - 1) * math.gamma(d / 2)
    mu = -lam
    V = np.vander(mu, p, increasing=True).T  # column k = (1, mu_k, ..., mu_k^{p-1})
    w = np.array([1.0 / np.prod([lam[j] - lam[k] for j in range(p) if j != k]) for k in range(p)])
    return LangevinSystem(p, a, A, b, mu, w, V, np.linalg.inv(V))


def _ev(sys: LangevinSystem, t: float) -> np.ndarray:
    return sys.V @ np.diag(np.exp(sys.eigenvalues * t)) @ sys.V_inv


def _cov_factor(mu_sum: np.ndarray, t: float | None) -> np.ndarray:
    # int_0^t exp(m s) ds for m < 0, or -1/m when t is None (t = infinity)
    if t is None:
        return -1.0 / mu_sum
    return np.expm1(mu_sum * t) / mu_sum


def _bottom_cov(sys: LangevinSystem, t: float | None) -> np.ndarray:
    w = sys.V_inv @ sys.b_vec
    mu = sys.eigenvalues
    M = np.outer(w, w) * _cov_factor(mu[:, None] + mu[None, :], t)
    S = sys.V @ M @ sys.V.T
    return 0.5 * (S + S.T)


def stationary_covariance(sys: LangevinSystem) -> np.ndarray:
    """Solution of A S + S A^T + b b^T = 0.

    The eigenvalues and b are integers, so the solution is rational and is
    computed exactly before rounding once to float.
    """
    if np.any(sys.eigenvalues >= 0):
        raise DomainError("drift matrix is not Hurwitz")
    p = sys.p
    mu = [Fraction(int(round(m))) for m in sys.eigenvalues]
    bl = Fraction(int(round(sys.b_vec[-1])))
    V = [[mu[k] ** i for k in range(p)] for i in range(p)]
    # V^{-1} b: Vandermonde solve with b = bl * e_p, via Lagrange basis leading coefficients
    w = [bl / _prod(mu[k] - mu[j] for j in range(p) if j != k) for k in range(p)]
    M = [[w[i] * w[j] * Fraction(-1) / (mu[i] + mu[j]) for j in range(p)] for i in range(p)]
    S = [[sum(V[r][i] * M[i][j] * V[c][j] for i in range(p) for j in range(p)) for c in range(p)] for r in range(p)]
    return np.array([[float(v) for v in row] for row in S])


def _prod(it):
    out = Fraction(1)
    for v in it:
        out *= v
    return out


def transition(sys: LangevinSystem, state, dt: float) -> GaussianState:
    """Exact Gaussian law of X_dt given X_0 = state."""
    if dt <= 0:
        raise DomainError("dt must be positive")
    return GaussianState(_ev(sys, dt) @ np.asarray(state, dtype=float), _bottom_cov(sys, dt))


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def exact_step(sys: LangevinSystem, state, dt: float, seed: RngSeed | int) -> np.ndarray:
    """One exact transition. ``state`` may be (p,) or a batch (n, p)."""
    state = np.asarray(state, dtype=float)
    g = transition(sys, np.zeros(sys.p), dt)
    mean = state @ _ev(sys, dt).T
    z = rng_for(seed).standard_normal(state.shape)
    return mean + z @ _psd_sqrt(g.cov).T


def augmented_matrices(sys: LangevinSystem) -> tuple[np.ndarray, np.ndarray]:
    p = sys.p
    Ab = np.zeros((p + 1, p + 1))
    Ab[0, 1] = 1.0
    Ab[1:, 1:] = sys.A
    bb = np.zeros(p + 1)
    bb[1:] = sys.b_vec
    return Ab, bb


def augmented_exp(sys: LangevinSystem, t: float) -> np.ndarray:
    if t < 0:
        raise DomainError("t must be >= 0")
    p = sys.p
    out = np.zeros((p + 1, p + 1))
    out[0, 0] = 1.0
    mu = sys.eigenvalues
    integ = np.expm1(mu * t) / mu
    # e1^T V diag(int) V^{-1}; V[0, :] is all ones
    out[0, 1:] = (sys.V[0] * integ) @ sys.V_inv
    out[1:, 1:] = _ev(sys, t)
    return out


def augmented_covariance(sys: LangevinSystem, t: float) -> np.ndarray:
    """int_0^t (e^{Ab s} bb)(e^{Ab s} bb)^T ds in closed form.

    e^{Ab s} bb = G0 + sum_k G_k e^{mu_k s}, integrated term by term.
    """
    p = sys.p
    mu = sys.eigenvalues
    w = sys.V_inv @ sys.b_vec
    G0 = np.zeros(p + 1)
    G0[0] = -np.sum(w / mu)
    G = np.zeros((p, p + 1))
    G[:, 0] = w / mu
    G[:, 1:] = (sys.V * w).T
    e1 = np.expm1(mu * t) / mu
    e2 = np.expm1((mu[:, None] + mu[None, :]) * t) / (mu[:, None] + mu[None, :])
    S = np.outer(G0, G0) * t
    cross = (G * e1[:, None]).sum(axis=0)
    S += np.outer(G0, cross) + np.outer(cross, G0)
    S += G.T @ e2 @ G
    return 0.5 * (S + S.T)


def kl_divergence(sys: LangevinSystem, x, y, t: float) -> float:
    """KL between the augmented-state laws started at ``x`` and ``y``."""
    if t <= 0:
        raise DomainError("t must be positive")
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dm = augmented_exp(sys, t) @ (x - y)
    if not np.any(dm):
        return 0.0
    if t < T_GUARD:
        raise ConditioningError(f"augmented covariance too ill-conditioned at t={t:g} < {T_GUARD:g}")
    S = augmented_covariance(sys, t)
    try:
        cf = cho_factor(S)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(f"augmented covariance not numerically positive definite at t={t:g}") from exc
    if np.linalg.cond(S) > 1e13:
        raise ConditioningError(f"augmented covariance condition number too large at t={t:g}")
    return float(0.5 * dm @ cho_solve(cf, dm))


def tv_bound(kl: float) -> float:
    if kl < 0:
        raise DomainError("KL divergence cannot be negative")
    return math.sqrt(kl / 2.0)


def _ball_points(rng: np.random.Generator, n: int, dim: int, radius: float) -> np.ndarray:
    z = rng.standard_normal((n, dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / dim)
    return z * r[:, None]


def mixing_profile(
    sys: LangevinSystem,
    radius: float,
    t_grid,
    n_pairs: int,
    seed: RngSeed | int,
    pairs: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Worst Pinsker bound over sampled pairs in B(0, radius), per time.

    Pass ``pairs=(xs, ys)`` to use explicit start points instead.
    """
    if radius <= 0:
        raise DomainError("radius must be positive")
    if pairs is None:
        rng = rng_for(seed)
        xs = _ball_points(rng, n_pairs, sys.p + 1, radius)
        ys = _ball_points(rng, n_pairs, sys.p + 1, radius)
    else:
        xs, ys = (np.atleast_2d(np.asarray(a, dtype=float)) for a in pairs)
    out = []
    for t in np.asarray(t_grid, dtype=float):
        out.append(max(tv_bound(kl_divergence(sys, x, y, t)) for x, y in zip(xs, ys)))
    return np.array(out)
