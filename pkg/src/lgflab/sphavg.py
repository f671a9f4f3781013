"""The spherical-average process S_t = h_{e^{-t}}(0) - h_1(0).

Two independent simulators are provided: the moving-average integral
representation driven by a two-sided BM, and exact stepping of the
companion Langevin system. Quadrature oracles give the covariance.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate, signal

from .errors import ConvergenceError, DomainError
from .langevin import augmented_covariance, augmented_exp, companion_system, stationary_covariance
from .params import c_of_d
from .stochastic import RngSeed, rng_for

__all__ = [
    "RadialSample",
    "kernel_diag",
    "variance_increment",
    "repr_weight",
    "repr_weight_deriv",
    "moving_average",
    "simulate_repr",
    "simulate_sde",
    "SdeStepper",
    "deriv_autocov",
    "power_spectrum",
    "fourier_autocov",
    "check_identities",
]

T_CUT = 15.0


@dataclass
class RadialSample:
    """Sampled S_t and its derivatives.

    ``s_values`` is (n_t,) or (n_rep, n_t); ``deriv_values`` has a trailing
    axis of length c_d (empty for the representation method at d=2).
    """

    times: np.ndarray
    s_values: np.ndarray
    deriv_values: np.ndarray
    method_tag: str
    info: dict


def _quad(f, a, b, *, points=None, epsabs=1e-13, epsrel=1e-12, limit=400, weight=None, wvar=None):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        try:
            val, err = integrate.quad(
                f, a, b, points=points, epsabs=epsabs, epsrel=epsrel, limit=limit, weight=weight, wvar=wvar
            )
        except integrate.IntegrationWarning as exc:
            val, err = integrate.quad(f, a, b, points=points, epsabs=epsabs, epsrel=epsrel, limit=limit,
                                      weight=weight, wvar=wvar)
            if err > 1e-7:
                raise ConvergenceError(f"quadrature did not converge: estimated error {err:.3g} ({exc})") from exc
    return val


def _check_dim(d: int) -> None:
    if int(d) != d or d < 2:
        raise DomainError(f"dimension must be an integer >= 2, got {d!r}")


def kernel_diag(r1: float, r2: float, d: int) -> float:
    """Covariance of spherical averages h_{r1}(0), h_{r2}(0) (same centre)."""
    _check_dim(d)
    if r1 <= 0 or r2 <= 0:
        raise DomainError("radii must be positive")
    a = r1 * r1 + r2 * r2
    b = 2.0 * r1 * r2
    if r1 == r2:
        # log(2 r^2 (1 - cos)) = log(2 r^2) + log(1 - cos); the second piece carries the endpoint singularity
        f = lambda th: (math.log(b) + math.log(2.0 * math.sin(th / 2) ** 2) * 1.0) * math.sin(th) ** (d - 2)
    else:
        f = lambda th: math.log(a - b * math.cos(th)) * math.sin(th) ** (d - 2)
    return -c_of_d(d) * _quad(f, 0.0, math.pi)


def variance_increment(t: float, d: int) -> float:
    """Var(S_t), by quadrature."""
    _check_dim(d)
    t = abs(float(t))
    if t == 0.0:
        return 0.0
    e = math.exp(-t)

    def f(th):
        num = (1.0 - e) ** 2 + 2.0 * e * (1.0 - math.cos(th))
        den = 4.0 * math.sin(th / 2) ** 2
        return math.log(num / den) * math.sin(th) ** (d - 2)

    return t + 2.0 * c_of_d(d) * _quad(f, 0.0, math.pi)


def repr_weight(s, d: int):
    """(d-2) e^{2s} (1 - e^{2s})^{(d-4)/2} for s <= 0; a probability density on (-inf, 0]."""
    s = np.asarray(s, dtype=float)
    u = np.exp(2.0 * np.minimum(s, 0.0))
    w = (d - 2) * u * (1.0 - u) ** ((d - 4) / 2)
    return np.where(s <= 0, w, 0.0)


def _uniform_step(grid: np.ndarray) -> float:
    dt = np.diff(grid)
    if grid.size < 2 or np.any(dt <= 0):
        raise DomainError("grid must be strictly increasing with at least two points")
    h = float(dt.mean())
    if np.max(np.abs(dt - h)) > 1e-9 * max(h, 1.0):
        raise DomainError("the shared simulation grid must be uniform")
    return h


def repr_weight_deriv(s, d: int, i: int):
    """i-th derivative of repr_weight for s <= 0 (a polynomial in e^{2s} for even d >= 4)."""
    s = np.asarray(s, dtype=float)
    m = (d - 4) // 2
    u = np.exp(2.0 * np.minimum(s, 0.0))
    out = np.zeros_like(u)
    for j in range(m + 1):
        out += math.comb(m, j) * (-1) ** j * (2.0 * (j + 1)) ** i * u ** (j + 1)
    return np.where(s <= 0, (d - 2) * out, 0.0)


def _trap(w: np.ndarray) -> np.ndarray:
    w = w.copy()
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


def _window_dot(B: np.ndarray, wq: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """out[:, j] = sum_i wq[i] * B[:, idx[j] - m + i], m = len(wq) - 1."""
    m = wq.size - 1
    if idx.size * wq.size > 2_000_000 and idx.size > 64:
        full = signal.fftconvolve(B, wq[::-1][None, :], mode="valid", axes=1)  # full[:, k] uses B[k .. k+m]
        return full[:, idx - m]
    return np.stack([B[:, k - m : k + 1] @ wq for k in idx], axis=1)


def moving_average(
    B: np.ndarray, start: float, h: float, times: np.ndarray, d: int, cutoff: float = T_CUT, derivs: bool = True
) -> tuple[np.ndarray, np.ndarray, float]:
    """S_t and derivatives from a driver B sampled at start + h k (0 must be a grid time).

    S_t = int_{-cutoff}^0 g(s) (B_{s+t} - B_s) ds by the trapezoid rule, and
    S^(i)_t = (-1)^i int g^(i)(s) B_{s+t} ds, with the boundary term
    (-1)^{c+1} g^{(c-1)}(0) B_t added to the top derivative c = (d-2)/2.
    Returns (S, derivatives, truncation bound).
    """
    B = np.atleast_2d(B)
    m = int(round(cutoff / h))
    i0 = int(round(-start / h))
    idx = np.rint((np.asarray(times, dtype=float) - start) / h).astype(int)
    if abs(start + i0 * h) > 1e-9 * max(h, 1.0) or i0 - m < 0 or idx.min() - m < 0 or idx.max() >= B.shape[1]:
        raise DomainError("driving path does not cover [min(grid) - cutoff, max(grid)] or misses t = 0")
    svals = h * np.arange(-m, 1)
    wq = _trap(repr_weight(svals, d) * h)
    both = _window_dot(B, wq, np.concatenate([[i0], idx]))
    S = both[:, 1:] - both[:, :1]
    c = (d - 2) // 2
    D = np.zeros(S.shape + (c if derivs else 0,))
    if derivs:
        for i in range(1, c + 1):
            wi = _trap(repr_weight_deriv(svals, d, i) * h)
            col = (-1) ** i * _window_dot(B, wi, idx)
            if i == c:
                col = col + (-1) ** (c + 1) * float(repr_weight_deriv(0.0, d, c - 1)) * B[:, idx]
            D[..., i - 1] = col
    tail = math.exp(-2.0 * cutoff) * (d - 2) / 2 * float(np.max(np.abs(B)))
    return S, D, tail


def simulate_repr(
    grid,
    d: int,
    cutoff: float = T_CUT,
    seed: RngSeed | int = 0,
    n_rep: int | None = None,
    driver: np.ndarray | None = None,
    chunk: int = 500,
    derivs: bool = True,
) -> RadialSample:
    """Integral-representation simulator on a uniform ``grid``.

    The driving two-sided BM (B_0 = 0) lives on the same step over
    [min(grid, 0) - cutoff, max(grid, 0)]. ``driver`` (n_rep, n) injects a
    fixed driving path on that layout.
    """
    _check_dim(d)
    grid = np.asarray(grid, dtype=float)
    h = _uniform_step(grid)
    lo = min(grid[0], 0.0)
    hi = max(grid[-1], 0.0)
    if abs(lo / h - round(lo / h)) > 1e-6:
        raise DomainError("grid must sit on multiples of its step")
    m = int(round(cutoff / h))
    start = lo - m * h
    n_drv = int(round((hi - start) / h)) + 1
    single = n_rep is None
    nr = 1 if single else int(n_rep)
    if d != 2 and (d % 2 or d < 4):
        raise DomainError("integral representation needs even d >= 4 (or d = 2)")
    rng = rng_for(seed)
    S_all, D_all, tail = [], [], 0.0
    for c0 in range(0, nr, chunk):
        c1 = min(c0 + chunk, nr)
        if driver is None:
            B = _two_sided(rng, c1 - c0, start, h, n_drv)
        else:
            B = np.atleast_2d(np.asarray(driver, dtype=float))[c0:c1]
            if B.shape[1] < n_drv:
                raise DomainError("driving path does not cover [min(grid) - cutoff, max(grid)]")
        if d == 2:
            idx = np.rint((grid - start) / h).astype(int)
            S_all.append(B[:, idx] - B[:, [int(round(-start / h))]])
            D_all.append(np.zeros((c1 - c0, grid.size, 0)))
            continue
        S, D, tl = moving_average(B, start, h, grid, d, cutoff, derivs)
        S_all.append(S)
        D_all.append(D)
        tail = max(tail, tl)
    S = np.concatenate(S_all)
    if 0.0 in grid:
        S[:, np.flatnonzero(grid == 0.0)] = 0.0
    info = {"cutoff": cutoff, "truncation_bound": tail, "step": h}
    return _pack(grid, S, np.concatenate(D_all), "representation", single, info)


def _two_sided(rng: np.random.Generator, n: int, start: float, h: float, length: int) -> np.ndarray:
    """Two-sided BM pinned at 0 sampled at start + h k, k < length. 0 must be a grid time."""
    i0 = int(round(-start / h))
    if i0 < 0 or i0 >= length or abs(start + i0 * h) > 1e-9 * max(h, 1.0):
        raise DomainError("driving grid must contain time 0")
    inc = rng.standard_normal((n, length - 1)) * math.sqrt(h)
    B = np.zeros((n, length))
    B[:, i0 + 1 :] = np.cumsum(inc[:, i0:], axis=1)
    B[:, :i0] = -np.cumsum(inc[:, :i0][:, ::-1], axis=1)[:, ::-1]
    return B


def _pack(grid, s, der, tag, single, info) -> RadialSample:
    if single:
        s, der = s[0], der[0]
    return RadialSample(np.asarray(grid, dtype=float), s, der, tag, info)


def simulate_sde(grid, d: int, seed: RngSeed | int = 0, n_rep: int | None = None) -> RadialSample:
    """Stationary Langevin simulator.

    The derivative vector starts from its stationary law at grid[0] and the
    pair (integral of S^(1), derivatives) is stepped exactly with the
    augmented Gaussian transition, so S carries no time-integration error.
    """
    _check_dim(d)
    grid = np.asarray(grid, dtype=float)
    single = n_rep is None
    nr = 1 if single else int(n_rep)
    rng = rng_for(seed)
    if d == 2:
        inc = rng.standard_normal((nr, grid.size - 1)) * np.sqrt(np.diff(grid))
        s = np.zeros((nr, grid.size))
        s[:, 1:] = np.cumsum(inc, axis=1)
        if np.any(grid == 0.0):
            s -= s[:, np.flatnonzero(grid == 0.0)[:1]]
        return _pack(grid, s, np.zeros(s.shape + (0,)), "sde", single, {})
    stepper = SdeStepper(d)
    state = stepper.initial(nr, rng)
    out = stepper.run(state, np.diff(grid), rng)
    p = stepper.sys.p
    i0 = int(np.flatnonzero(grid == 0.0)[0]) if np.any(grid == 0.0) else 0
    s = out[..., 0] - out[:, i0 : i0 + 1, 0]
    return _pack(grid, s, out[..., 1:], "sde", single, {"order": p})


class SdeStepper:
    """Exact Gaussian stepping of (integral of S^(1), S^(1..c_d)) with cached transition factors."""

    def __init__(self, d: int):
        self.sys = companion_system(d)
        self._cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def initial(self, n: int, rng: np.random.Generator) -> np.ndarray:
        p = self.sys.p
        L0 = np.linalg.cholesky(stationary_covariance(self.sys))
        state = np.zeros((n, p + 1))
        state[:, 1:] = rng.standard_normal((n, p)) @ L0.T
        return state

    def _factors(self, dt: float):
        key = round(float(dt), 14)
        if key not in self._cache:
            E = augmented_exp(self.sys, dt)
            C = augmented_covariance(self.sys, dt)
            vals, vecs = np.linalg.eigh(C)
            self._cache[key] = (E, vecs * np.sqrt(np.clip(vals, 0.0, None)))
        return self._cache[key]

    def run(self, state: np.ndarray, diffs, rng: np.random.Generator) -> np.ndarray:
        """Trajectory of shape (n, len(diffs) + 1, p + 1) starting at ``state``."""
        n, k = state.shape
        out = np.empty((n, len(diffs) + 1, k))
        out[:, 0] = state
        for j, dt in enumerate(diffs):
            E, R = self._factors(dt)
            state = state @ E.T + rng.standard_normal((n, k)) @ R.T
            out[:, j + 1] = state
        return out


def deriv_autocov(u: float, d: int) -> float:
    """Autocovariance of S^(1) at lag u, by quadrature."""
    if int(d) != d or d < 4 or d % 2:
        raise DomainError("derivative autocovariance needs even d >= 4")
    u = abs(float(u))
    if u == 0.0:
        f = lambda th: math.sin(th) ** (d - 2) / (1.0 - math.cos(th)) if th > 0 else 0.0
        return c_of_d(d) * _quad(f, 0.0, math.pi)
    ch = math.cosh(u)

    def f(th):
        c = math.cos(th)
        return (1.0 - c * ch) / (c - ch) ** 2 * math.sin(th) ** (d - 2)

    pts = [min(u, math.pi / 2)]
    return c_of_d(d) * _quad(f, 0.0, math.pi, points=pts)


def power_spectrum(omega, d: int):
    if int(d) != d or d < 4 or d % 2:
        raise DomainError("power spectrum needs even d >= 4")
    omega = np.asarray(omega, dtype=float)
    den = np.ones_like(omega)
    for k in range(1, (d - 2) // 2 + 1):
        den = den * (omega**2 + (d - 2 * k) ** 2)
    out = 2.0 ** (d - 2) * math.gamma(d / 2) ** 2 / den / math.sqrt(2 * math.pi)
    return float(out) if out.ndim == 0 else out


def fourier_autocov(u: float, d: int) -> float:
    """(1/sqrt(2 pi)) * integral of power_spectrum(w) e^{i w u} dw, by quadrature."""
    u = abs(float(u))
    f = lambda w: power_spectrum(w, d)
    if u == 0.0:
        val = 2.0 * _quad(f, 0.0, math.inf)
    else:
        val = 2.0 * integrate.quad(f, 0.0, math.inf, weight="cos", wvar=u, limlst=200)[0]
    return val / math.sqrt(2 * math.pi)


def _exp_pair(theta: float, omega: float) -> float:
    return math.exp((theta - math.pi) * omega) + math.exp(-(theta - math.pi) * omega)


def check_identities(omega: float, d: int) -> tuple[float, float]:
    """Residuals of the two trigonometric-exponential integral identities.

    First: I_{d-2} = (d-2)(d-3)/(w^2 + (d-2)^2) I_{d-4} with
    I_n = int_0^pi (e^{(th-pi)w} + e^{-(th-pi)w}) sin^n th dth (needs d >= 6).
    Second: I_2 = 2 (e^{pi w} - e^{-pi w}) / (w (w^2 + 4)).
    """
    if omega == 0:
        raise DomainError("identities are stated for omega != 0")
    I = lambda n: _quad(lambda th: _exp_pair(th, omega) * math.sin(th) ** n, 0.0, math.pi, epsabs=0.0, epsrel=1e-13)
    first = math.nan
    if d >= 6:
        n = d - 2
        first = abs(I(n) - n * (n - 1) / (omega**2 + n * n) * I(n - 2))
    second = abs(I(2) - 2.0 * (math.exp(math.pi * omega) - math.exp(-math.pi * omega)) / (omega * (omega**2 + 4.0)))
    return first, second
