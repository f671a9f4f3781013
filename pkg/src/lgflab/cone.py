"""Quantum-cone radial machinery.

Hitting times of the drifted spherical-average process, recentring, the
tilde construction driven by a two-sided BM whose negative side is
conditioned above a line, and finite-dimensional diagnostics for the
b -> infinity limit.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.spatial.distance import cdist

from .errors import ConvergenceError, DomainError
from .gmc import FieldGrid, Lattice
from .sphavg import T_CUT, RadialSample, SdeStepper, moving_average
from .stochastic import Path, RngSeed, rng_for, sample_conditioned_above_line

__all__ = [
    "ConeSample",
    "first_passage",
    "hitting_sigma",
    "recenter",
    "sample_cone",
    "tilde_driver",
    "tilde_process",
    "stopping_pair",
    "stopping_tail",
    "energy_distance",
    "permutation_band",
    "convergence_diagnostic",
    "reference_d2",
    "ks_against_reference",
    "cone_field",
]

MAX_DOUBLINGS = 8


@dataclass
class ConeSample:
    """Recentred trajectories S_{b,s} on a window of s; batch when sigma_b is an array."""

    b: float
    sigma_b: float | np.ndarray
    trajectory: RadialSample
    drift_beta: float
    q_minus_beta: float = float("nan")
    info: dict = field(default_factory=dict)


# ------------------------------------------------------------ first passage


def first_passage(times, values, slope: float, b: float) -> np.ndarray:
    """First time with values - slope * t <= -b, linearly interpolated; NaN if none.

    ``values`` is (n_t,) or (n, n_t). A crossing at the very first grid time
    is reported as -inf (the grid starts too late to resolve it).
    """
    t = np.asarray(times, dtype=float)
    v = np.atleast_2d(np.asarray(values, dtype=float))
    x = v - slope * t + b
    below = x <= 0
    hit = below.any(axis=1)
    j = np.argmax(below, axis=1)
    out = np.full(v.shape[0], np.nan)
    rows = np.flatnonzero(hit & (j > 0))
    jj = j[rows]
    x0, x1 = x[rows, jj - 1], x[rows, jj]
    w = x0 / (x0 - x1)
    out[rows] = t[jj - 1] + w * (t[jj] - t[jj - 1])
    out[hit & (j == 0)] = -np.inf
    return out


def hitting_sigma(sample: RadialSample, q_minus_beta: float, b: float):
    """sigma_b on a sampled path (float) or batch (array)."""
    if q_minus_beta <= 0:
        raise DomainError("drift Q - beta must be positive")
    if b <= 0:
        raise DomainError("level b must be positive")
    out = first_passage(sample.times, sample.s_values, q_minus_beta, b)
    if np.any(np.isnan(out)):
        raise ConvergenceError(f"{int(np.isnan(out).sum())} path(s) never reach the drifted level -{b}")
    if np.any(np.isinf(out)):
        raise DomainError("crossing at the first grid time; grid does not reach far enough into negative time")
    return float(out[0]) if np.ndim(sample.s_values) == 1 else out


def _interp_rows(t: np.ndarray, v: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Row-wise linear interpolation on a uniform grid; q is (n, m)."""
    h = t[1] - t[0]
    pos = (q - t[0]) / h
    i = np.clip(np.floor(pos).astype(int), 0, t.size - 2)
    w = pos - i
    r = np.arange(v.shape[0])[:, None]
    return v[r, i] * (1 - w) + v[r, i + 1] * w


def recenter(sample: RadialSample, sigma, window, beta: float = 0.0, b: float = float("nan"),
             q_minus_beta: float = float("nan")) -> ConeSample:
    """S_{b,s} = S_{sigma+s} - S_sigma for s on the window grid (step of the input grid).

    Derivative columns are shifted but not re-zeroed.
    """
    T, T_max = map(float, window)
    if not T <= 0 <= T_max:
        raise DomainError("window must contain 0")
    t = np.asarray(sample.times, dtype=float)
    h = float(t[1] - t[0])
    if not np.allclose(np.diff(t), h, rtol=1e-9, atol=1e-12):
        raise DomainError("recentring needs a uniform grid")
    single = np.ndim(sample.s_values) == 1
    S = np.atleast_2d(sample.s_values)
    D = sample.deriv_values[None] if single else sample.deriv_values
    sig = np.atleast_1d(np.asarray(sigma, dtype=float))
    if sig.size != S.shape[0]:
        raise DomainError("one hitting time per path")
    tol = 1e-9 * max(1.0, abs(h))
    if np.any(sig + T < t[0] - tol) or np.any(sig + T_max > t[-1] + tol):
        raise DomainError("sample does not cover [sigma + T, sigma + T_max]")
    k0, k1 = int(math.ceil(T / h - 1e-9)), int(math.floor(T_max / h + 1e-9))
    s_grid = np.arange(k0, k1 + 1) * h
    s_grid[s_grid == 0] = 0.0
    q = sig[:, None] + s_grid[None, :]
    base = _interp_rows(t, S, sig[:, None])
    vals = _interp_rows(t, S, q) - base
    vals[:, s_grid == 0.0] = 0.0
    der = np.stack([_interp_rows(t, D[..., i], q) for i in range(D.shape[-1])], axis=-1) if D.shape[-1] else \
        np.zeros(vals.shape + (0,))
    traj = RadialSample(s_grid, vals[0] if single else vals, der[0] if single else der,
                        sample.method_tag, {"recentred": True, **sample.info})
    return ConeSample(b, float(sig[0]) if single else sig, traj, beta, q_minus_beta)


# ------------------------------------------------------------ cone sampling


class _Extendable:
    """Two-sided S on t_lo + k*h, k >= 0, extendable to the right. S_0 = 0 after anchoring."""

    def __init__(self, d: int, t_lo: float, h: float, t_hi: float, n: int, rng: np.random.Generator):
        self.d, self.h, self.rng = d, h, rng
        self.i0 = int(round(-t_lo / h))
        if self.i0 < 0 or abs(t_lo + self.i0 * h) > 1e-9:
            raise DomainError("grid start must be a non-positive multiple of the step")
        self.t_lo = -self.i0 * h
        steps = int(math.ceil((t_hi - self.t_lo) / h - 1e-9))
        if d == 2:
            self.raw = np.zeros((n, steps + 1, 1))
            self.raw[:, 1:, 0] = np.cumsum(rng.standard_normal((n, steps)) * math.sqrt(h), axis=1)
        else:
            self.stepper = SdeStepper(d)
            self.raw = self.stepper.run(self.stepper.initial(n, rng), np.full(steps, h), rng)

    @property
    def times(self) -> np.ndarray:
        return self.t_lo + self.h * np.arange(self.raw.shape[1])

    def extend(self, rows: np.ndarray, t_hi: float) -> None:
        """Continue ``rows`` (Markov continuation); other rows are padded and must not be read past their end."""
        more = int(math.ceil((t_hi - self.times[-1]) / self.h - 1e-9))
        if more <= 0:
            return
        last = self.raw[rows, -1]
        if self.d == 2:
            inc = np.cumsum(self.rng.standard_normal((rows.size, more)) * math.sqrt(self.h), axis=1)
            new = last[:, None, :] + inc[..., None]
        else:
            new = self.stepper.run(last, np.full(more, self.h), self.rng)[:, 1:]
        pad = np.full((self.raw.shape[0], more, self.raw.shape[2]), np.nan)
        pad[rows] = new
        self.raw = np.concatenate([self.raw, pad], axis=1)

    def sample(self) -> RadialSample:
        s = self.raw[..., 0] - self.raw[:, self.i0 : self.i0 + 1, 0]
        t = self.times
        t[self.i0] = 0.0
        return RadialSample(t, s, self.raw[..., 1:], "sde" if self.d > 2 else "bm", {})


def _bridge_first_passage(x: np.ndarray, h: float, rng: np.random.Generator, m: int = 256):
    """First passage below 0 of BM paths known on a grid with step h (values x, shape (n, T)).

    Between grid points the path is a Brownian bridge, which crosses 0 with
    probability exp(-2 x0 x1 / h) when both ends are positive. The crossing
    step is resampled on m sub-steps from the bridge conditioned to cross.
    Returns (step index j, fraction in [0, 1] of the step, fine bridge (n, m+1)).
    """
    n, T = x.shape
    x0, x1 = x[:, :-1], x[:, 1:]
    with np.errstate(over="ignore", invalid="ignore"):
        p = np.where((x0 > 0) & (x1 > 0), np.exp(-2.0 * np.maximum(x0, 0) * np.maximum(x1, 0) / h), 1.0)
    p = np.where(np.isnan(p), 0.0, p)
    cross = rng.random(p.shape) < p
    if not cross.any(axis=1).all():
        raise ConvergenceError("bridge refinement found a path without a crossing")
    j = np.argmax(cross, axis=1) + 1
    a, b = x[np.arange(n), j - 1], x[np.arange(n), j]
    u = np.linspace(0.0, 1.0, m + 1)
    hs = h / m
    frac = np.empty(n)
    fine = np.empty((n, m + 1))
    todo = np.arange(n)
    for _ in range(100_000):
        if todo.size == 0:
            break
        inc = rng.standard_normal((todo.size, m)) * math.sqrt(hs)
        w = np.zeros((todo.size, m + 1))
        w[:, 1:] = np.cumsum(inc, axis=1)
        br = a[todo, None] + w - u * w[:, -1:] + u * (b[todo, None] - a[todo, None])
        y0, y1 = br[:, :-1], br[:, 1:]
        with np.errstate(over="ignore"):
            q = np.where((y0 > 0) & (y1 > 0), np.exp(-2.0 * np.maximum(y0, 0) * np.maximum(y1, 0) / hs), 1.0)
        c = rng.random(q.shape) < q
        ok = c.any(axis=1)
        k = np.argmax(c, axis=1)
        rows = todo[ok]
        kk = k[ok]
        y0k, y1k = y0[ok, kk], y1[ok, kk]
        wgt = np.where(y1k <= 0, y0k / (y0k - y1k), y0k / (y0k + y1k))
        frac[rows] = (kk + wgt) / m
        fine[rows] = br[ok]
        todo = todo[~ok]
    if todo.size:
        raise ConvergenceError("bridge refinement did not converge")
    return j, frac, fine


def _refine_d2(samp: RadialSample, a: float, b: float, window, beta: float, rng) -> ConeSample:
    t = samp.times
    h = float(t[1] - t[0])
    S = samp.s_values
    x = S - a * t + b
    x = np.where(np.isnan(x), 1.0, x)  # padding past a finished row's end is never reached
    j, frac, fine = _bridge_first_passage(x, h, rng)
    sig = t[j - 1] + frac * h
    if np.any(sig + window[0] < t[0]) or np.any(sig + window[1] > t[-1]):
        raise DomainError("sample does not cover the window around sigma")
    cs = recenter(samp, sig, window, beta, b, a)
    vals = cs.trajectory.s_values
    n = vals.shape[0]
    r = np.arange(n)
    s_grid = cs.trajectory.times
    coarse_base = S[r, j - 1] + frac * (S[r, j] - S[r, j - 1])
    exact_base = -b + a * sig
    vals += (coarse_base - exact_base)[:, None]
    # points inside the crossing step come from the fine bridge (in S units)
    q = sig[:, None] + s_grid[None, :]
    inside = (q > t[j - 1][:, None]) & (q < t[j][:, None])
    if inside.any():
        rr, cc = np.nonzero(inside)
        pos = (q[rr, cc] - t[j - 1][rr]) / h * (fine.shape[1] - 1)
        k = np.clip(np.floor(pos).astype(int), 0, fine.shape[1] - 2)
        w = pos - k
        xv = fine[rr, k] * (1 - w) + fine[rr, k + 1] * w
        vals[rr, cc] = xv - b + a * q[rr, cc] - exact_base[rr]
    vals[:, s_grid == 0.0] = 0.0
    cs.info["refined"] = "bridge"
    return cs


def sample_cone(
    d: int,
    q_minus_beta: float,
    b: float,
    window,
    n_reps: int,
    seed: RngSeed | int,
    dt: float = 0.01,
    beta: float = 0.0,
    lead: float = 10.0,
    refine: bool = True,
) -> ConeSample:
    """Recentred samples S_{b,.} on ``window`` from the stationary Langevin simulator (BM when d=2).

    The grid starts ``lead`` before the window's left end. Paths that have
    not crossed (or do not cover sigma + T_max) are continued, doubling the
    horizon up to 8 times. For d=2 (``refine``) the crossing is located on
    the Brownian bridge between grid points instead of by linear
    interpolation, which removes the O(sqrt(dt)) bias of the post-crossing
    increments.
    """
    if d != 2 and (d < 4 or d % 2):
        raise DomainError("cone sampling needs d = 2 or even d >= 4")
    T, T_max = map(float, window)
    a = float(q_minus_beta)
    if a <= 0:
        raise DomainError("drift Q - beta must be positive")
    t_lo = dt * math.floor((min(T, 0.0) - lead) / dt)
    horizon = b / a + 6.0 * math.sqrt(max(b, 1.0)) / a + T_max + 1.0
    sim = _Extendable(d, t_lo, dt, horizon, int(n_reps), rng_for(seed))
    for _ in range(MAX_DOUBLINGS + 1):
        samp = sim.sample()
        with np.errstate(invalid="ignore"):
            sig = first_passage(samp.times, samp.s_values, a, b)
        if np.any(np.isinf(sig)):
            raise DomainError("a path crosses before the grid start; increase lead")
        todo = np.flatnonzero(np.isnan(sig) | (sig + T_max > samp.times[-1]))
        if todo.size == 0:
            if np.any(sig + T < samp.times[0]):
                raise DomainError("a path crosses too early for the window; increase lead")
            if d == 2 and refine:
                out = _refine_d2(samp, a, b, (T, T_max), beta, sim.rng)
            else:
                out = recenter(samp, sig, (T, T_max), beta, b, a)
            out.info["horizon"] = float(samp.times[-1])
            return out
        horizon = sim.times[-1] + (sim.times[-1] - t_lo)
        sim.extend(todo, horizon)  # finished rows are NaN-padded past their old end, never read there
    raise ConvergenceError(f"no crossing of level -{b} after {MAX_DOUBLINGS} horizon doublings")


# ------------------------------------------------------------ tilde construction


def _conditioned_bessel(a: float, grid: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """B_u conditioned on B_u > -a u for all u > 0, exactly on the grid.

    Uses that the norm of a 3-d BM with drift of length a, started at 0, is
    the drift-a BM conditioned to stay positive.
    """
    inc = rng.standard_normal((n, grid.size - 1, 3)) * np.sqrt(np.diff(grid))[None, :, None]
    W = np.zeros((n, grid.size, 3))
    W[:, 1:] = np.cumsum(inc, axis=1)
    W[..., 0] += a * grid
    return np.linalg.norm(W, axis=-1) - a * grid


def tilde_driver(
    q_minus_beta: float,
    t_neg: float,
    t_pos: float,
    dt: float,
    n_paths: int,
    seed: RngSeed | int,
    method: str = "bessel",
) -> Path:
    """Two-sided B~ on [-t_neg, t_pos]: free BM for t >= 0, and B~_{-u} conditioned above -(Q-beta) u.

    ``method='bessel'`` samples the conditioned side exactly; ``'rejection'``
    conditions on the grid only (finite horizon t_neg, O(sqrt(dt)) bias).
    """
    if q_minus_beta <= 0:
        raise DomainError("drift Q - beta must be positive")
    seed = seed if isinstance(seed, RngSeed) else RngSeed(int(seed))
    m_neg = int(round(t_neg / dt))
    m_pos = int(round(t_pos / dt))
    g_neg = dt * np.arange(m_neg + 1)
    info = {"method": method}
    if method == "bessel":
        cond = _conditioned_bessel(q_minus_beta, g_neg, n_paths, rng_for(seed.child(0)))
    elif method == "rejection":
        cp = sample_conditioned_above_line(q_minus_beta, g_neg[-1], g_neg, seed.child(0), n_paths)
        cond = cp.values[..., 0]
        info.update(cp.info)
    else:
        raise DomainError(f"unknown conditioning method {method!r}")
    rng = rng_for(seed.child(1))
    right = np.zeros((n_paths, m_pos + 1))
    right[:, 1:] = np.cumsum(rng.standard_normal((n_paths, m_pos)) * math.sqrt(dt), axis=1)
    vals = np.concatenate([cond[:, :0:-1], right], axis=1)[..., None]
    times = dt * np.arange(-m_neg, m_pos + 1)
    times[m_neg] = 0.0
    p = Path(times, vals, origin_index=m_neg)
    p.info.update(info)
    return p


def tilde_process(conditioned_path: Path, d: int, cutoff: float = T_CUT, t_min: float | None = None) -> RadialSample:
    """S~ and its derivatives from a two-sided driver, on times from t_min (default: earliest covered) up."""
    if d < 4 or d % 2:
        raise DomainError("tilde construction needs even d >= 4")
    times = conditioned_path.times
    B = conditioned_path.values[..., 0]
    single = B.ndim == 1
    B = np.atleast_2d(B)
    h = float(times[1] - times[0])
    start = float(times[0])
    first = start + cutoff if t_min is None else float(t_min)
    if first < start + cutoff - 1e-9:
        raise DomainError("driver does not reach cutoff before the first output time")
    k0 = int(math.ceil((first - start) / h - 1e-9))
    out_t = times[k0:]
    S, D, tail = moving_average(B, start, h, out_t, d, cutoff)
    S[:, out_t == 0.0] = 0.0
    info = {"cutoff": cutoff, "truncation_bound": tail}
    if single:
        return RadialSample(out_t, S[0], D[0], "tilde", info)
    return RadialSample(out_t, S, D, "tilde", info)


def stopping_pair(b_tilde_path: Path, tilde_s: RadialSample, q_minus_beta: float, b: float):
    """(tau~_b, sigma~_b): first passages of B~ and S~ below the drifted level -b."""
    Bv = b_tilde_path.values[..., 0]
    tau = first_passage(b_tilde_path.times, Bv, q_minus_beta, b)
    sig = first_passage(tilde_s.times, tilde_s.s_values, q_minus_beta, b)
    if np.any(~np.isfinite(tau)) or np.any(~np.isfinite(sig)):
        raise ConvergenceError("driver horizon too short for both crossings")
    if np.ndim(Bv) == 1:
        return float(tau[0]), float(sig[0])
    return tau, sig


def stopping_tail(tau, sigma, lambdas) -> np.ndarray:
    """Empirical P(|sigma~ - tau~| >= lambda) on a grid of lambda."""
    gap = np.abs(np.asarray(sigma) - np.asarray(tau))
    lam = np.asarray(lambdas, dtype=float)
    return (gap[None, :] >= lam[:, None]).mean(axis=1)


# ------------------------------------------------------------ distances


def _mean_dist(X: np.ndarray, Y: np.ndarray, block: int = 2048) -> float:
    tot = 0.0
    for i in range(0, X.shape[0], block):
        tot += cdist(X[i : i + block], Y).sum()
    return tot / (X.shape[0] * Y.shape[0])


def energy_distance(X, Y) -> float:
    """2E|X-Y| - E|X-X'| - E|Y-Y'| (V-statistic) for samples of shape (n, k)."""
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)
    return 2 * _mean_dist(X, Y) - _mean_dist(X, X) - _mean_dist(Y, Y)


def permutation_band(X, Y, n_perm: int = 99, level: float = 0.99, seed: RngSeed | int = 0) -> float:
    """Quantile ``level`` of the energy distance under random relabelling of the pooled sample."""
    X = np.asarray(X, dtype=float).reshape(len(X), -1)
    Y = np.asarray(Y, dtype=float).reshape(len(Y), -1)
    Z = np.concatenate([X, Y])
    rng = rng_for(seed)
    vals = []
    for _ in range(n_perm):
        p = rng.permutation(Z.shape[0])
        vals.append(energy_distance(Z[p[: len(X)]], Z[p[len(X) :]]))
    return float(np.quantile(vals, level))


def _probe(cs: ConeSample, probe_times) -> np.ndarray:
    t = cs.trajectory.times
    h = t[1] - t[0]
    idx = np.rint((np.asarray(probe_times, dtype=float) - t[0]) / h).astype(int)
    if np.any(idx < 0) or np.any(idx >= t.size) or not np.allclose(t[idx], probe_times, atol=1e-9):
        raise DomainError("probe times must lie on the window grid")
    return np.atleast_2d(cs.trajectory.s_values)[:, idx]


def convergence_diagnostic(
    b_list,
    window,
    probe_times,
    n_reps: int,
    seed: RngSeed | int,
    d: int = 4,
    q_minus_beta: float = 1.0,
    dt: float = 0.01,
    reference: np.ndarray | None = None,
) -> dict:
    """Pairwise energy distances of the probe marginals of S_{b,.} across b.

    Every level uses the same seed, so b = b' gives exactly 0. With a
    ``reference`` sample (n, len(probe_times)) the distance of each level to
    it is reported as well.
    """
    b_list = [float(b) for b in b_list]
    if len(b_list) < 2:
        raise DomainError("need at least two levels")
    samples = [_probe(sample_cone(d, q_minus_beta, b, window, n_reps, seed, dt), probe_times) for b in b_list]
    n = len(b_list)
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            D[i, j] = D[j, i] = energy_distance(samples[i], samples[j])
    out = {"b": b_list, "probe_times": [float(p) for p in probe_times], "distance": D.tolist()}
    if reference is not None:
        out["to_reference"] = [energy_distance(s, reference) for s in samples]
    out["samples"] = samples
    return out


def reference_d2(q_minus_beta: float, probe_times, n: int, seed: RngSeed | int, dt: float = 0.01,
                 horizon: float | None = None) -> np.ndarray:
    """Limit law for d=2 at the probe times: B~ with the negative side conditioned above the line."""
    probe = np.asarray(probe_times, dtype=float)
    t_neg = max(0.0, -probe.min())
    hz = dt * math.ceil((t_neg if horizon is None else horizon) / dt)
    path = tilde_driver(q_minus_beta, hz, max(0.0, probe.max()) + dt, dt, n, seed)
    idx = np.rint((probe - path.times[0]) / dt).astype(int)
    return path.values[:, idx, 0]


def ks_against_reference(cs: ConeSample, reference: np.ndarray, probe_times) -> list[float]:
    """Two-sample KS p-values, one per probe time."""
    X = _probe(cs, probe_times)
    return [float(stats.ks_2samp(X[:, i], reference[:, i]).pvalue) for i in range(X.shape[1])]


# ------------------------------------------------------------ cone field


def cone_field(radial: ConeSample, sphere_part: FieldGrid | None, beta: float,
               lattice: Lattice | None = None, d: int | None = None) -> FieldGrid:
    """Field equal to S_{b,s} + beta*s on the sphere of radius e^{-s}, plus ``sphere_part``.

    The origin cell uses radius dx/2. With ``sphere_part=None`` the lattice and
    dimension must be given (radial-only cone).
    """
    if sphere_part is not None:
        lattice, d = sphere_part.lattice, sphere_part.d
    if lattice is None or d is None:
        raise DomainError("lattice and dimension needed for a radial-only cone")
    S = np.asarray(radial.trajectory.s_values, dtype=float)
    if S.ndim != 1:
        raise DomainError("cone_field takes a single trajectory")
    s = radial.trajectory.times
    x = lattice.coords
    rho2 = np.zeros((lattice.n,) * d)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = lattice.n
        rho2 = rho2 + (x**2).reshape(shape)
    rho = np.maximum(np.sqrt(rho2), lattice.dx / 2)
    sv = -np.log(rho)
    need_lo, need_hi = float(sv.min()), float(sv.max())
    if s[0] > need_lo + 1e-12 or s[-1] < need_hi - 1e-12:
        raise DomainError(f"radial window [{s[0]:.3g}, {s[-1]:.3g}] does not cover shells s in [{need_lo:.3g}, {need_hi:.3g}]")
    if s[1] - s[0] > math.log(2.0):
        raise DomainError("radial grid coarser than the shell discretization")
    vals = np.interp(sv, s, S) + beta * sv
    if sphere_part is not None:
        if sphere_part.values.shape != vals.shape:
            raise DomainError("sphere part has the wrong shape")
        vals = vals + sphere_part.values
    return FieldGrid(lattice, d, vals, True, (float(beta), tuple([0.0] * d)), None, 1.0)
