"""Clock process, Liouville Brownian motion and the spectral-dimension pipeline."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import ndimage, special

from .errors import DomainError, PathExitError, ResourceError
from .gmc import (
    CheckPair,
    FieldGrid,
    Lattice,
    MeasureGrid,
    _ball,
    add_log_singularity,
    gmc_measure,
    pin_field,
    regularize,
    synthesize_lgf,
)
from .params import Params, potential_exponent
from .stochastic import Path, RngSeed, heat_kernel, rng_for, sample_brownian

__all__ = [
    "ClockSample",
    "MomentFit",
    "SpecDimResult",
    "clock",
    "inverse_clock",
    "lbm_path",
    "default_epsilon",
    "revuz_check",
    "clock_scaling_check",
    "confined_moment",
    "moment_exponent",
    "spec_dim_estimate",
    "green_constant",
    "nested_green_oracle",
    "region_bound_check",
]


@dataclass
class ClockSample:
    times: np.ndarray
    f_values: np.ndarray  # (n_t,) or (n_paths, n_t)
    epsilon: float
    alpha: float


@dataclass(frozen=True)
class MomentFit:
    slope: float
    stderr: float
    t_used: tuple[float, ...]
    log_means: tuple[float, ...]


@dataclass(frozen=True)
class SpecDimResult:
    d_spec_hat: float
    chi_bar_hat: float
    slopes: dict
    stderr: dict
    formula_value: float

    def as_dict(self) -> dict:
        return {
            "chi_bar_hat": self.chi_bar_hat,
            "d_spec_hat": self.d_spec_hat,
            "formula_value": self.formula_value,
            "slopes": {str(k): v for k, v in self.slopes.items()},
            "stderr": {str(k): v for k, v in self.stderr.items()},
        }


def default_epsilon(lattice: Lattice, ds: float) -> float:
    return max(2 * lattice.dx, math.sqrt(ds))


class _RegCache:
    """Keeps the last few regularised grids of one field."""

    def __init__(self, fg: FieldGrid):
        self.fg = fg
        self.grids: dict[float, np.ndarray] = {}

    def get(self, eps: float) -> np.ndarray:
        if eps not in self.grids:
            if len(self.grids) > 3:
                self.grids.pop(next(iter(self.grids)))
            self.grids[eps] = regularize(self.fg, eps)
        return self.grids[eps]


def _reg(fg: FieldGrid, eps: float, h_eps: np.ndarray | None) -> np.ndarray:
    if h_eps is not None:
        return h_eps
    if np.all(fg.values == fg.values.flat[0]):
        return fg.values
    return regularize(fg, eps)


def _field_along(fg: FieldGrid, h_eps: np.ndarray, pts: np.ndarray, margin: float) -> np.ndarray:
    """Multilinear interpolation of h_eps at points (..., n_t, d); raises if a path leaves the box."""
    lat = fg.lattice
    lim = lat.half - margin
    out = np.abs(pts) > lim
    if np.any(out):
        bad = np.any(out, axis=-1)
        first = int(np.argmax(np.any(bad.reshape(-1, bad.shape[-1]), axis=0)))
        raise PathExitError(f"path leaves the box (|x| > {lim:.4g}) at grid index {first}", max(first - 1, 0))
    flat = pts.reshape(-1, fg.d)
    vals = ndimage.map_coordinates(h_eps, lat.index_of(flat).T, order=1, mode="nearest")
    return vals.reshape(pts.shape[:-1])


def clock(fg: FieldGrid, alpha: float, path: Path, epsilon: float, h_eps: np.ndarray | None = None) -> ClockSample:
    """Left Riemann sum F(s_j) = sum_{i<j} eps^{a^2/2} e^{a h_eps(B_{s_i})} ds_i."""
    if not 0 < alpha < 2:
        raise DomainError("alpha must lie in (0, 2)")
    h = _reg(fg, epsilon, h_eps)
    vals = _field_along(fg, h, path.values[..., :-1, :], epsilon)
    w = np.exp(alpha * vals + 0.5 * alpha * alpha * math.log(epsilon)) * np.diff(path.times)
    f = np.zeros(path.values.shape[:-1])
    np.cumsum(w, axis=-1, out=f[..., 1:])
    return ClockSample(path.times, f, epsilon, alpha)


def inverse_clock(ck: ClockSample, t):
    """Piecewise-linear inverse of a single clock."""
    f = np.asarray(ck.f_values)
    if f.ndim != 1:
        raise DomainError("inverse_clock takes a single clock")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > f[-1] * (1 + 1e-12)):
        raise DomainError(f"t outside the clock range [0, {f[-1]:.6g}]")
    out = np.interp(t, f, ck.times)
    return float(out) if out.ndim == 0 else out


def lbm_path(fg: FieldGrid, alpha: float, path: Path, epsilon: float, out_grid) -> Path:
    """B evaluated at F^{-1}(t) for t on ``out_grid``."""
    ck = clock(fg, alpha, path, epsilon)
    s = np.atleast_1d(inverse_clock(ck, np.asarray(out_grid, dtype=float)))
    vals = np.stack([np.interp(s, path.times, path.values[:, k]) for k in range(path.dim)], axis=1)
    out = Path(np.asarray(out_grid, dtype=float), vals)
    out.info["brownian_times"] = s
    return out


# ---------------------------------------------------------------- Revuz identity


def _green_time_integral(r: np.ndarray, T: float, d: int, nodes: int = 400) -> np.ndarray:
    """int_0^T p_t(0, y) dt for |y| = r, by Gauss-Legendre in log t using heat_kernel."""
    lo = math.log(T) - 60.0
    x, w = np.polynomial.legendre.leggauss(nodes)
    u = 0.5 * (math.log(T) - lo) * (x + 1) + lo
    w = 0.5 * (math.log(T) - lo) * w
    t = np.exp(u)
    pts = np.zeros((r.size, 1, d))
    pts[:, 0, 0] = r
    return heat_kernel(t[None, :], pts, np.zeros(d), d) @ (t * w)


def green_time_integral_exact(r, T: float, d: int):
    """Closed form of the same integral, d >= 3: Gamma(d/2-1, r^2/2T) / (2 pi^{d/2} r^{d-2})."""
    r = np.asarray(r, dtype=float)
    a = d / 2 - 1
    return special.gammaincc(a, r * r / (2 * T)) * math.gamma(a) / (2 * math.pi ** (d / 2) * r ** (d - 2))


def revuz_check(
    fg: FieldGrid,
    alpha: float,
    T: float,
    R: float,
    n_reps: int,
    seed: RngSeed | int,
    ds: float = 1e-4,
    epsilon: float | None = None,
    batch: int = 100,
) -> CheckPair:
    """MC occupation of B(0,R) by the clock up to T versus the heat-kernel integral of the measure.

    LHS: mean over Brownian paths from 0 of sum_{s_i < T} 1{|B_{s_i}| < R} dF.
    RHS: sum over cells in B(0,R) of mass * int_0^T p_t(0, y) dt (cell centre, origin cell at dx/2).
    """
    d = fg.d
    lat = fg.lattice
    eps = epsilon or default_epsilon(lat, ds)
    m = gmc_measure(fg, alpha, eps) if not np.all(fg.values == 0) else _flat_measure(fg, alpha, eps)
    sl, r2 = _ball(lat, d, np.zeros(d), R)
    inside = r2 <= R * R * (1 + 1e-12)
    r = np.sqrt(np.maximum(r2[inside], (lat.dx / 2) ** 2))
    rhs = float(np.sum(m.masses[sl][inside] * _green_time_integral(r, T, d)))
    h = _reg(fg, eps, None)
    grid = ds * np.arange(int(round(T / ds)) + 1)
    seed = RngSeed(seed) if isinstance(seed, int) else seed
    acc = []
    for b0 in range(0, n_reps, batch):
        nb = min(batch, n_reps - b0)
        p = sample_brownian(d, grid, seed.child(b0 // batch), n_paths=nb)
        pts = p.values[:, :-1, :]
        hit = np.sum(pts**2, axis=-1) < R * R
        # only in-ball points carry weight, so excursions outside the box are harmless
        wgt = np.zeros(hit.shape)
        wgt[hit] = np.exp(alpha * _field_along(fg, h, pts[hit], 0.0) + 0.5 * alpha * alpha * math.log(eps)) * ds
        acc.append(wgt.sum(axis=1))
    lhs = np.concatenate(acc)
    return CheckPair(float(lhs.mean()), float(lhs.std(ddof=1) / math.sqrt(lhs.size)), rhs, 0.0)


def _flat_measure(fg: FieldGrid, alpha: float, eps: float) -> MeasureGrid:
    masses = np.full(fg.values.shape, eps ** (alpha * alpha / 2) * fg.lattice.dx**fg.d)
    return MeasureGrid(fg.lattice, fg.d, masses, alpha, eps, None)


# ---------------------------------------------------------------- conformal scaling


def clock_scaling_check(
    d: int,
    gamma: float,
    c: float,
    n_reps: int,
    seed: RngSeed | int,
    lattice: Lattice | None = None,
    tau: float = 0.02,
    n_steps: int = 200,
    paths_per_field: int = 20,
    zero_field: bool = False,
) -> CheckPair:
    """Compare mean F_h(c^2 tau) (regularisation c*eps) with c^{alpha Q} mean F_{h'}(tau) (eps).

    h' is pinned at radius 1/c, which is the law of h(c .); the second
    ensemble's paths are c^{-1} B_{c^2 .} built from the same increments.
    Means are over fields; each field contributes the average over its paths.
    """
    pr = Params.make(d, gamma)
    alpha = pr.alpha
    lattice = lattice or Lattice(64, 4.0)
    eps = 2 * lattice.dx
    seed = RngSeed(seed) if isinstance(seed, int) else seed
    big, small = np.empty(n_reps), np.empty(n_reps)
    fac = c ** (alpha * pr.q_val)
    g1 = (c * c * tau / n_steps) * np.arange(n_steps + 1)
    g2 = (tau / n_steps) * np.arange(n_steps + 1)
    for i in range(n_reps):
        bm = sample_brownian(d, g1, seed.child(2 * i + 1), n_paths=paths_per_field)
        scaled = Path(g2, bm.values / c)
        if zero_field:
            f1 = f2 = FieldGrid(lattice, d, np.zeros((lattice.n,) * d), True)
        else:
            raw = synthesize_lgf(lattice, d, seed.child(2 * i), pin=False)
            f1, f2 = pin_field(raw, 1.0), pin_field(raw, 1.0 / c)
        big[i] = clock(f1, alpha, bm, c * eps).f_values[:, -1].mean()
        small[i] = fac * clock(f2, alpha, scaled, eps).f_values[:, -1].mean()
    se = lambda v: float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return CheckPair(float(big.mean()), se(big), float(small.mean()), se(small))


# ---------------------------------------------------------------- moments


def _singular_field(lattice: Lattice, d: int, beta: float, seed: RngSeed, zero: bool) -> FieldGrid:
    if zero:
        return FieldGrid(lattice, d, np.zeros((lattice.n,) * d), True)
    fg = synthesize_lgf(lattice, d, seed)
    return add_log_singularity(fg, beta) if beta else fg


def confined_moment(
    fg: FieldGrid,
    alpha: float,
    n: int,
    t: float,
    radius: float,
    n_paths: int,
    seed: RngSeed | int,
    n_steps: int = 256,
    epsilon: float | None = None,
    h_eps: np.ndarray | None = None,
    conditional: bool = False,
) -> tuple[float, float]:
    """Mean and stderr of F(t)^n 1{|B_s| < radius for all s <= t} over paths from 0.

    ``conditional=True`` divides by the confined fraction (mean over confined paths only).
    """
    grid = (t / n_steps) * np.arange(n_steps + 1)
    eps = epsilon or default_epsilon(fg.lattice, t / n_steps)
    p = sample_brownian(fg.d, grid, seed, n_paths=n_paths)
    conf = np.all(np.sum(p.values**2, axis=-1) < radius * radius, axis=1)
    vals = np.zeros(n_paths)
    if np.any(conf):
        sub = Path(grid, p.values[conf])
        ck = clock(fg, alpha, sub, eps, h_eps)
        vals[conf] = ck.f_values[:, -1] ** n
    if conditional:
        v = vals[conf]
        if v.size == 0:
            return 0.0, math.nan
        return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(n_paths))


def moment_exponent(
    d: int,
    gamma: float,
    beta: float,
    n: int,
    t_list: Sequence[float],
    delta: float,
    n_reps: int,
    seed: RngSeed | int,
    lattice: Lattice | None = None,
    n_fields: int = 4,
    n_steps: int = 256,
    zero_field: bool = False,
    epsilon: float | None = None,
    conditional: bool = False,
) -> MomentFit:
    """Slope of log E_0[F(t)^n 1{confined to B(0, t^{1/2-delta})}] against log t.

    The path expectation is taken per field (quenched) and the logs are
    averaged over ``n_fields`` independent fields; ``n_reps`` paths per field and t.
    ``conditional`` removes the t-dependence of the confinement probability itself.
    """
    pr = Params.make(d, gamma, beta)
    lattice = lattice or _default_lattice(d)
    seed = RngSeed(seed) if isinstance(seed, int) else seed
    ts = np.asarray(sorted(t_list), dtype=float)
    logs = np.full((n_fields, ts.size), np.nan)
    for f in range(n_fields):
        fg = _singular_field(lattice, d, beta, seed.child(f), zero_field)
        cache = _RegCache(fg)
        for j, t in enumerate(ts):
            eps = epsilon or default_epsilon(lattice, t / n_steps)
            h = fg.values if zero_field else cache.get(eps)
            mu, _ = confined_moment(fg, pr.alpha, n, t, t ** (0.5 - delta), n_reps, seed.child(1000 + 97 * f + j),
                                    n_steps, eps, h, conditional)
            if mu > 0:
                logs[f, j] = math.log(mu)
    keep = ~np.any(np.isnan(logs), axis=0)
    if not np.all(keep):
        warnings.warn(f"dropping t values with no confined paths: {ts[~keep].tolist()}")
    ts, logs = ts[keep], logs[:, keep]
    if ts.size < 2:
        raise DomainError("fewer than two usable t values")
    lt = np.log(ts)
    per = np.array([np.polyfit(lt, row, 1)[0] for row in logs])
    se = float(per.std(ddof=1) / math.sqrt(per.size)) if per.size > 1 else math.nan
    return MomentFit(float(np.polyfit(lt, logs.mean(axis=0), 1)[0]), se, tuple(ts.tolist()),
                     tuple(logs.mean(axis=0).tolist()))


def _default_lattice(d: int) -> Lattice:
    return {2: Lattice(512, 4.0), 3: Lattice(128, 4.0), 4: Lattice(64, 4.0)}.get(d, Lattice(16, 4.0))


# ---------------------------------------------------------------- spectral dimension


def spec_dim_estimate(
    d: int,
    gamma: float,
    beta: float,
    chi_list: Sequence[float],
    t_range: Sequence[float],
    n_reps: int,
    seed: RngSeed | int,
    lattice: Lattice | None = None,
    n_fields: int = 4,
    n_steps: int = 128,
) -> SpecDimResult:
    """Locate the chi where the small-t exponent of E_{0,0,t}[F^chi e^{-F}] p_t(0,0) crosses -1.

    The bridge expectation uses Brownian paths on [0, t/2] with the density
    (t/(t-s))^{d/2} exp(|x-y|^2/2t - |B_s-y|^2/(2(t-s))) at s = t/2, x = y = 0.
    Logs of the path means are averaged over fields, then regressed on log t.
    """
    pr = Params.make(d, gamma, beta)
    if not pr.q_val > math.sqrt(2 * d):
        raise DomainError(f"need Q > sqrt(2d); alpha must stay below alpha_c = {pr.alpha_c:.6g}")
    lattice = lattice or _default_lattice(d)
    seed = RngSeed(seed) if isinstance(seed, int) else seed
    chis = np.asarray(sorted(chi_list), dtype=float)
    ts = np.asarray(sorted(t_range), dtype=float)
    logs = np.zeros((n_fields, chis.size, ts.size))
    for f in range(n_fields):
        fg = _singular_field(lattice, d, beta, seed.child(f), False)
        cache = _RegCache(fg)
        for j, t in enumerate(ts):
            s = t / 2
            grid = (s / n_steps) * np.arange(n_steps + 1)
            eps = default_epsilon(lattice, s / n_steps)
            p = sample_brownian(d, grid, seed.child(5000 + 131 * f + j), n_paths=n_reps)
            F = clock(fg, pr.alpha, p, eps, cache.get(eps)).f_values[:, -1]
            end2 = np.sum(p.values[:, -1, :] ** 2, axis=-1)
            logw = (d / 2) * math.log(t / (t - s)) - end2 / (2 * (t - s))
            base = logw - F - (d / 2) * math.log(2 * math.pi * t)
            for k, chi in enumerate(chis):
                v = chi * np.log(F) + base
                top = v.max()
                logs[f, k, j] = top + math.log(np.mean(np.exp(v - top)))
    lt = np.log(ts)
    slopes, errs = {}, {}
    e = np.empty(chis.size)
    for k, chi in enumerate(chis):
        per = np.array([np.polyfit(lt, logs[f, k], 1)[0] for f in range(n_fields)])
        e[k] = np.polyfit(lt, logs[:, k].mean(axis=0), 1)[0]
        slopes[float(chi)] = float(e[k])
        errs[float(chi)] = float(per.std(ddof=1) / math.sqrt(n_fields)) if n_fields > 1 else math.nan
    chi_bar = _crossing(chis, e, -1.0)
    return SpecDimResult(2 * (chi_bar + 1), chi_bar, slopes, errs, pr.spectral_dimension)


def _crossing(x: np.ndarray, y: np.ndarray, level: float) -> float:
    z = y - level
    for i in range(len(x) - 1):
        if z[i] == 0:
            return float(x[i])
        if z[i] * z[i + 1] < 0:
            return float(x[i] + (x[i + 1] - x[i]) * z[i] / (z[i] - z[i + 1]))
    if z[-1] == 0:
        return float(x[-1])
    raise DomainError(f"exponent curve does not cross {level} inside chi_list; slopes={y.tolist()}")


# ---------------------------------------------------------------- Green-function oracles


def green_constant(d: int) -> float:
    return math.gamma(d / 2 - 1) / (2 * math.pi ** (d / 2))


def _cells(m: MeasureGrid, center, r: float):
    sl, r2 = _ball(m.lattice, m.d, center, r)
    inside = r2 <= r * r * (1 + 1e-12)
    grids = np.meshgrid(*[(np.arange(s.start, s.stop) - m.lattice.n // 2) * m.lattice.dx for s in sl], indexing="ij")
    pos = np.stack([g[inside] for g in grids], axis=1)
    return pos, m.masses[sl][inside]


def nested_green_oracle(m: MeasureGrid, n: int, r: float, d: int | None = None, max_terms: float = 1e7) -> float:
    """sum over x_1..x_n in B(0,r) of G(0,x_1) G(x_1,x_2) ... G(x_{n-1},x_n) prod mass(x_i)."""
    d = m.d if d is None else d
    if d < 3:
        raise DomainError("Green-function oracle needs d >= 3")
    if not 1 <= n <= 3:
        raise DomainError("n must be 1, 2 or 3")
    pos, mass = _cells(m, np.zeros(m.d), r)
    if float(pos.shape[0]) ** n > max_terms:
        raise ResourceError(f"{pos.shape[0]}^{n} terms exceed the {max_terms:.0e} budget")
    clamp = (m.lattice.dx / 2) ** 2
    g = green_constant(d)
    g0 = g * np.maximum(np.sum(pos**2, axis=1), clamp) ** ((2 - d) / 2)
    vec = g0 * mass
    if n == 1:
        return float(vec.sum())
    diff2 = np.sum((pos[:, None, :] - pos[None, :, :]) ** 2, axis=-1)
    G = g * np.maximum(diff2, clamp) ** ((2 - d) / 2)
    # innermost factor first: mass, then G applied and re-weighted outward
    tail = G @ mass
    if n == 3:
        tail = G @ (mass * tail)
    return float(vec @ tail)


def region_bound_check(m: MeasureGrid, x, r: float, d: int | None = None) -> tuple[float, tuple[float, float, float, float]]:
    """Potential of B(0,r) seen from x, directly and split into four regions.

    Regions: B(0,|x|/2); B(x,|x|/2); B(x/2, 2|x|) minus the first two; the rest of B(0,r).
    """
    d = m.d if d is None else d
    if d < 3:
        raise DomainError("potential needs d >= 3")
    x = np.asarray(x, dtype=float)
    ax = float(np.linalg.norm(x))
    if ax >= r:
        raise DomainError("x must lie inside B(0, r)")
    pos, mass = _cells(m, np.zeros(m.d), r)
    dist2 = np.maximum(np.sum((pos - x) ** 2, axis=1), (m.lattice.dx / 2) ** 2)
    contrib = mass * dist2 ** ((2 - d) / 2)
    direct = float(contrib.sum())
    n0 = np.linalg.norm(pos, axis=1)
    nx = np.linalg.norm(pos - x, axis=1)
    nm = np.linalg.norm(pos - x / 2, axis=1)
    r1 = n0 < ax / 2
    r2 = (nx < ax / 2) & ~r1
    r3 = (nm < 2 * ax) & ~r1 & ~r2
    r4 = ~(r1 | r2 | r3)
    parts = tuple(float(contrib[mask].sum()) for mask in (r1, r2, r3, r4))
    return direct, parts  # type: ignore[return-value]
