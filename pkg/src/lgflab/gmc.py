"""Lattice LGF synthesis and grid GMC measures.

The field lives on a periodic box [-L/2, L/2)^d with n points per axis;
the origin is the lattice point with index n//2 on every axis.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import ndimage, special, stats

from .errors import DomainError
from .stochastic import RngSeed, rng_for

__all__ = [
    "Lattice",
    "FieldGrid",
    "MeasureGrid",
    "ScalingFit",
    "CheckPair",
    "synthesize_lgf",
    "zero_field",
    "constant_field",
    "regularize",
    "spherical_average",
    "sphere_points",
    "add_log_singularity",
    "gmc_measure",
    "ball_mass",
    "ball_mass_table",
    "scaling_exponent",
    "fit_scaling",
    "ball_mass_moments_exact",
    "rooted_second_moment",
    "thickness",
    "potential",
    "coordinate_change_check",
    "radial_project",
    "covariance_slope",
    "save_field",
    "load_field",
]


@dataclass(frozen=True)
class Lattice:
    n: int
    L: float

    def __post_init__(self):
        if self.n < 4 or self.n & (self.n - 1):
            raise DomainError(f"n must be a power of two >= 4, got {self.n}")
        if self.L <= 0:
            raise DomainError("box side must be positive")

    @property
    def dx(self) -> float:
        return self.L / self.n

    @property
    def coords(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.dx

    @property
    def half(self) -> float:
        """Largest coordinate magnitude still safely inside the box."""
        return self.L / 2 - self.dx

    def index_of(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) / self.dx + self.n // 2


@dataclass
class FieldGrid:
    """Field values on a lattice. Treat as immutable once built."""

    lattice: Lattice
    d: int
    values: np.ndarray
    pinned: bool = False
    singularity: tuple[float, tuple[float, ...]] | None = None
    seed: RngSeed | None = None
    pin_radius: float = 1.0
    _fft: np.ndarray | None = dc_field(default=None, repr=False, compare=False)

    def spectrum(self) -> np.ndarray:
        if self._fft is None:
            self._fft = np.fft.rfftn(self.values)
        return self._fft


@dataclass
class MeasureGrid:
    lattice: Lattice
    d: int
    masses: np.ndarray
    gamma: float
    epsilon: float
    singularity: tuple[float, tuple[float, ...]] | None = None

    @property
    def total(self) -> float:
        return float(self.masses.sum())


@dataclass(frozen=True)
class ScalingFit:
    slope: float
    stderr: float
    intercept: float
    radii: tuple[float, ...]
    log_stats: tuple[float, ...]


@dataclass(frozen=True)
class CheckPair:
    """Two Monte Carlo means with their standard errors."""

    lhs: float
    lhs_err: float
    rhs: float
    rhs_err: float

    def z(self) -> float:
        den = math.hypot(self.lhs_err, self.rhs_err)
        if den == 0:
            return 0.0 if self.lhs == self.rhs else math.inf
        return abs(self.lhs - self.rhs) / den

    def overlap(self, k: float = 3.0) -> bool:
        return abs(self.lhs - self.rhs) <= k * (self.lhs_err + self.rhs_err)


# ---------------------------------------------------------------- synthesis


def _kgrid(lattice: Lattice, d: int) -> np.ndarray:
    """|k| on the rfftn half-spectrum layout."""
    n, dx = lattice.n, lattice.dx
    full = 2 * np.pi * np.fft.fftfreq(n, dx)
    half = 2 * np.pi * np.fft.rfftfreq(n, dx)
    k2 = np.zeros((n,) * (d - 1) + (half.size,))
    for ax in range(d):
        k = half if ax == d - 1 else full
        shape = [1] * d
        shape[ax] = k.size
        k2 = k2 + (k**2).reshape(shape)
    return np.sqrt(k2)


@lru_cache(maxsize=8)
def _kgrid_cached(lattice: Lattice, d: int) -> np.ndarray:
    return _kgrid(lattice, d)


def _sphere_multiplier(kr: np.ndarray, d: int) -> np.ndarray:
    """Fourier transform of the uniform probability on the unit sphere, at |k| r."""
    nu = d / 2 - 1
    out = np.ones_like(kr)
    nz = kr > 1e-12
    z = kr[nz]
    if d == 3:
        out[nz] = np.sin(z) / z
    else:
        out[nz] = math.gamma(d / 2) * (2.0 / z) ** nu * special.jv(nu, z)
    return out


def _spectral_density(k: np.ndarray, d: int) -> np.ndarray:
    # covariance kernel -log|x| <-> (2 pi)^{-d} 2^{d-1} pi^{d/2} Gamma(d/2) |k|^{-d}
    const = 2.0 ** (d - 1) * math.pi ** (d / 2) * math.gamma(d / 2) / (2 * math.pi) ** d
    with np.errstate(divide="ignore"):
        out = const * k ** (-float(d))
    out.flat[0] = 0.0
    return out


def synthesize_lgf(
    lattice: Lattice,
    d: int,
    seed: RngSeed | int,
    pin: bool = True,
    pin_radius: float = 1.0,
) -> FieldGrid:
    """Sample the torus LGF by spectral synthesis and pin it at the sphere of radius ``pin_radius``."""
    if d < 2:
        raise DomainError("d must be >= 2")
    if pin and pin_radius + 2 * lattice.dx > lattice.L / 2:
        raise DomainError("lattice too small for the pinning sphere")
    if isinstance(seed, int):
        seed = RngSeed(seed)
    rng = rng_for(seed)
    shape = (lattice.n,) * d
    k = _kgrid_cached(lattice, d)
    amp = np.sqrt(_spectral_density(k, d) * lattice.n**d * (2 * np.pi / lattice.L) ** d)
    W = np.fft.rfftn(rng.standard_normal(shape))
    W *= amp
    vals = np.fft.irfftn(W, s=shape, axes=range(d))
    fg = FieldGrid(lattice, d, vals, False, None, seed, pin_radius, _fft=W)
    return pin_field(fg, pin_radius) if pin else fg


def pin_field(fg: FieldGrid, radius: float = 1.0) -> FieldGrid:
    """Subtract the spherical average of radius ``radius`` around the origin."""
    c = float(regularize(fg, radius)[(fg.lattice.n // 2,) * fg.d])
    spec = fg.spectrum().copy()
    spec.flat[0] -= c * fg.lattice.n**fg.d
    return FieldGrid(fg.lattice, fg.d, fg.values - c, True, fg.singularity, fg.seed, radius, _fft=spec)


def zero_field(lattice: Lattice, d: int) -> FieldGrid:
    return FieldGrid(lattice, d, np.zeros((lattice.n,) * d), True)


def constant_field(lattice: Lattice, d: int, c: float) -> FieldGrid:
    return FieldGrid(lattice, d, np.full((lattice.n,) * d, float(c)), False)


def regularize(fg: FieldGrid, eps: float) -> np.ndarray:
    """h_eps at every lattice point: spherical average of radius eps of the band-limited interpolant.

    Computed exactly in Fourier space with the sphere multiplier.
    """
    if eps <= 0:
        raise DomainError("regularisation radius must be positive")
    k = _kgrid_cached(fg.lattice, fg.d)
    return np.fft.irfftn(fg.spectrum() * _sphere_multiplier(k * eps, fg.d), s=fg.values.shape, axes=range(fg.d))


# ---------------------------------------------------------------- spheres


@lru_cache(maxsize=64)
def sphere_points(d: int, m: int) -> np.ndarray:
    """Antipodally symmetric quasi-uniform set of 2*ceil(m/2) unit vectors in R^d."""
    h = (m + 1) // 2
    if d == 2:
        th = np.pi * (np.arange(h) + 0.5) / h
        P = np.stack([np.cos(th), np.sin(th)], axis=1)
    elif d == 3:
        i = np.arange(h) + 0.5
        z = 1.0 - i / h  # upper hemisphere, z in (0, 1)
        phi = np.pi * (1 + 5**0.5) * i
        rho = np.sqrt(1 - z * z)
        P = np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=1)
    else:
        k = 1 << math.ceil(math.log2(h))
        u = stats.qmc.Sobol(d, scramble=False).random(k)[:h] + 0.5 / k  # shift off the cube faces
        P = stats.norm.ppf(u)
        P /= np.linalg.norm(P, axis=1, keepdims=True)
    return np.concatenate([P, -P])


def _n_sphere_points(d: int, r: float, dx: float) -> int:
    return int(min(40000, max(64, math.ceil(8 * (r / dx) ** (d - 1)))))


def _interp(values: np.ndarray, lattice: Lattice, pts: np.ndarray) -> np.ndarray:
    idx = lattice.index_of(pts).T
    return ndimage.map_coordinates(values, idx, order=1, mode="nearest")


def _inside(lattice: Lattice, x, r: float) -> bool:
    x = np.asarray(x, dtype=float)
    return bool(np.all(np.abs(x) + r <= lattice.half + 1e-12))


def spherical_average(fg: FieldGrid, x, r: float) -> float:
    """Mean of the multilinearly interpolated field over a point set on the sphere S(x, r)."""
    x = np.broadcast_to(np.asarray(x, dtype=float), (fg.d,))
    if r < 2 * fg.lattice.dx - 1e-12:
        raise DomainError(f"radius {r} below resolution 2*dx = {2 * fg.lattice.dx}")
    if not _inside(fg.lattice, x, r):
        raise DomainError("sphere leaves the box")
    P = x + r * sphere_points(fg.d, _n_sphere_points(fg.d, r, fg.lattice.dx))
    return float(_interp(fg.values, fg.lattice, P).mean())


def add_log_singularity(fg: FieldGrid, beta: float, center=None) -> FieldGrid:
    """Subtract beta*log|x - center| (periodic distance); the centre cell uses |x| = dx/2."""
    lat = fg.lattice
    c = np.zeros(fg.d) if center is None else np.asarray(center, dtype=float)
    ci = lat.index_of(c)
    if not np.allclose(ci, np.round(ci), atol=1e-9):
        raise DomainError("singularity centre must be a lattice point")
    if beta == 0:
        return FieldGrid(lat, fg.d, fg.values.copy(), fg.pinned, fg.singularity, fg.seed, fg.pin_radius)
    logr = _log_dist(lat, fg.d, tuple(np.round(ci).astype(int)))
    prev = fg.singularity[0] if fg.singularity else 0.0
    return FieldGrid(lat, fg.d, fg.values - beta * logr, fg.pinned, (prev + beta, tuple(c.tolist())), fg.seed,
                     fg.pin_radius)


@lru_cache(maxsize=8)
def _log_dist(lat: Lattice, d: int, ci: tuple[int, ...]) -> np.ndarray:
    r2 = np.zeros((lat.n,) * d)
    base = np.arange(lat.n)
    for ax in range(d):
        off = (base - ci[ax] + lat.n // 2) % lat.n - lat.n // 2
        shape = [1] * d
        shape[ax] = lat.n
        r2 = r2 + ((off * lat.dx) ** 2).reshape(shape)
    r2[ci] = (lat.dx / 2) ** 2
    out = 0.5 * np.log(r2)
    out.setflags(write=False)
    return out


# ---------------------------------------------------------------- measures


def gmc_measure(fg: FieldGrid, gamma: float, epsilon: float) -> MeasureGrid:
    d = fg.d
    if not (0 < gamma < math.sqrt(2 * d)):
        raise DomainError(f"gamma must lie in (0, sqrt(2d)), got {gamma}")
    if epsilon < 2 * fg.lattice.dx - 1e-12:
        raise DomainError(f"epsilon {epsilon} below the 2*dx floor {2 * fg.lattice.dx}")
    h = regularize(fg, epsilon)
    masses = np.exp(gamma * h + 0.5 * gamma * gamma * math.log(epsilon)) * fg.lattice.dx**d
    return MeasureGrid(fg.lattice, d, masses, gamma, epsilon, fg.singularity)


def _ball(lat: Lattice, d: int, x, r: float):
    """Slices of the sub-box around x and the squared distances of its cell centres."""
    x = np.broadcast_to(np.asarray(x, dtype=float), (d,))
    if not _inside(lat, x, r):
        raise DomainError("ball leaves the box")
    sl = []
    r2 = 0.0
    for ax in range(d):
        lo = int(math.floor(lat.index_of(x[ax] - r)))
        hi = int(math.ceil(lat.index_of(x[ax] + r))) + 1
        lo, hi = max(lo, 0), min(hi, lat.n)
        sl.append(slice(lo, hi))
        c = (np.arange(lo, hi) - lat.n // 2) * lat.dx - x[ax]
        shape = [1] * d
        shape[ax] = hi - lo
        r2 = r2 + (c**2).reshape(shape)
    return tuple(sl), np.asarray(r2)


def ball_mass(m: MeasureGrid, x, r: float) -> float:
    sl, r2 = _ball(m.lattice, m.d, x, r)
    return float(m.masses[sl][r2 <= r * r * (1 + 1e-12)].sum())


def _center(m, center_mode: str):
    if center_mode == "origin":
        return np.zeros(m.d)
    if center_mode == "singularity":
        if not m.singularity:
            raise DomainError("measure carries no singularity")
        return np.asarray(m.singularity[1])
    raise DomainError(f"unknown center_mode {center_mode!r}")


def ball_mass_table(
    ensemble: Sequence[MeasureGrid] | Mapping[float, Sequence[MeasureGrid]],
    radii: Sequence[float],
    center_mode: str = "origin",
) -> np.ndarray:
    """(n_rep, n_radii) ball masses. A mapping radius -> measures allows radius-dependent epsilon."""
    radii = list(radii)
    if isinstance(ensemble, Mapping):
        cols = [[ball_mass(m, _center(m, center_mode), r) for m in ensemble[r]] for r in radii]
        return np.array(cols).T
    return np.array([[ball_mass(m, _center(m, center_mode), r) for r in radii] for m in ensemble])


def _stat(col: np.ndarray, q: float, statistic: str, trim: float, quantile: float) -> float:
    if statistic == "mean":
        return math.log(stats.trim_mean(col**q, trim))
    if statistic == "quantile":
        return q * math.log(np.quantile(col, quantile))
    if statistic == "logmean":
        return q * float(np.mean(np.log(col)))
    raise DomainError(f"unknown statistic {statistic!r}")


def fit_scaling(
    table: np.ndarray,
    radii: Sequence[float],
    q: float,
    statistic: str = "mean",
    trim: float = 0.0,
    quantile: float = 0.5,
) -> ScalingFit:
    """Least-squares slope of log(statistic of mass^q) against log r, jackknife stderr over replicates."""
    radii = np.asarray(radii, dtype=float)
    if radii.size < 3 or math.log2(radii.max() / radii.min()) < 2 - 1e-9:
        raise DomainError("need >= 3 radii spanning >= 2 octaves")
    table = np.asarray(table, dtype=float)
    lr = np.log(radii)

    def slope_of(t):
        ys = np.array([_stat(t[:, j], q, statistic, trim, quantile) for j in range(t.shape[1])])
        a, b = np.polyfit(lr, ys, 1)
        return a, b, ys

    a, b, ys = slope_of(table)
    n = table.shape[0]
    if n > 2:
        jk = np.array([slope_of(np.delete(table, i, axis=0))[0] for i in range(n)])
        se = math.sqrt((n - 1) / n * np.sum((jk - jk.mean()) ** 2))
    else:
        se = math.nan
    return ScalingFit(float(a), se, float(b), tuple(radii.tolist()), tuple(ys.tolist()))


def scaling_exponent(
    ensemble,
    q: float,
    radii: Sequence[float],
    center_mode: str = "origin",
    statistic: str = "mean",
    trim: float = 0.0,
    quantile: float = 0.5,
) -> ScalingFit:
    """Scaling slope of ball masses. ``ensemble`` is a list of measures, a radius-keyed mapping, or a table."""
    if isinstance(ensemble, np.ndarray):
        table = ensemble
    else:
        table = ball_mass_table(ensemble, radii, center_mode)
    return fit_scaling(table, radii, q, statistic, trim, quantile)


# ---------------------------------------------------------------- exact and rooted moments


@lru_cache(maxsize=8)
def _pinned_kernels(lattice: Lattice, d: int, eps: float, pin_radius: float):
    """Centred grids K_ee(z) = Cov(h_eps(0), h_eps(z)), K_e1(z) = Cov(h_eps(z), h_pin(0)) and K_11 = Var h_pin(0).

    Torus covariances of the unpinned synthesis; index n//2 along every axis is the origin.
    """
    k = _kgrid_cached(lattice, d)
    S = _spectral_density(k, d) * (2 * np.pi / lattice.L) ** d
    Me = _sphere_multiplier(k * eps, d)
    M1 = _sphere_multiplier(k * pin_radius, d)
    shape = (lattice.n,) * d
    axes = range(d)
    back = lambda spec: np.fft.fftshift(np.fft.irfftn(spec, s=shape, axes=axes) * lattice.n**d)
    kee, ke1 = back(S * Me * Me), back(S * Me * M1)
    k11 = float(back(S * M1 * M1)[(lattice.n // 2,) * d])
    for a in (kee, ke1):
        a.setflags(write=False)
    return kee, ke1, k11


def _pinned_var(lattice: Lattice, d: int, eps: float, pin_radius: float) -> np.ndarray:
    kee, ke1, k11 = _pinned_kernels(lattice, d, eps, pin_radius)
    return kee[(lattice.n // 2,) * d] - 2 * ke1 + k11


def ball_mass_moments_exact(lattice: Lattice, d: int, gamma: float, eps: float, r: float,
                            pin_radius: float = 1.0) -> tuple[float, float]:
    """E[mu(B(0,r))] and E[mu(B(0,r))^2] for the pinned lattice field, from its exact covariance."""
    if r > lattice.L / 4:
        raise DomainError("exact second moment needs r <= L/4 (no wrap-around)")
    sl, r2 = _ball(lattice, d, np.zeros(d), r)
    inside = np.zeros((lattice.n,) * d, dtype=bool)
    inside[sl] = r2 <= r * r * (1 + 1e-12)
    kee, ke1, k11 = _pinned_kernels(lattice, d, eps, pin_radius)
    var = _pinned_var(lattice, d, eps, pin_radius)
    g2 = gamma * gamma
    cell = eps ** (g2 / 2) * lattice.dx**d
    first = float(cell * np.exp(g2 * var[inside] / 2).sum())
    # sum_{x,y} f(x) f(y) exp(g2 K_ee(x - y)) by circular convolution
    f = np.where(inside, np.exp(g2 * (var / 2 - ke1)), 0.0)
    g = np.fft.ifftshift(np.exp(g2 * kee))
    axes = range(d)
    conv = np.fft.irfftn(np.fft.rfftn(f) * np.fft.rfftn(g), s=f.shape, axes=axes)
    second = float((f * conv).sum() * math.exp(g2 * k11) * cell**2)
    return first, second


def rooted_second_moment(fg: FieldGrid, gamma: float, eps: float, r: float,
                         seed: RngSeed | int, n_roots: int = 1) -> float:
    """Unbiased estimate of E[mu(B(0,r))^2] from one pinned field, by the rooted-measure tilt.

    A root x is drawn with probability proportional to E[mass(x)]; the field seen
    from a mass-weighted root is h + gamma Cov(., x), so the estimate is
    E[mu(B)] * sum_y mass(y) exp(gamma^2 Cov(h_eps(y), h_eps(x))).
    Far less heavy-tailed than averaging mu(B)^2 directly.
    """
    if not fg.pinned:
        raise DomainError("rooted estimate expects a pinned field")
    lat, d = fg.lattice, fg.d
    m = gmc_measure(fg, gamma, eps)
    sl, r2 = _ball(lat, d, np.zeros(d), r)
    mask = r2 <= r * r * (1 + 1e-12)
    kee, ke1, k11 = _pinned_kernels(lat, d, float(eps), float(fg.pin_radius))
    var = _pinned_var(lat, d, float(eps), float(fg.pin_radius))[sl][mask]
    g2 = gamma * gamma
    w = np.exp(g2 * var / 2)
    total = float(eps ** (g2 / 2) * lat.dx**d * w.sum())
    idx = np.argwhere(mask)
    starts = np.array([s.start for s in sl])
    rng = rng_for(seed)
    masses = m.masses[sl][mask]
    ke1_in = ke1[sl][mask]
    c = lat.n // 2
    acc = 0.0
    for j in rng.choice(idx.shape[0], size=n_roots, p=w / w.sum()):
        root = idx[j] + starts
        shift = tuple(int(root[a] - c) for a in range(d))
        kx = np.roll(kee, shift, axis=tuple(range(d)))[sl][mask]
        cov = kx - ke1_in - ke1[tuple(root)] + k11
        acc += float(np.sum(masses * np.exp(g2 * cov)))
    return total * acc / n_roots


def thickness(fg: FieldGrid, x, eps_list: Sequence[float]) -> float:
    eps = np.asarray(eps_list, dtype=float)
    if eps.size < 3:
        raise DomainError("need at least 3 radii")
    if np.any(eps < 2 * fg.lattice.dx - 1e-12):
        raise DomainError("radii below resolution")
    h = np.array([spherical_average(fg, x, e) for e in eps])
    return float(np.polyfit(-np.log(eps), h, 1)[0])


def potential(m: MeasureGrid, x, radius: float, d: int | None = None) -> float:
    """Sum over cells in B(x, radius) of |x - y|^{2-d} mass(y); the self cell uses dx/2."""
    d = m.d if d is None else d
    if d == 2:
        raise DomainError("the |x-y|^{2-d} potential degenerates in d = 2")
    sl, r2 = _ball(m.lattice, m.d, x, radius)
    inside = r2 <= radius * radius * (1 + 1e-12)
    r2 = np.maximum(r2, (m.lattice.dx / 2) ** 2)
    return float(np.sum(m.masses[sl][inside] * r2[inside] ** ((2 - d) / 2)))


# ---------------------------------------------------------------- checks


def covariance_slope(
    lattice: Lattice,
    d: int,
    seps: Sequence[int],
    n_reps: int,
    seed: RngSeed | int,
    n_base: int = 64,
) -> ScalingFit:
    """Slope of Cov(h(x), h(x + r e)) + log r against log r over unpinned torus fields.

    Each replicate contributes the average product over ``n_base`` random base
    points and all d axis directions; the slope stderr is the replicate spread.
    """
    seed = RngSeed(seed) if isinstance(seed, int) else seed
    seps = np.asarray(seps, dtype=int)
    rs = seps * lattice.dx
    devs = np.empty((n_reps, seps.size))
    rng = rng_for(seed.child(10**6))
    for i in range(n_reps):
        fg = synthesize_lgf(lattice, d, seed.child(i), pin=False)
        base = rng.integers(0, lattice.n, size=(n_base, d))
        hx = fg.values[tuple(base.T)]
        for j, s in enumerate(seps):
            acc = 0.0
            for ax in range(d):
                other = base.copy()
                other[:, ax] = (other[:, ax] + s) % lattice.n
                acc += np.mean(hx * fg.values[tuple(other.T)])
            devs[i, j] = acc / d + math.log(rs[j])
    lr = np.log(rs)
    slopes = np.array([np.polyfit(lr, row, 1)[0] for row in devs])
    mean_dev = devs.mean(axis=0)
    return ScalingFit(float(slopes.mean()), float(slopes.std(ddof=1) / math.sqrt(n_reps)),
                      float(np.polyfit(lr, mean_dev, 1)[1]), tuple(rs.tolist()), tuple(mean_dev.tolist()))


def coordinate_change_check(
    d: int,
    gamma: float,
    c: float,
    n_reps: int,
    seed: RngSeed | int,
    lattice: Lattice | None = None,
    a: float = 0.25,
    epsilon: float | None = None,
) -> CheckPair:
    """Compare mean mu(cA) with c^{d + gamma^2/2} * mean mu'(A), A = B(0, a).

    mu' is built from a field pinned at radius 1/c (the law of h(c.)) with
    regularisation eps; mu uses the field pinned at radius 1 with c*eps.
    Both ensembles share seed streams, so c = 1 gives identical numbers.
    """
    lattice = lattice or Lattice(64, 4.0)
    eps = epsilon or 2 * lattice.dx
    if not _inside(lattice, np.zeros(d), c * a) or c * eps > lattice.L / 4:
        raise DomainError("scaled geometry leaves the box")
    seed = RngSeed(seed) if isinstance(seed, int) else seed
    big, small = np.empty(n_reps), np.empty(n_reps)
    fac = c ** (d + gamma * gamma / 2)
    for i in range(n_reps):
        raw = synthesize_lgf(lattice, d, seed.child(i), pin=False)
        big[i] = ball_mass(gmc_measure(pin_field(raw, 1.0), gamma, c * eps), np.zeros(d), c * a)
        small[i] = fac * ball_mass(gmc_measure(pin_field(raw, 1.0 / c), gamma, eps), np.zeros(d), a)
    se = lambda v: float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return CheckPair(float(big.mean()), se(big), float(small.mean()), se(small))


def _shell_index(lat: Lattice, d: int) -> np.ndarray:
    r2 = np.zeros((lat.n,) * d)
    for ax in range(d):
        shape = [1] * d
        shape[ax] = lat.n
        r2 = r2 + (lat.coords**2).reshape(shape)
    return np.rint(np.sqrt(r2) / lat.dx).astype(np.int64)


def radial_project(fg: FieldGrid) -> tuple[FieldGrid, FieldGrid]:
    """Split into shell means around the origin and the residual (sums back to the input)."""
    if not fg.pinned:
        raise DomainError("radial projection expects a pinned field")
    shell = _shell_index(fg.lattice, fg.d).ravel()
    v = fg.values.ravel()
    sums = np.bincount(shell, weights=v)
    cnt = np.bincount(shell)
    means = np.divide(sums, cnt, out=np.zeros_like(sums), where=cnt > 0)
    radial = means[shell].reshape(fg.values.shape)
    resid = fg.values - radial
    mk = lambda vals: FieldGrid(fg.lattice, fg.d, vals, True, None, fg.seed, fg.pin_radius)
    return mk(radial), mk(resid)


# ---------------------------------------------------------------- snapshots

_MAGIC = b"LGFF"
_HDR = struct.Struct("<4sIIIdQQBBd")


def save_field(fg: FieldGrid, path) -> None:
    """Binary snapshot: fixed little-endian header, singularity centre, then row-major float64 values."""
    seed = fg.seed or RngSeed(0)
    sing = fg.singularity
    head = _HDR.pack(_MAGIC, 1, fg.d, fg.lattice.n, fg.lattice.L, seed.seed % (1 << 64), seed.stream_id % (1 << 64),
                     int(fg.pinned), int(sing is not None), sing[0] if sing else 0.0)
    center = np.asarray(sing[1] if sing else np.zeros(fg.d), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(center.tobytes())
        fh.write(np.ascontiguousarray(fg.values, dtype="<f8").tobytes(order="C"))


def load_field(path) -> FieldGrid:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, ver, d, n, L, s, sid, pinned, has_sing, beta = _HDR.unpack_from(raw, 0)
    if magic != _MAGIC or ver != 1:
        raise DomainError("not a field snapshot")
    off = _HDR.size
    center = np.frombuffer(raw, dtype="<f8", count=d, offset=off)
    off += 8 * d
    vals = np.frombuffer(raw, dtype="<f8", count=n**d, offset=off).reshape((n,) * d).copy()
    sing = (beta, tuple(center.tolist())) if has_sing else None
    return FieldGrid(Lattice(n, L), d, vals, bool(pinned), sing, RngSeed(s, sid))
