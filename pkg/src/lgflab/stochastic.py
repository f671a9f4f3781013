"""Seeded Brownian sampling: plain, bridged, two-sided and conditioned paths."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError

__all__ = [
    "RngSeed",
    "Path",
    "rng_for",
    "make_grid",
    "sample_brownian",
    "sample_bridge",
    "sample_two_sided",
    "heat_kernel",
    "sample_conditioned_above_line",
]


@dataclass(frozen=True)
class RngSeed:
    """Seed plus stream id; distinct pairs give independent Philox streams."""

    seed: int
    stream_id: int = 0

    def child(self, k: int) -> "RngSeed":
        # Fold the child index into the stream id; the SeedSequence hash keeps streams apart.
        return RngSeed(self.seed, (self.stream_id * 1_000_003 + int(k) + 1) % (1 << 64))


def rng_for(seed: RngSeed | int) -> np.random.Generator:
    if isinstance(seed, (int, np.integer)):
        seed = RngSeed(int(seed))
    ss = np.random.SeedSequence([seed.seed % (1 << 64), seed.stream_id % (1 << 64)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass
class Path:
    """A discretised trajectory.

    ``values`` has shape ``(len(times), k)`` for one path or
    ``(n, len(times), k)`` for a batch of ``n`` paths on the same grid.
    """

    times: np.ndarray
    values: np.ndarray
    origin_index: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[-2] != self.times.shape[0]:
            raise ValueError("values and times lengths differ")

    @property
    def dim(self) -> int:
        return self.values.shape[-1]

    @property
    def is_batch(self) -> bool:
        return self.values.ndim == 3

    def at(self, t: float) -> np.ndarray:
        """Values at the grid time closest to ``t``."""
        i = int(np.argmin(np.abs(self.times - t)))
        return self.values[..., i, :]


def make_grid(t_end: float, dt: float, t_start: float = 0.0) -> np.ndarray:
    n = int(round((t_end - t_start) / dt))
    return t_start + dt * np.arange(n + 1)


def _check_grid(grid, start_zero: bool = True) -> np.ndarray:
    g = np.asarray(grid, dtype=float)
    if g.ndim != 1 or g.size == 0:
        raise DomainError("time grid must be a non-empty 1-d sequence")
    if g.size > 1 and np.any(np.diff(g) <= 0):
        raise DomainError("time grid must be strictly increasing")
    if start_zero and g[0] != 0.0:
        raise DomainError("time grid must start at 0")
    return g


def _bm_values(rng: np.random.Generator, dim: int, grid: np.ndarray, n: int | None) -> np.ndarray:
    dt = np.diff(grid)
    shape = (dt.size, dim) if n is None else (n, dt.size, dim)
    inc = rng.standard_normal(shape) * np.sqrt(dt)[:, None]
    out = np.zeros(shape[:-2] + (grid.size, dim))
    np.cumsum(inc, axis=-2, out=out[..., 1:, :])
    return out


def sample_brownian(dim: int, grid, seed: RngSeed | int, n_paths: int | None = None) -> Path:
    """Standard ``dim``-dimensional BM from 0 on ``grid``."""
    g = _check_grid(grid)
    return Path(g, _bm_values(rng_for(seed), dim, g, n_paths))


def sample_bridge(dim: int, t_end: float, x, y, grid, seed: RngSeed | int, n_paths: int | None = None) -> Path:
    """Brownian bridge from ``x`` at 0 to ``y`` at ``t_end``."""
    g = _check_grid(grid)
    if not np.isclose(g[-1], t_end, rtol=0, atol=1e-12 * max(1.0, t_end)):
        raise DomainError("bridge grid must cover [0, t_end]")
    x = np.broadcast_to(np.asarray(x, dtype=float), (dim,))
    y = np.broadcast_to(np.asarray(y, dtype=float), (dim,))
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DomainError("bridge endpoints must be finite")
    b = _bm_values(rng_for(seed), dim, g, n_paths)
    s = (g / t_end)[:, None]
    vals = b - s * (b[..., -1:, :] - (y - x)) + x
    vals[..., -1, :] = y
    return Path(g, vals)


def sample_two_sided(grid, seed: RngSeed | int, n_paths: int | None = None, dim: int = 1) -> Path:
    """Two independent BMs glued at time 0."""
    g = np.asarray(grid, dtype=float)
    _check_grid(g, start_zero=False)
    hits = np.flatnonzero(g == 0.0)
    if hits.size != 1:
        raise DomainError("two-sided grid must contain 0")
    i0 = int(hits[0])
    rng = rng_for(seed)
    right = _bm_values(rng, dim, g[i0:], n_paths)
    left = _bm_values(rng, dim, -g[: i0 + 1][::-1], n_paths)
    vals = np.concatenate([left[..., :0:-1, :], right], axis=-2)
    return Path(g, vals, origin_index=i0)


def heat_kernel(t, x, y, dim: int):
    """Gaussian transition density (2 pi t)^(-d/2) exp(-|x-y|^2 / 2t).

    ``x`` and ``y`` broadcast over leading axes; the last axis is space.
    """
    t = np.asarray(t, dtype=float)
    if np.any(t <= 0):
        raise DomainError("heat kernel needs t > 0")
    diff = np.asarray(x, dtype=float) - np.asarray(y, dtype=float)
    r2 = np.sum(np.atleast_1d(diff) ** 2, axis=-1) if dim > 1 or np.ndim(diff) > 0 else diff**2
    return (2 * np.pi * t) ** (-dim / 2) * np.exp(-r2 / (2 * t))


def sample_conditioned_above_line(
    slope: float,
    horizon: float,
    grid,
    seed: RngSeed | int,
    n_paths: int | None = None,
    batch: int = 4096,
    max_proposals: int = 50_000_000,
) -> Path:
    """1-d BM on ``[0, horizon]`` kept only if B_t > -slope*t at every grid time t > 0.

    Rejection on the grid. Proposals are grown block by block and dropped
    as soon as they violate the line, so rejected candidates are cheap.
    ``info['acceptance_rate']`` records accepted / proposed.
    """
    if horizon <= 0:
        raise DomainError("horizon must be positive")
    if slope <= 0:
        raise DomainError("slope must be positive")
    g = _check_grid(grid)
    if not np.isclose(g[-1], horizon):
        raise DomainError("grid must end at the horizon")
    want = 1 if n_paths is None else int(n_paths)
    rng = rng_for(seed)
    dt = np.diff(g)
    sq = np.sqrt(dt)
    line = -slope * g[1:]
    block = 64
    accepted: list[np.ndarray] = []
    n_acc = 0
    proposed = 0
    while n_acc < want:
        if proposed >= max_proposals:
            raise DomainError(f"acceptance too low: {n_acc} accepted of {proposed} proposals")
        m = batch
        proposed += m
        paths = np.empty((m, dt.size))
        alive = np.arange(m)
        level = np.zeros(m)
        j0 = 0
        while j0 < dt.size:
            j1 = min(j0 + block, dt.size)
            inc = rng.standard_normal((alive.size, j1 - j0)) * sq[j0:j1]
            seg = level[:, None] + np.cumsum(inc, axis=1)
            ok = np.all(seg > line[j0:j1], axis=1)
            paths[alive[ok], j0:j1] = seg[ok]
            alive = alive[ok]
            level = seg[ok, -1]
            if alive.size == 0:
                break
            j0 = j1
            block = min(block * 2, 4096)
        block = 64
        if alive.size:
            accepted.append(paths[alive])
            n_acc += alive.size
    out = np.concatenate(accepted)[:want]
    vals = np.zeros((want, g.size, 1))
    vals[:, 1:, 0] = out
    p = Path(g, vals if n_paths is not None else vals[0])
    p.info["acceptance_rate"] = n_acc / proposed
    p.info["proposals"] = proposed
    return p
