import math

import numpy as np
import pytest
from scipy import integrate, stats

from lgflab.errors import DomainError
from lgflab.stochastic import (
    Path,
    RngSeed,
    heat_kernel,
    make_grid,
    rng_for,
    sample_bridge,
    sample_brownian,
    sample_conditioned_above_line,
    sample_two_sided,
)


def test_seed_streams_are_reproducible_and_distinct():
    a = rng_for(RngSeed(5, 2)).standard_normal(4)
    b = rng_for(RngSeed(5, 2)).standard_normal(4)
    c = rng_for(RngSeed(5, 3)).standard_normal(4)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    s = RngSeed(9)
    assert s.child(0) != s.child(1)
    assert s.child(0) == RngSeed(9).child(0)


def test_single_point_grid():
    p = sample_brownian(3, [0.0], 1)
    assert p.values.shape == (1, 3)
    assert np.all(p.values == 0)


def test_non_monotone_grid_rejected():
    with pytest.raises(DomainError):
        sample_brownian(1, [0.0, 0.5, 0.4], 0)


def test_brownian_moments():
    g = make_grid(1.0, 0.5)
    p = sample_brownian(1, g, 3, n_paths=10_000)
    x5, x1 = p.values[:, 1, 0], p.values[:, 2, 0]
    n = x1.size
    assert abs(x1.var() - 1.0) < 3 * math.sqrt(2 / n)
    cov = np.mean(x5 * x1)
    se = np.std(x5 * x1) / math.sqrt(n)
    assert abs(cov - 0.5) < 3 * se


def test_bridge_endpoint_and_moments():
    g = make_grid(1.0, 0.05)
    p = sample_bridge(1, 1.0, [0.0], [0.0], g, 4, n_paths=10_000)
    assert np.all(p.values[:, -1, 0] == 0.0)
    mid = p.values[:, 10, 0]
    assert abs(mid.var() - 0.25) < 3 * 0.25 * math.sqrt(2 / mid.size)
    q = sample_bridge(3, 1.0, np.zeros(3), [1.0, 0, 0], g, 5, n_paths=10_000)
    m = q.values[:, 10, :].mean(axis=0)
    se = q.values[:, 10, :].std(axis=0) / math.sqrt(10_000)
    assert np.all(np.abs(m - [0.5, 0, 0]) < 3 * se)


def test_bridge_grid_must_cover():
    with pytest.raises(DomainError):
        sample_bridge(1, 2.0, [0.0], [0.0], make_grid(1.0, 0.1), 0)


def test_two_sided():
    g = np.round(np.arange(-2.0, 2.0001, 0.5), 12)
    p = sample_two_sided(g, 6, n_paths=10_000)
    assert np.all(p.values[:, p.origin_index] == 0)
    left, right = p.values[:, 2, 0], p.values[:, 6, 0]
    prod = left * right
    assert abs(prod.mean()) < 3 * prod.std() / math.sqrt(prod.size)
    far = p.values[:, 0, 0]
    assert abs(far.var() - 2.0) < 3 * 2.0 * math.sqrt(2 / far.size)
    with pytest.raises(DomainError):
        sample_two_sided([-1.0, -0.5, 0.5], 0)


def test_heat_kernel_values():
    assert heat_kernel(1.0, [0, 0], [0, 0], 2) == pytest.approx(1 / (2 * math.pi))
    assert heat_kernel(1.0, np.zeros(4), np.zeros(4), 4) == pytest.approx(1 / (4 * math.pi**2))
    tot, _ = integrate.dblquad(lambda y, x: heat_kernel(1.0, [0, 0], [x, y], 2), -10, 10, -10, 10)
    assert tot == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(DomainError):
        heat_kernel(0.0, 0.0, 0.0, 1)


def test_conditioned_paths_respect_line():
    g = make_grid(10.0, 1e-3)
    p = sample_conditioned_above_line(1.0, 10.0, g, 7, n_paths=20)
    assert p.info["acceptance_rate"] > 0
    v = p.values[..., 0]
    assert np.all(v[:, 1:] > -1.0 * g[1:])


def test_conditioning_vanishes_for_steep_lines():
    g = make_grid(1.0, 0.01)
    ks = []
    for slope in (1.0, 5.0, 20.0):
        p = sample_conditioned_above_line(slope, 1.0, g, 8, n_paths=4000)
        ks.append(stats.kstest(p.values[:, -1, 0], "norm").statistic)
    assert ks[0] > ks[1] > ks[2] or ks[2] < 0.03
    assert ks[2] < 0.03


def test_conditioned_increments_are_brownian_in_law():
    # away from the line, the law of a short increment is unaffected
    g = make_grid(3.0, 0.01)
    p = sample_conditioned_above_line(2.5, 3.0, g, 9, n_paths=5000)
    inc = p.values[:, 300, 0] - p.values[:, 200, 0]
    assert abs(inc.var() - 1.0) < 4 * math.sqrt(2 / inc.size)


def test_conditioned_bad_args():
    g = make_grid(1.0, 0.1)
    with pytest.raises(DomainError):
        sample_conditioned_above_line(1.0, 0.0, g, 0)
    with pytest.raises(DomainError):
        sample_conditioned_above_line(-1.0, 1.0, g, 0)


def test_path_at():
    p = Path([0.0, 1.0, 2.0], [[0.0], [1.0], [4.0]])
    assert p.at(1.1)[0] == 1.0
    assert not p.is_batch and p.dim == 1
