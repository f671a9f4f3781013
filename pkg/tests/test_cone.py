import math

import numpy as np
import pytest
from scipy import stats

from lgflab.cone import (
    ConeSample,
    cone_field,
    convergence_diagnostic,
    energy_distance,
    first_passage,
    hitting_sigma,
    ks_against_reference,
    permutation_band,
    recenter,
    reference_d2,
    sample_cone,
    stopping_pair,
    stopping_tail,
    tilde_driver,
    tilde_process,
)
from lgflab.errors import ConvergenceError, DomainError
from lgflab.gmc import Lattice, add_log_singularity, spherical_average, thickness, zero_field
from lgflab.sphavg import RadialSample, simulate_repr, variance_increment
from lgflab.stochastic import Path


def _radial(times, values):
    v = np.asarray(values, dtype=float)
    return RadialSample(np.asarray(times, float), v, np.zeros(v.shape + (0,)), "test", {})


def test_first_passage_on_lines():
    t = np.linspace(0, 30, 3001)
    assert first_passage(t, np.zeros_like(t), 0.5, 4.0)[0] == pytest.approx(8.0)
    # S_t = t with drift 2: t - 2t <= -b at t = b
    assert first_passage(t, t, 2.0, 3.0)[0] == pytest.approx(3.0)
    assert np.isnan(first_passage(t, 10 * t, 1.0, 3.0)[0])
    assert first_passage(t, np.full_like(t, -5.0), 1.0, 1.0)[0] == -np.inf


def test_hitting_sigma_errors_and_batch():
    t = np.linspace(0, 10, 101)
    s = _radial(t, np.zeros((3, t.size)))
    assert np.allclose(hitting_sigma(s, 1.0, 2.0), 2.0)
    with pytest.raises(ConvergenceError):
        hitting_sigma(s, 1.0, 20.0)
    with pytest.raises(DomainError):
        hitting_sigma(s, 0.0, 1.0)
    with pytest.raises(DomainError):
        hitting_sigma(s, 1.0, -1.0)
    with pytest.raises(DomainError):
        hitting_sigma(_radial(t, np.full(t.size, -3.0)), 1.0, 1.0)


def test_hitting_sigma_monotone_in_b():
    grid = 0.02 * np.arange(5001)
    s = simulate_repr(grid, 4, seed=1, n_rep=40)
    sig = np.stack([hitting_sigma(s, 1.0, b) for b in (2.0, 5.0, 10.0, 20.0)])
    assert np.all(np.diff(sig, axis=0) > 0)


def test_recenter_examples():
    t = 0.01 * np.arange(-500, 1001)
    lin = recenter(_radial(t, 3 * t), 2.345, (-1, 2))
    assert np.allclose(lin.trajectory.s_values, 3 * lin.trajectory.times, atol=1e-12)
    s0 = lin.trajectory.times == 0.0
    assert s0.sum() == 1 and lin.trajectory.s_values[s0][0] == 0.0
    with pytest.raises(DomainError):
        recenter(_radial(t, t), 1.0, (0.5, 2))
    with pytest.raises(DomainError):
        recenter(_radial(t, t), 9.5, (-1, 2))
    g = np.concatenate([t[:10], t[10:] + 0.001])
    with pytest.raises(DomainError):
        recenter(_radial(g, g), 1.0, (-1, 1))


def test_recenter_composition():
    t = 0.01 * np.arange(-500, 1001)
    rng = np.random.default_rng(0)
    v = np.cumsum(rng.standard_normal(t.size)) * 0.1
    one = recenter(_radial(t, v), 2.0, (-2, 3))
    two = recenter(one.trajectory, 1.0, (-1, 1))
    ref = recenter(_radial(t, v), 3.0, (-1, 1))
    assert np.allclose(two.trajectory.s_values, ref.trajectory.s_values, atol=1e-12)


def test_sample_cone_d4_properties():
    a = 1.0
    cs = sample_cone(4, a, 5.0, (-3, 1), 300, 2, dt=0.01)
    S = cs.trajectory.s_values
    s = cs.trajectory.times
    assert S.shape == (300, s.size)
    assert np.all(S[:, s == 0.0] == 0.0)
    # before sigma_b the path stays above the drifted line
    assert np.all(S[:, s < 0] - a * s[s < 0] >= -1e-10)
    again = sample_cone(4, a, 5.0, (-3, 1), 300, 2, dt=0.01)
    assert np.array_equal(again.trajectory.s_values, S)
    with pytest.raises(DomainError):
        sample_cone(3, a, 5.0, (-3, 1), 10, 0)
    with pytest.raises(DomainError):
        sample_cone(4, -1.0, 5.0, (-3, 1), 10, 0)


def test_tilde_driver_structure():
    a = 1.5
    p = tilde_driver(a, 5.0, 4.0, 0.01, 2000, 3)
    B = p.values[..., 0]
    t = p.times
    assert np.all(B[:, t == 0.0] == 0.0)
    neg = t < 0
    assert np.all(B[:, neg] >= a * t[neg] - 1e-12)
    inc = B[:, -1] - B[:, p.origin_index]
    assert inc.var() == pytest.approx(4.0, rel=0.1)
    # conditioned side: |W_u + a u e1| - a u with W a 3-d BM
    u = 1.0
    col = np.flatnonzero(np.isclose(t, -u))[0]
    rng = np.random.default_rng(1)
    W = rng.standard_normal((200000, 3))
    W[:, 0] += a
    exact = np.linalg.norm(W, axis=1).mean() - a
    assert abs(B[:, col].mean() - exact) < 3 * B[:, col].std() / math.sqrt(2000)
    with pytest.raises(DomainError):
        tilde_driver(a, 1, 1, 0.01, 5, 0, method="nope")


def test_tilde_process_zero_and_derivative():
    t = 0.01 * np.arange(-2000, 3001)
    z = Path(t, np.zeros((t.size, 1)), origin_index=2000)
    out = tilde_process(z, 4)
    assert np.all(out.s_values == 0.0) and out.times[0] == pytest.approx(-5.0)
    p = tilde_driver(1.0, 20.0, 30.0, 0.01, 20, 4)
    ts = tilde_process(p, 4)
    S, D = ts.s_values, ts.deriv_values[..., 0]
    h = ts.times[1] - ts.times[0]
    integ = np.concatenate([np.zeros((20, 1)), np.cumsum(0.5 * (D[:, 1:] + D[:, :-1]) * h, axis=1)], axis=1)
    assert np.abs((S - S[:, :1]) - integ).max() < 0.05
    with pytest.raises(DomainError):
        tilde_process(p, 4, t_min=-10.0)
    with pytest.raises(DomainError):
        tilde_process(p, 2)


def test_tilde_free_side_variance():
    n = 4000
    p = tilde_driver(1.0, 16.0, 21.0, 0.01, n, 5)
    ts = tilde_process(p, 4)
    j0, j1 = (np.flatnonzero(np.isclose(ts.times, x))[0] for x in (20.0, 21.0))
    inc = ts.s_values[:, j1] - ts.s_values[:, j0]
    v = variance_increment(1.0, 4)
    assert abs(inc.var() - v) < 3 * v * math.sqrt(2 / (n - 1))


def test_stopping_pair_zero_paths():
    t = 0.01 * np.arange(-2000, 6001)
    z = Path(t, np.zeros((t.size, 1)), origin_index=2000)
    tau, sig = stopping_pair(z, tilde_process(z, 4), 2.0, 10.0)
    assert tau == pytest.approx(5.0) and sig == pytest.approx(5.0)
    short = Path(t[:2100], np.zeros((2100, 1)), origin_index=2000)
    with pytest.raises(ConvergenceError):
        stopping_pair(short, tilde_process(short, 4), 2.0, 10.0)


def test_stopping_tail_bounded_across_b():
    p = tilde_driver(1.0, 16.0, 60.0, 0.01, 400, 6)
    ts = tilde_process(p, 4)
    lam = [0.0, 0.5, 1.0, 2.0, 4.0]
    q = []
    for b in (5.0, 10.0, 20.0):
        tau, sig = stopping_pair(p, ts, 1.0, b)
        tail = stopping_tail(tau, sig, lam)
        assert tail[0] == 1.0 and np.all(np.diff(tail) <= 0)
        q.append(np.quantile(np.abs(sig - tau), 0.9))
    assert max(q) <= 1.5 * min(q)


def _abs_normal_mean(m, s):
    return s * math.sqrt(2 / math.pi) * math.exp(-m * m / (2 * s * s)) + m * (1 - 2 * stats.norm.cdf(-m / s))


def test_energy_distance():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((10000, 1))
    assert energy_distance(X, X) == pytest.approx(0.0, abs=1e-12)
    mu = 0.7
    Y = rng.standard_normal((10000, 1)) + mu
    exact = 2 * _abs_normal_mean(mu, math.sqrt(2)) - 2 * _abs_normal_mean(0, math.sqrt(2))
    assert energy_distance(X, Y) == pytest.approx(exact, abs=0.03)
    Z = rng.standard_normal((500, 1))
    band = permutation_band(X[:500], Z, n_perm=49, seed=1)
    assert energy_distance(X[:500], Z) < band < energy_distance(X[:500], Y[:500])


def test_cone_d2_matches_reference():
    a, probes = 2.5, [-2.0, -1.0, 1.0, 2.0]
    cs = sample_cone(2, a, 20.0, (-2, 2), 2000, 7, dt=0.01)
    ref = reference_d2(a, probes, 4000, 8, dt=0.01)
    p = ks_against_reference(cs, ref, probes)
    assert min(p) > 0.001
    with pytest.raises(DomainError):
        ks_against_reference(cs, ref, [0.005])


def test_convergence_diagnostic_d4_decreases():
    res = convergence_diagnostic([5.0, 10.0, 20.0], (-8, 2), [-8, -4, -2, -1, 1, 2], 1000, 9, d=4,
                                 q_minus_beta=1.0, dt=0.02)
    D = np.asarray(res["distance"])
    assert np.allclose(np.diag(D), 0.0) and np.allclose(D, D.T)
    assert D[0, 1] > D[1, 2]
    with pytest.raises(DomainError):
        convergence_diagnostic([5.0], (-1, 1), [1.0], 10, 0)


def _flat_cone(s, values, beta=0.0):
    return ConeSample(1.0, 0.0, _radial(s, values), beta)


def test_cone_field_pure_log():
    lat = Lattice(32, 4.0)
    s = 0.05 * np.arange(-30, 101)
    zero = cone_field(_flat_cone(s, np.zeros(s.size)), None, 0.0, lat, 3)
    assert np.all(zero.values == 0.0) and zero.pinned
    beta = 0.8
    cf = cone_field(_flat_cone(s, np.zeros(s.size)), None, beta, lat, 3)
    ref = add_log_singularity(zero_field(lat, 3), beta)
    assert np.allclose(cf.values, ref.values, atol=1e-12)
    assert thickness(cf, [0, 0, 0], [1.0, 0.5, 0.25]) == pytest.approx(
        thickness(ref, [0, 0, 0], [1.0, 0.5, 0.25]), abs=1e-12)
    with pytest.raises(DomainError):
        cone_field(_flat_cone(s[30:], np.zeros(s.size - 30)), None, beta, lat, 3)
    coarse = np.linspace(-1, 5, 6)
    with pytest.raises(DomainError):
        cone_field(_flat_cone(coarse, np.zeros(6)), None, beta, lat, 3)
    with pytest.raises(DomainError):
        cone_field(_flat_cone(s, np.zeros(s.size)), None, beta)


def test_cone_field_radial_average():
    lat = Lattice(64, 4.0)
    cs = sample_cone(4, 1.0, 10.0, (-1.5, 4), 1, 10, dt=0.01)
    single = ConeSample(cs.b, float(np.atleast_1d(cs.sigma_b)[0]),
                        _radial(cs.trajectory.times, cs.trajectory.s_values[0]), 0.5)
    beta = 0.5
    fg = cone_field(single, None, beta, lat, 3)
    s, S = single.trajectory.times, single.trajectory.s_values
    for r in (0.25, 0.5, 1.0):
        near = (s >= -math.log(r + lat.dx)) & (s <= -math.log(r - lat.dx))
        band = S[near] + beta * s[near]
        avg = spherical_average(fg, [0, 0, 0], r)
        assert band.min() - 1e-9 <= avg <= band.max() + 1e-9
