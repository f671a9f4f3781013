import math

import numpy as np
import pytest

from lgflab.errors import DomainError
from lgflab.gmc import (
    FieldGrid,
    Lattice,
    MeasureGrid,
    add_log_singularity,
    ball_mass,
    ball_mass_moments_exact,
    constant_field,
    coordinate_change_check,
    fit_scaling,
    gmc_measure,
    load_field,
    pin_field,
    potential,
    radial_project,
    regularize,
    rooted_second_moment,
    save_field,
    scaling_exponent,
    spherical_average,
    synthesize_lgf,
    thickness,
    zero_field,
)
from lgflab.sphavg import variance_increment
from lgflab.stochastic import RngSeed


def spectral_cov(lat, d, r):
    """Exact torus covariance Cov(h(x), h(x + r e_1)) of the synthesised field (unpinned)."""
    k1 = 2 * np.pi * np.fft.fftfreq(lat.n, lat.dx)
    grids = np.meshgrid(*([k1] * d), indexing="ij")
    k = np.sqrt(sum(g**2 for g in grids))
    const = 2.0 ** (d - 1) * math.pi ** (d / 2) * math.gamma(d / 2) / (2 * math.pi) ** d
    with np.errstate(divide="ignore"):
        S = const * k ** (-float(d))
    S.flat[0] = 0.0
    return float(np.sum(S * np.cos(grids[0] * r)) * (2 * np.pi / lat.L) ** d)


def test_lattice_validation():
    with pytest.raises(DomainError):
        Lattice(48, 4.0)
    lat = Lattice(64, 4.0)
    assert lat.dx == 1 / 16 and lat.coords[32] == 0.0


def test_zero_mode_and_pinning():
    lat = Lattice(128, 4.0)
    raw = synthesize_lgf(lat, 2, 1, pin=False)
    assert abs(np.fft.rfftn(raw.values).flat[0]) < 1e-8
    fg = pin_field(raw, 1.0)
    origin = (lat.n // 2,) * 2
    assert abs(regularize(fg, 1.0)[origin]) < 1e-12
    assert abs(spherical_average(fg, [0, 0], 1.0)) < 0.05
    with pytest.raises(DomainError):
        synthesize_lgf(Lattice(16, 2.0), 2, 0)


def test_empirical_covariance_matches_spectrum():
    lat = Lattice(64, 4.0)
    n = 300
    seps = (4, 8, 16)
    acc = np.zeros((n, len(seps)))
    for i in range(n):
        v = synthesize_lgf(lat, 2, RngSeed(2).child(i), pin=False).values
        for j, s in enumerate(seps):
            acc[i, j] = np.mean(v * np.roll(v, -s, axis=0))
    for j, s in enumerate(seps):
        ref = spectral_cov(lat, 2, s * lat.dx)
        se = acc[:, j].std(ddof=1) / math.sqrt(n)
        assert abs(acc[:, j].mean() - ref) < 3 * se


def test_exact_covariance_is_log_correlated():
    lat = Lattice(256, 4.0)
    dev = [spectral_cov(lat, 2, s * lat.dx) + math.log(s * lat.dx) for s in (4, 8, 16)]
    assert max(dev) - min(dev) < 0.02


def test_sphere_average_variance_d2():
    lat = Lattice(256, 4.0)
    n = 1000
    for t in (0.5, 1.0):
        vals = np.array([spherical_average(synthesize_lgf(lat, 2, RngSeed(3).child(i)), [0, 0], math.exp(-t))
                         for i in range(n)])
        v = variance_increment(t, 2)
        assert abs(vals.var() - v) < 3 * v * math.sqrt(2 / (n - 1))


def test_sphere_average_variance_d4_spectral():
    from lgflab.gmc import _kgrid, _spectral_density, _sphere_multiplier

    lat = Lattice(32, 4.0)
    k = _kgrid(lat, 4)
    w = np.full(k.shape, 2.0)
    w[..., 0] = 1.0
    w[..., -1] = 1.0
    S = _spectral_density(k, 4) * (2 * np.pi / lat.L) ** 4
    for t in (0.5, 1.0):
        diff = _sphere_multiplier(k * math.exp(-t), 4) - _sphere_multiplier(k, 4)
        assert float((w * S * diff**2).sum()) == pytest.approx(variance_increment(t, 4), rel=0.02)


def test_spherical_average_simple_fields():
    lat = Lattice(64, 4.0)
    assert spherical_average(constant_field(lat, 3, 2.5), [0, 0, 0], 0.5) == pytest.approx(2.5)
    a = np.array([0.3, -1.0, 0.7])
    X = np.meshgrid(*([lat.coords] * 3), indexing="ij")
    lin = FieldGrid(lat, 3, sum(a[i] * X[i] for i in range(3)))
    x = np.array([0.25, 0.0, -0.125])
    assert spherical_average(lin, x, 0.5) == pytest.approx(float(a @ x), abs=1e-10)
    sing = add_log_singularity(zero_field(lat, 3), 1.5)
    for r in (0.25, 0.5, 1.0):
        assert spherical_average(sing, [0, 0, 0], r) == pytest.approx(-1.5 * math.log(r), abs=0.05)
    with pytest.raises(DomainError):
        spherical_average(lin, [1.5, 0, 0], 0.5)
    with pytest.raises(DomainError):
        spherical_average(lin, [0, 0, 0], lat.dx)


def test_add_log_singularity():
    lat = Lattice(32, 4.0)
    fg = synthesize_lgf(lat, 3, 4)
    assert np.array_equal(add_log_singularity(fg, 0.0).values, fg.values)
    two = add_log_singularity(add_log_singularity(fg, 0.4), 0.7)
    one = add_log_singularity(fg, 1.1)
    assert np.allclose(two.values, one.values, atol=1e-13, rtol=0)
    assert two.singularity[0] == pytest.approx(1.1)
    z = add_log_singularity(zero_field(Lattice(64, 4.0), 3), 0.8)
    assert thickness(z, [0, 0, 0], [1.0, 0.5, 0.25, 0.125]) == pytest.approx(0.8, abs=0.05)
    with pytest.raises(DomainError):
        add_log_singularity(fg, 1.0, center=[0.01, 0, 0])


def test_gmc_measure_simple():
    lat = Lattice(32, 4.0)
    m = gmc_measure(zero_field(lat, 3), 1.2, 0.5)
    assert np.allclose(m.masses, 0.5 ** (1.2**2 / 2) * lat.dx**3)
    fg = synthesize_lgf(lat, 3, 5)
    tiny = gmc_measure(fg, 1e-6, 0.5)
    assert np.allclose(tiny.masses, lat.dx**3, rtol=1e-4)
    with pytest.raises(DomainError):
        gmc_measure(fg, 3.0, 0.5)
    with pytest.raises(DomainError):
        gmc_measure(fg, 1.0, lat.dx)


def test_gmc_cell_mean_is_lognormal_mean():
    lat = Lattice(32, 4.0)
    g, eps = 1.0, 0.5
    n = 400
    cell = (16 + 4, 16, 16)
    h = np.array([regularize(synthesize_lgf(lat, 3, RngSeed(6).child(i)), eps)[cell] for i in range(n)])
    masses = np.exp(g * h) * eps ** (g * g / 2) * lat.dx**3
    pred = eps ** (g * g / 2) * math.exp(g * g * h.var() / 2 + g * h.mean()) * lat.dx**3
    assert abs(masses.mean() - pred) < 3 * masses.std(ddof=1) / math.sqrt(n)


def test_ball_mass():
    lat = Lattice(32, 4.0)
    m = gmc_measure(zero_field(lat, 2), 1.0, 0.25)
    cell = m.masses[0, 0]
    assert ball_mass(m, [0.03, 0.0], lat.dx / 4) in (0.0, pytest.approx(cell))
    full = ball_mass(m, [0, 0], lat.half)
    X, Y = np.meshgrid(lat.coords, lat.coords, indexing="ij")
    count = int(np.sum(X**2 + Y**2 <= lat.half**2 * (1 + 1e-12)))
    assert full == pytest.approx(count * cell)
    fg = synthesize_lgf(lat, 2, 7)
    mm = gmc_measure(fg, 1.0, 0.25)
    vals = [ball_mass(mm, [0, 0], r) for r in (0.2, 0.4, 0.8, 1.6)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))
    with pytest.raises(DomainError):
        ball_mass(mm, [1.5, 0], 1.0)


def test_scaling_exponent_small_ensemble():
    lat = Lattice(256, 4.0)
    radii = [0.125, 0.25, 0.5]
    ens = {r: [gmc_measure(synthesize_lgf(lat, 2, RngSeed(8).child(i)), 1.0, r / 2) for i in range(60)] for r in radii}
    fit = scaling_exponent(ens, 1.0, radii)
    assert abs(fit.slope - 2.0) < max(0.1 * 2, 3 * fit.stderr)
    with pytest.raises(DomainError):
        fit_scaling(np.ones((4, 2)), [0.1, 0.2], 1.0)


def test_thickness():
    lat = Lattice(64, 4.0)
    eps = [1.0, 0.5, 0.25, 0.125]
    assert thickness(zero_field(lat, 2), [0, 0], eps) == pytest.approx(0.0, abs=1e-12)
    th = np.array([thickness(synthesize_lgf(lat, 2, RngSeed(9).child(i)), [0, 0], eps) for i in range(200)])
    assert abs(th.mean()) < 3 * th.std(ddof=1) / math.sqrt(th.size)
    with pytest.raises(DomainError):
        thickness(zero_field(lat, 2), [0, 0], [0.5, 0.25, lat.dx])


def test_potential():
    lat = Lattice(16, 4.0)
    masses = np.zeros((16,) * 3)
    masses[8 + 4, 8, 8] = 2.0
    m = MeasureGrid(lat, 3, masses, 1.0, 0.5)
    assert potential(m, [0, 0, 0], 1.5) == pytest.approx(2.0 / (4 * lat.dx))
    lat4 = Lattice(32, 4.0)
    uni = MeasureGrid(lat4, 4, np.full((32,) * 4, lat4.dx**4), 1.0, 0.5)
    R = 1.5
    assert potential(uni, np.zeros(4), R) == pytest.approx(math.pi**2 * R**2, rel=0.05)
    with pytest.raises(DomainError):
        potential(MeasureGrid(lat, 2, np.ones((16, 16)), 1.0, 0.5), [0, 0], 1.0)


def test_potential_bounded_in_subcritical_regime():
    lat = Lattice(32, 4.0)
    rng = np.random.default_rng(0)
    pts = rng.uniform(-0.5, 0.5, (100, 3))
    pts = np.round(pts / lat.dx) * lat.dx
    maxima = []
    for i in range(5):
        m = gmc_measure(synthesize_lgf(lat, 3, RngSeed(10).child(i)), 0.47, 2 * lat.dx)
        maxima.append(max(potential(m, x, 0.5) for x in pts))
    assert np.all(np.isfinite(maxima)) and max(maxima) < 20 * np.median(maxima)


def test_coordinate_change():
    lat = Lattice(32, 4.0)
    same = coordinate_change_check(3, 1.0, 1.0, 3, 11, lattice=lat)
    assert same.lhs == same.rhs
    flat = coordinate_change_check(3, 1e-4, 2.0, 3, 12, lattice=lat)
    X = np.meshgrid(*([lat.coords] * 3), indexing="ij")
    r2 = sum(x**2 for x in X)
    counts = [int(np.sum(r2 <= (rad * (1 + 1e-12)) ** 2)) for rad in (0.5, 0.25)]
    assert flat.lhs / flat.rhs == pytest.approx(counts[0] / (8 * counts[1]), rel=1e-3)
    chk = coordinate_change_check(3, 1.0, 2.0, 60, 13, lattice=Lattice(64, 4.0))
    assert chk.overlap(3.0)
    with pytest.raises(DomainError):
        coordinate_change_check(3, 1.0, 10.0, 2, 0, lattice=lat)


def test_radial_project():
    lat = Lattice(32, 4.0)
    X = np.meshgrid(*([lat.coords] * 3), indexing="ij")
    r = np.sqrt(sum(x**2 for x in X))
    radial_in = FieldGrid(lat, 3, np.cos(r), True)
    rad, res = radial_project(radial_in)
    # shells are dx wide and cos is 1-Lipschitz
    assert np.abs(res.values).max() <= lat.dx
    # the lattice holds -L/2 but not +L/2, so keep the odd field away from the faces
    odd = FieldGrid(lat, 3, np.where(r < 1.5, X[0] * np.exp(-r), 0.0), True)
    rad2, _ = radial_project(odd)
    assert np.abs(rad2.values).max() < 1e-12
    fg = synthesize_lgf(lat, 3, 14)
    a, b = radial_project(fg)
    assert np.abs(a.values + b.values - fg.values).max() <= 1e-12
    again, rest = radial_project(a)
    assert np.abs(again.values - a.values).max() <= 1e-12 and np.abs(rest.values).max() <= 1e-12
    with pytest.raises(DomainError):
        radial_project(synthesize_lgf(lat, 3, 14, pin=False))


def test_snapshot_roundtrip(tmp_path):
    lat = Lattice(16, 4.0)
    fg = add_log_singularity(synthesize_lgf(lat, 3, RngSeed(15, 2)), 0.5)
    p = tmp_path / "f.bin"
    save_field(fg, p)
    back = load_field(p)
    assert np.array_equal(back.values, fg.values)
    assert back.lattice == lat and back.d == 3 and back.pinned
    assert back.singularity[0] == 0.5 and back.seed == fg.seed


def test_exact_moments_brute_force():
    from lgflab.gmc import _pinned_kernels, _pinned_var

    lat, g, eps, r = Lattice(16, 4.0), 0.8, 0.5, 0.6
    first, second = ball_mass_moments_exact(lat, 3, g, eps, r)
    kee, ke1, k11 = _pinned_kernels(lat, 3, eps, 1.0)
    var = _pinned_var(lat, 3, eps, 1.0)
    X = np.meshgrid(*([lat.coords] * 3), indexing="ij")
    idx = np.argwhere(sum(x**2 for x in X) <= r * r * (1 + 1e-12))
    cell = eps ** (g * g / 2) * lat.dx**3
    e1 = sum(math.exp(g * g * var[tuple(x)] / 2) for x in idx) * cell
    e2 = 0.0
    for x in idx:
        for y in idx:
            cov = kee[tuple(y - x + 8)] - ke1[tuple(x)] - ke1[tuple(y)] + k11
            e2 += math.exp(g * g * (var[tuple(x)] + var[tuple(y)]) / 2 + g * g * cov)
    assert first == pytest.approx(e1, rel=1e-12)
    assert second == pytest.approx(e2 * cell**2, rel=1e-10)
    # gamma -> 0 reduces to Lebesgue counting
    f0, s0 = ball_mass_moments_exact(lat, 3, 1e-8, eps, r)
    assert f0 == pytest.approx(len(idx) * lat.dx**3) and s0 == pytest.approx(f0**2)
    with pytest.raises(DomainError):
        ball_mass_moments_exact(lat, 3, g, eps, 1.5)


def test_pinned_variance_matches_ensemble():
    from lgflab.gmc import _pinned_var

    lat, eps, n = Lattice(32, 4.0), 0.5, 1500
    vals = np.array([regularize(synthesize_lgf(lat, 3, RngSeed(20).child(i)), eps)[18, 16, 16] for i in range(n)])
    v = _pinned_var(lat, 3, eps, 1.0)[18, 16, 16]
    assert abs(vals.var() - v) < 3 * v * math.sqrt(2 / (n - 1))


def test_rooted_second_moment_unbiased():
    lat, g, r = Lattice(32, 4.0), 1.0, 0.5
    eps = r / 2
    n = 300
    est = np.array([rooted_second_moment(synthesize_lgf(lat, 3, RngSeed(21).child(i)), g, eps, r, RngSeed(22).child(i))
                    for i in range(n)])
    exact = ball_mass_moments_exact(lat, 3, g, eps, r)[1]
    assert abs(est.mean() - exact) < 3 * est.std(ddof=1) / math.sqrt(n)
    with pytest.raises(DomainError):
        rooted_second_moment(synthesize_lgf(lat, 3, 0, pin=False), g, eps, r, 0)
