import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from nmrprofile.errors import InvalidArgumentError
from nmrprofile.loss import (LossConfig, factor_value, log_factor_value, loss_density, loss_region,
                             loss_total)
from nmrprofile.model import Profile, Spectrum, make_grid, render_mixture
from nmrprofile.partition import partition_regions
from nmrprofile.preprocess import exclude_solvent
from nmrprofile.synth import demo_library, demo_mixture_spec, sample_profile


def _naive_loss(obs, rec, a, b, gammas, h, normalize=True):
    """Loop-based reference: trapezoid weights, central differences, stencil validity."""
    r = np.asarray(obs, float) - np.asarray(rec, float)
    n = r.size
    total = 0.0
    for i in range(a, b):
        w = h * (0.5 if i in (0, n - 1) else 1.0)
        terms = [r[i]]
        terms.append(0.5 * (r[i + 1] - r[i - 1]) if 1 <= i < n - 1 else None)
        terms.append(r[i + 1] - 2 * r[i] + r[i - 1] if 1 <= i < n - 1 else None)
        terms.append(0.5 * (r[i + 2] - 2 * r[i + 1] + 2 * r[i - 1] - r[i - 2]) if 2 <= i < n - 2 else None)
        for c, d in enumerate(terms):
            if d is None:
                continue
            scale = 1.0 if normalize else h ** (-2 * c)
            total += gammas[c] * scale * w * d * d
    return total


def test_identical_spectra_zero():
    s = Spectrum(0.0, 0.01, np.random.default_rng(0).normal(size=200))
    assert loss_region(s, s, (0.0, 2.0)) == 0.0


def test_constant_difference():
    h, d = 0.001, 0.3
    obs = Spectrum(0.0, h, np.full(3001, d))
    rec = obs.zeros()
    # interior points [1, 2) have full trapezoid weight: exactly 1000 points
    val = loss_region(obs, rec, (1.0 - h / 2, 2.0 - h / 2), LossConfig((1, 0, 0, 0)))
    assert val == pytest.approx(d * d * 1.0, rel=1e-12)


def test_matches_naive_loop_on_random_pair():
    rng = np.random.default_rng(7)
    n = 400
    obs = Spectrum(0.0, 0.01, rng.normal(size=n))
    rec = Spectrum(0.0, 0.01, rng.normal(size=n))
    g = (1.0, 0.1, 0.01, 0.001)
    for normalize in (True, False):
        cfg = LossConfig(g, normalize_by_step=normalize)
        got = loss_region(obs, rec, (0.0, 5.0), cfg)
        want = _naive_loss(obs.intensities, rec.intensities, 0, n, g, 0.01, normalize)
        assert got == pytest.approx(want, rel=1e-12)


def test_quadrature_oracle():
    # residual = random trig polynomial of whole periods on [0, 1); the oracle
    # integrates the analytic derivatives with adaptive quadrature
    rng = np.random.default_rng(11)
    h = 2e-5
    start = -0.01
    n = int(round(1.02 / h)) + 1
    y = start + h * np.arange(n)
    ks = 2 * np.pi * np.array([1.0, 2.0, 3.0])
    amp = rng.normal(size=3)
    ph = rng.uniform(0, 2 * np.pi, 3)

    def f(t, d=0):
        return sum(amp[j] * ks[j] ** d * np.cos(ks[j] * t + ph[j] + d * np.pi / 2) for j in range(3))

    offset = np.full(n, 2.0)
    obs = Spectrum(start, h, f(y) + offset)
    rec = Spectrum(start, h, offset)
    g = (1.0, 0.1, 0.01, 0.001)
    val = loss_region(obs, rec, (-h / 2, 1.0 - h / 2), LossConfig(g, normalize_by_step=False))
    oracle = sum(
        g[c] * integrate.quad(lambda t: f(t, c) ** 2, 0, 1, limit=200, epsabs=0, epsrel=1e-13)[0]
        for c in range(4)
    )
    assert val == pytest.approx(oracle, rel=1e-6)


def test_gamma_zero_only_is_sum_of_squares():
    rng = np.random.default_rng(3)
    obs = Spectrum(0.0, 0.5, rng.normal(size=50))
    rec = Spectrum(0.0, 0.5, rng.normal(size=50))
    r = obs.intensities - rec.intensities
    w = np.full(50, 0.5)
    w[[0, -1]] = 0.25
    assert loss_region(obs, rec, (0, 100), LossConfig((1, 0, 0, 0))) == pytest.approx(np.sum(w * r * r), rel=1e-13)


def test_grid_mismatch():
    a = Spectrum(0.0, 0.1, np.zeros(10))
    b = Spectrum(0.0, 0.2, np.zeros(10))
    with pytest.raises(InvalidArgumentError):
        loss_region(a, b, (0, 1))


@settings(deadline=None, max_examples=50)
@given(st.integers(0, 2**32 - 1), st.lists(st.floats(0.0, 1.0), min_size=0, max_size=12))
def test_decomposition_random_cuts(seed, cuts):
    rng = np.random.default_rng(seed)
    n = 301
    obs = Spectrum(2.0, 0.01, rng.normal(size=n))
    rec = Spectrum(2.0, 0.01, rng.normal(size=n))
    edges = sorted({2.0, math.nextafter(obs.stop, math.inf), *[2.0 + 3.0 * c for c in cuts]})
    parts = sum(loss_region(obs, rec, (a, b)) for a, b in zip(edges[:-1], edges[1:]))
    whole = float(np.sum(loss_density(obs, rec, LossConfig())))
    assert parts == pytest.approx(whole, rel=1e-9)


@pytest.fixture(scope="module")
def mix():
    lib = demo_library("mix15")
    grid = make_grid(-0.2, 9.0, 0.0005)
    truth = sample_profile(lib, demo_mixture_spec(lib, seed=2)).profile
    obs = render_mixture(lib, truth, grid)
    return lib, grid, truth, obs


def test_truth_on_own_render_is_zero(mix):
    lib, grid, truth, obs = mix
    assert loss_total(obs, truth, lib, [(grid.start, grid.stop + 1)]) <= 1e-12


def test_total_equals_single_region(mix):
    lib, grid, truth, obs = mix
    rng = np.random.default_rng(0)
    noisy = obs.with_intensities(obs.intensities + rng.normal(0, 0.01, len(obs)))
    bumped = Profile({k: v * 1.05 for k, v in truth.concentrations.items()}, truth.shifts)
    ivs = {k: (c - 0.3, c + 0.3) for k, c in truth.shifts.items()}
    regions = partition_regions(lib, ivs, (grid.start, grid.stop))
    split = loss_total(noisy, bumped, lib, regions)
    whole = loss_total(noisy, bumped, lib, [(grid.start, grid.stop + 1)])
    assert split == pytest.approx(whole, rel=1e-9)


def test_plus_ten_percent_increases_loss(mix):
    lib, grid, truth, obs = mix
    base = loss_total(obs, truth, lib, [(grid.start, grid.stop + 1)])
    for cid, x in truth.concentrations.items():
        if x <= 0:
            continue
        conc = dict(truth.concentrations)
        conc[cid] = 1.1 * x
        bumped = loss_total(obs, Profile(conc, truth.shifts), lib, [(grid.start, grid.stop + 1)])
        assert bumped > base


def test_solvent_edits_leave_loss_bit_identical(mix):
    lib, grid, truth, obs = mix
    ex = exclude_solvent(obs, (4.5, 4.9))
    a, b = ex.index_range(4.5, 4.9)
    vals = np.array(ex.intensities)
    vals[a:b] = np.random.default_rng(5).normal(0, 100, b - a)
    edited = ex.with_intensities(vals)
    prof = Profile({k: 0.9 * v for k, v in truth.concentrations.items()}, truth.shifts)
    region = [(grid.start, grid.stop + 1)]
    assert loss_total(ex, prof, lib, region) == loss_total(edited, prof, lib, region)


def test_factor_values():
    assert factor_value(0.0, 3.0) == 1.0
    assert factor_value(2.5, 2.5) == pytest.approx(math.exp(-1), rel=1e-15)
    assert factor_value(2.5, 2.5) == pytest.approx(0.367879, abs=1e-6)
    assert factor_value(2.0, 0.5) == pytest.approx(0.018316, abs=1e-6)
    assert log_factor_value(1e6, 1e-3) == -1e9
    with pytest.raises(InvalidArgumentError):
        factor_value(1.0, 0.0)


@given(st.floats(1e-3, 1e3), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_factor_value_increasing_in_temperature(loss, t1, dt):
    assert log_factor_value(loss, t1 + dt) > log_factor_value(loss, t1)
