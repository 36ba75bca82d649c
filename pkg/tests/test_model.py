import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from nmrprofile.errors import (IncompleteProfileError, InvalidArgumentError, LibraryValidationError,
                               ShiftDomainError)
from nmrprofile.model import (Cluster, Compound, PeakShape, Profile, SpectralLibrary, Spectrum,
                              eval_peak, make_grid, render_compound, render_mixture)
from nmrprofile.synth import demo_library, demo_mixture_spec, sample_profile


def test_eval_peak_examples():
    p = PeakShape(100.0, 2.0, 0.0004)
    assert eval_peak(2.0, p) == pytest.approx(100.0, rel=1e-12)
    assert eval_peak(2.01, p) == pytest.approx(50.0, rel=1e-9)
    # 0.04 / (0.0004 + 4 * 0.05**2)
    assert eval_peak(2.05, p) == pytest.approx(0.04 / 0.0104, rel=1e-12)
    assert eval_peak(2.05, p) == pytest.approx(3.8462, abs=1e-4)


def test_eval_peak_cluster_shift_moves_apex():
    p = PeakShape(3.0, 0.01, 1e-4)
    assert eval_peak(1.51, p, 1.5) == pytest.approx(3.0)
    assert eval_peak(1.5, p, 1.5) < 3.0


def test_eval_peak_rejects_nonfinite():
    p = PeakShape(1.0, 0.0, 1e-4)
    with pytest.raises(InvalidArgumentError):
        eval_peak(np.nan, p)
    with pytest.raises(InvalidArgumentError):
        eval_peak(1.0, p, np.inf)
    with pytest.raises(InvalidArgumentError):
        PeakShape(1.0, 0.0, -1.0)


@given(st.floats(0.01, 100), st.floats(-5, 5), st.floats(1e-6, 1e-2), st.floats(0, 0.5))
def test_eval_peak_symmetric(a, c, w, d):
    p = PeakShape(a, c, w)
    assert eval_peak(c + d, p) == pytest.approx(eval_peak(c - d, p), rel=1e-9)


@given(st.floats(1e-6, 1e-2))
def test_fwhm_is_sqrt_width(w):
    p = PeakShape(1.0, 0.0, w)
    fw = math.sqrt(w)
    # dense grid; the half-height crossing is found to a small fraction of the FWHM
    y = np.linspace(0, 2 * fw, 200001)
    h = eval_peak(y, p)
    above = y[h >= 0.5]
    measured = 2 * above.max()
    assert measured == pytest.approx(fw, abs=2 * (y[1] - y[0]) * 2)


def _one_peak_compound(amp=1.0, width=1e-4, center=3.0):
    return Compound("m", "M", (Cluster("a", (PeakShape(amp, 0.0, width),), center),))


def test_render_compound_examples():
    grid = make_grid(2.5, 3.5, 0.0002)
    comp = _one_peak_compound()
    zero = render_compound(comp, 0.0, {"a": 3.0}, grid)
    assert not zero.intensities.any()
    out = render_compound(comp, 50.0, {"a": 3.0}, grid)
    i = int(np.argmax(out.intensities))
    assert grid.ppm[i] == pytest.approx(3.0, abs=1e-9)
    assert out.intensities[i] == pytest.approx(50.0, rel=1e-12)
    unit = render_compound(comp, 1.0, {"a": 3.0}, grid)
    np.testing.assert_allclose(out.intensities, 50.0 * unit.intensities, rtol=1e-13)


def test_render_compound_errors():
    grid = make_grid(2.5, 3.5, 0.001)
    comp = _one_peak_compound()
    with pytest.raises(IncompleteProfileError):
        render_compound(comp, 1.0, {}, grid)
    with pytest.raises(ShiftDomainError):
        render_compound(comp, 1.0, {"a": 3.2}, grid)


def test_render_mixture_superposition_and_empty():
    lib = demo_library("mix15")
    grid = make_grid(-0.1, 9.0, 0.001)
    empty = render_mixture(lib, Profile({}, {}), grid)
    assert not empty.intensities.any()
    truth = sample_profile(lib, demo_mixture_spec(lib, seed=3)).profile
    total = render_mixture(lib, truth, grid).intensities
    parts = np.zeros(len(grid))
    for comp in lib.compounds[:2]:
        sub = Profile({comp.id: truth.concentrations[comp.id]}, truth.shifts)
        parts += render_mixture(lib, sub, grid).intensities
    two = Profile({c.id: truth.concentrations[c.id] for c in lib.compounds[:2]}, truth.shifts)
    np.testing.assert_allclose(render_mixture(lib, two, grid).intensities, parts, rtol=1e-12, atol=0)
    # linearity in the whole concentration vector
    alpha = 2.75
    scaled = Profile({k: alpha * v for k, v in truth.concentrations.items()}, truth.shifts)
    np.testing.assert_allclose(render_mixture(lib, scaled, grid).intensities, alpha * total,
                               rtol=1e-12, atol=1e-12)


def test_render_area_matches_quadrature_oracle():
    # each Lorentzian integrates to a * pi * sqrt(w) / 2 over the real line; on
    # a finite interval the closed form uses arctan. Oracle: scipy quad of the
    # peak formula written out independently.
    lib = demo_library("mix15")
    truth = sample_profile(lib, demo_mixture_spec(lib, seed=5)).profile
    comp = next(c for c in lib.compounds if truth.concentrations[c.id] > 0 and c.id != lib.reference_compound)
    x = truth.concentrations[comp.id]
    lo, hi = 0.0, 10.0
    step = 2e-5
    n = int(round((hi - lo) / step)) + 1
    grid = Spectrum(lo, step, np.zeros(n))
    only = Profile({comp.id: x}, truth.shifts)
    rendered = render_mixture(lib, only, grid).intensities
    # Simpson on the dense grid against adaptive quadrature of the raw formula
    numeric = integrate.simpson(rendered, dx=step)
    oracle = 0.0
    for cl in comp.clusters:
        s = truth.shifts[f"{comp.id}:{cl.id}"]
        for pk in cl.peaks:
            f = lambda y, a=pk.amplitude, c=pk.center + s, w=pk.width: a * w / (w + 4 * (c - y) ** 2)
            c0 = pk.center + s
            val, _ = integrate.quad(f, lo, hi, points=[c0], limit=500, epsabs=0, epsrel=1e-13)
            oracle += x * val
    assert numeric == pytest.approx(oracle, rel=1e-9)


def test_shift_equivariance_dense():
    cl = Cluster("a", (PeakShape(1.0, -0.01, 2e-5), PeakShape(0.7, 0.012, 1e-5)), 2.0)
    comp = Compound("m", "M", (cl,))
    step = 1e-4
    grid = make_grid(1.8, 2.2, step)
    d = 7 * step
    base = render_compound(comp, 4.0, {"a": 2.0}, grid).intensities
    moved = render_compound(comp, 4.0, {"a": 2.0 + d}, grid).intensities
    np.testing.assert_allclose(moved[7:], base[:-7], rtol=1e-9, atol=1e-12)
    # a sub-grid shift matches interpolation of the unshifted curve at y - d
    d2 = 0.37 * step
    moved2 = render_compound(comp, 4.0, {"a": 2.0 + d2}, grid).intensities
    fine = make_grid(1.8, 2.2, step / 100)
    ref = np.interp(grid.ppm - d2, fine.ppm, render_compound(comp, 4.0, {"a": 2.0}, fine).intensities)
    assert np.max(np.abs(moved2 - ref)) < 1e-3 * base.max()


def test_spectrum_validation():
    with pytest.raises(InvalidArgumentError):
        Spectrum(0.0, 0.0, np.zeros(5))
    with pytest.raises(InvalidArgumentError):
        Spectrum(0.0, 0.1, np.zeros(1))
    s = Spectrum(1.0, 0.5, np.arange(4.0))
    assert s.stop == 2.5
    assert s.index_range(1.5, 2.5) == (1, 3)


def test_library_invariants():
    cl = Cluster("a", (PeakShape(1.0, 0.0, 1e-4),), 3.0)
    with pytest.raises(LibraryValidationError):
        Compound("m", "M", ())
    with pytest.raises(LibraryValidationError):
        Compound("m", "M", (cl, cl))
    comp = Compound("m", "M", (cl,))
    with pytest.raises(LibraryValidationError):
        SpectralLibrary("x", (comp, comp), "m", 1.0)
    with pytest.raises(LibraryValidationError):
        SpectralLibrary("x", (comp,), "nope", 1.0)
    edge = Cluster("b", (PeakShape(1.0, 0.0, 1e-4),), 12.99, (12.9, 13.5))
    with pytest.raises(LibraryValidationError):
        SpectralLibrary("x", (Compound("e", "E", (edge,)),), "e", 1.0)
