import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nmrprofile.model import (Cluster, Compound, PeakShape, Profile, SpectralLibrary, make_grid,
                              render_mixture)
from nmrprofile.partition import (bound_concentration, build_factor_graph, compute_bounds,
                                  compute_intervals, conc_var, diagnostics, influence_interval,
                                  partition_regions, shift_var, single_peak_interval)
from nmrprofile.preprocess import NoiseEstimate, detect_baseline
from nmrprofile.synth import demo_library, demo_mixture_spec, generate_spectrum, sample_profile


def _single(width=1e-4, amp=2.0, center=3.0, window=None):
    return Cluster("a", (PeakShape(amp, 0.0, width),), center, window)


def _lib(*clusters_per_compound):
    comps = []
    for i, cls in enumerate(clusters_per_compound):
        comps.append(Compound(f"m{i}", f"M{i}", tuple(cls)))
    return SpectralLibrary("t", comps, comps[0].id, 1.0)


# --------------------------------------------------------------------- bounds


def test_flat_spectrum_bound():
    g = make_grid(2.0, 4.0, 0.001)
    spec = g.with_intensities(np.full(len(g), 10.0))
    # a one-point window pins the apex on a grid sample
    pinned = _single(amp=2.0, window=(3.0, 3.0))
    assert bound_concentration(spec, pinned, NoiseEstimate.constant(0.0, len(g))) == pytest.approx(5.0, rel=1e-12)
    # free shifts may put the apex between samples, where the sampled signature
    # tops out at 2 w / (w + h^2)
    free = bound_concentration(spec, _single(amp=2.0), NoiseEstimate.constant(0.0, len(g)))
    assert free == pytest.approx(10.0 / (2.0 * 1e-4 / (1e-4 + 1e-6)), rel=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_bound_self_consistency(seed):
    rng = np.random.default_rng(seed)
    peaks = tuple(PeakShape(rng.uniform(0.2, 1.0), off, rng.uniform(0.5e-6, 3e-6))
                  for off in np.sort(rng.uniform(-0.02, 0.02, 3)))
    cl = Cluster("a", peaks, 3.0)
    lib = _lib([cl])
    c = rng.uniform(5, 500)
    shift = 3.0 + rng.uniform(-0.02, 0.02)
    g = make_grid(2.5, 3.5, 0.0002)
    spec = render_mixture(lib, Profile({"m0": c}, {"m0:a": shift}), g)
    b = bound_concentration(spec, cl, NoiseEstimate.constant(0.0, len(g)))
    assert b == pytest.approx(c, rel=1e-6)


def test_bound_window_outside_spectrum():
    from nmrprofile.errors import ShiftDomainError

    g = make_grid(0.0, 1.0, 0.001)
    with pytest.raises(ShiftDomainError):
        bound_concentration(g, _single(center=3.0), NoiseEstimate.constant(1.0, len(g)))


def test_bounds_are_minimum_over_clusters():
    a = _single(center=2.0, window=(2.0, 2.0))
    b = Cluster("b", (PeakShape(1.0, 0.0, 1e-4),), 5.0, (5.0, 5.0))
    lib = _lib([a, b])
    g = make_grid(1.0, 6.0, 0.001)
    y = np.where(g.ppm < 3.5, 10.0, 3.0)
    bounds = compute_bounds(g.with_intensities(y), lib, NoiseEstimate.constant(0.0, len(g)))
    assert bounds.per_cluster["m0:a"] == pytest.approx(5.0)
    assert bounds.per_cluster["m0:b"] == pytest.approx(3.0)
    assert bounds.per_compound["m0"] == pytest.approx(3.0)


# ----------------------------------------------------------------- intervals


def test_zero_bound_empty_interval():
    assert influence_interval(_single(), 0.0, NoiseEstimate.constant(1.0, 10)) is None


@settings(deadline=None, max_examples=40)
@given(st.floats(1e-7, 1e-4), st.floats(0.1, 10), st.floats(1.0, 1e4), st.floats(0.01, 5.0))
def test_single_peak_closed_form(width, amp, bound, sigma):
    cl = _single(width=width, amp=amp)
    step = 0.0002
    got = influence_interval(cl, bound, NoiseEstimate.constant(sigma, 10))
    # closed form: bound * a * w / (w + 4 d^2) = sigma / 5 solved for d, then widened by the window
    tau = sigma / 5
    if bound * amp < tau:
        assert got is None
        return
    d = math.sqrt((bound * amp * width / tau - width) / 4)
    lo, hi = cl.window
    assert got[0] == pytest.approx(lo - d, abs=step)
    assert got[1] == pytest.approx(hi + d, abs=step)
    assert single_peak_interval(cl, bound, sigma)[1] == pytest.approx(hi + d, abs=1e-12)


def test_influence_soundness_multi_peak():
    lib = demo_library("mix15")
    noise = NoiseEstimate.constant(0.05, 10)
    for key, comp, cl in list(lib.iter_clusters())[:10]:
        bound = 200.0
        lo, hi = influence_interval(cl, bound, noise)
        for shift in np.linspace(*cl.window, 7):
            y = np.concatenate([np.linspace(lo - 1.0, lo, 2000, endpoint=False),
                                np.linspace(hi, hi + 1.0, 2000)[1:]])
            assert np.all(bound * cl.signature(y, shift) < noise.sigma / 5 * (1 + 1e-9))


# ----------------------------------------------------------------- partition


def test_two_disjoint_intervals():
    lib = _lib([_single(center=3.0)], [_single(center=7.0)])
    ivs = {"m0:a": (2.0, 4.0), "m1:a": (6.0, 8.0)}
    regions = partition_regions(lib, ivs, (0.0, 10.0))
    assert [r.cluster_ids for r in regions] == [(), ("m0:a",), (), ("m1:a",), ()]
    assert [r.interval for r in regions][1] == (2.0, 4.0)


def test_overlapping_intervals():
    lib = _lib([_single(center=2.0)], [_single(center=3.0)])
    ivs = {"m0:a": (1.0, 3.0), "m1:a": (2.0, 4.0)}
    regions = [r for r in partition_regions(lib, ivs, (0.0, 5.0)) if not r.is_background]
    assert [(r.interval, r.cluster_ids) for r in regions] == [
        ((1.0, 2.0), ("m0:a",)),
        ((2.0, 3.0), ("m0:a", "m1:a")),
        ((3.0, 4.0), ("m1:a",)),
    ]


def _random_setup(seed, n_comp=6):
    rng = np.random.default_rng(seed)
    comps = []
    ivs = {}
    for i in range(n_comp):
        cls = []
        for k in range(rng.integers(1, 4)):
            c = float(rng.uniform(0.5, 9.5))
            cls.append(Cluster(f"k{k}", (PeakShape(1.0, 0.0, 1e-5),), c))
            if rng.random() < 0.9:
                half = rng.uniform(0.01, 1.0)
                ivs[f"m{i}:k{k}"] = (c - half, c + half)
            else:
                ivs[f"m{i}:k{k}"] = None
        comps.append(Compound(f"m{i}", f"M{i}", tuple(cls)))
    return SpectralLibrary("t", comps, "m0", 1.0), ivs


def _inside(iv, y):
    return iv is not None and iv[0] <= y < iv[1]


@pytest.mark.parametrize("seed", range(5))
def test_partition_exactness_random_points(seed):
    lib, ivs = _random_setup(seed)
    domain = (0.0, 10.0)
    exclusions = [(4.5, 4.9)]
    regions = partition_regions(lib, ivs, domain, exclusions)
    # disjoint, ordered and covering the unexcluded domain
    edges = [r.interval for r in regions]
    for (a0, b0), (a1, b1) in zip(edges[:-1], edges[1:]):
        assert b0 <= a1
    covered = sum(b - a for a, b in edges)
    assert covered == pytest.approx(10.0 - 0.4, abs=1e-9)
    rng = np.random.default_rng(seed + 100)
    for y in rng.uniform(*domain, 10_000):
        if 4.5 <= y < 4.9:
            assert not any(r.contains(y) for r in regions)
            continue
        hits = [r for r in regions if r.contains(y)]
        assert len(hits) == 1
        want = {k for k, iv in ivs.items() if _inside(iv, y)}
        assert set(hits[0].cluster_ids) == want


# -------------------------------------------------------------- factor graph


def test_single_region_graph():
    lib = _lib([_single(center=3.0)])
    regions = partition_regions(lib, {"m0:a": (2.0, 4.0)}, (2.0, 4.0))
    bounds = compute_bounds(make_grid(2.0, 4.0, 0.001).with_intensities(np.ones(2001)), lib,
                            NoiseEstimate.constant(0.0, 2001))
    graph = build_factor_graph(regions, lib, bounds)
    assert len(graph.factors) == 1
    assert len(graph.variables) == 2
    assert graph.n_edges == 2


@pytest.mark.parametrize("seed", range(4))
def test_adjacency_matches_brute_force(seed):
    lib, ivs = _random_setup(seed, n_comp=8)
    regions = partition_regions(lib, ivs, (0.0, 10.0))
    bounds = type("B", (), {"per_compound": {c.id: 1.0 for c in lib.compounds},
                            "to_list": lambda self: []})()
    graph = build_factor_graph(regions, lib, bounds)
    ys = np.linspace(0.0, 10.0, 20001)
    # brute force: a factor touches a variable iff some grid point of its region
    # lies inside an interval of that variable's cluster (or of its compound's clusters)
    for f in graph.factors:
        a, b = f.region.interval
        pts = ys[(ys >= a) & (ys < b)]
        if pts.size == 0:
            pts = np.array([a])
        want = set()
        for key, comp, cl in lib.iter_clusters():
            if any(_inside(ivs[key], y) for y in pts[:: max(1, pts.size // 50)]):
                want.add(shift_var(key))
                want.add(conc_var(comp.id))
        assert set(f.variables) == want
    # degree of a shift variable = number of regions containing its cluster
    for key, _, _ in lib.iter_clusters():
        k = sum(key in r.cluster_ids for r in regions)
        assert graph.degree(shift_var(key)) == k


def test_csf_scale_region_count():
    lib = demo_library("csf48")
    truth = sample_profile(lib, demo_mixture_spec(lib, seed=0))
    spec = generate_spectrum(lib, truth)
    noise = detect_baseline(spec)
    bounds = compute_bounds(spec, lib, noise)
    intervals = compute_intervals(lib, bounds, noise, (spec.start, spec.stop))
    regions = partition_regions(lib, intervals, (spec.start, spec.stop))
    graph = build_factor_graph(regions, lib, bounds)
    n = len(graph.factors)
    assert 175 <= n <= 700  # of order 350
    mult = [len(f.region.cluster_ids) for f in graph.factors]
    assert min(mult) >= 1 and max(mult) <= 25
    doc = diagnostics(graph, spec, noise)
    assert doc["nFactors"] == n
    assert len(doc["bounds"]) == len(lib.compounds)
