import math
import types

import numpy as np
import pytest

from nmrprofile.errors import InvalidArgumentError
from nmrprofile.infer import (AnnealSchedule, InferConfig, ParticleSet, Problem, ReferenceWarning,
                              Solution, absolute_quantify, init_particles, iterate, run_map)
from nmrprofile.loss import loss_region
from nmrprofile.model import (Cluster, Compound, PeakShape, Profile, SpectralLibrary, make_grid,
                              render_mixture)
from nmrprofile.partition import (ConcentrationBound, FactorGraph, Variable, build_factor_graph,
                                  conc_var, partition_regions)
from nmrprofile.pipeline import PreprocessConfig, profile

from synthetic import separated_library, small_problem


def _bare_graph(lo_hi):
    """Graph with free-standing variables only, for testing the particle initializer."""
    variables = tuple(Variable(vid, kind, target, lo, hi) for vid, kind, target, lo, hi in lo_hi)
    return FactorGraph(variables, (), ())


def test_init_uniform_draws():
    graph = _bare_graph([("shift:m:a", "shift", "m:a", 0.9130, 0.9380),
                         ("conc:m", "conc", "m", 0.0, 95.0)])
    cfg = InferConfig(n_particles=10_000, seed=12)
    ps = init_particles(graph, cfg)
    N = ps.n
    for (vals, w), (lo, hi) in zip((ps["shift:m:a"], ps["conc:m"]), ((0.9130, 0.9380), (0.0, 95.0))):
        assert np.all((vals >= lo) & (vals <= hi))
        sd = (hi - lo) / math.sqrt(12)
        assert abs(vals.mean() - 0.5 * (lo + hi)) <= 3 * sd / math.sqrt(N)
        assert np.allclose(w, 1.0 / N)
    again = init_particles(graph, cfg)
    assert np.array_equal(ps.values, again.values)


def test_zero_width_domain_is_fixed():
    graph = _bare_graph([("conc:m", "conc", "m", 0.0, 0.0), ("shift:m:a", "shift", "m:a", 2.0, 2.0)])
    ps = init_particles(graph, InferConfig(n_particles=100))
    assert np.all(ps.values[0] == 0.0) and np.all(ps.values[1] == 2.0)


def test_config_validation():
    with pytest.raises(InvalidArgumentError):
        InferConfig(n_particles=10)
    with pytest.raises(InvalidArgumentError):
        InferConfig(convergence_tol=0.0)
    with pytest.raises(InvalidArgumentError):
        AnnealSchedule(1.0, decay=1.0)
    s = AnnealSchedule(10.0, 0.5)
    assert s.temperature(0) == 10.0 and s.temperature(3) == 1.25
    assert s.temperature(100) == s.Tmin == pytest.approx(1e-5)
    cfg = InferConfig(n_particles=500, seed=7, use_importance_weights=True)
    assert InferConfig.from_dict(cfg.to_dict()) == cfg


@pytest.fixture(scope="module")
def problem():
    lib, spec, noise, graph = small_problem(sigma=0.3, seed=4)
    cfg = InferConfig(n_particles=2000, seed=5)
    return lib, spec, noise, graph, cfg, Problem(graph, spec, lib, cfg)


def test_kernel_matches_loss_region(problem):
    lib, spec, noise, graph, cfg, pb = problem
    ps = init_particles(graph, cfg, problem=pb)
    L = pb.factor_losses(ps.values[:, :25])
    for n in range(25):
        prof = Profile({"m": float(ps.values[pb.var_index["conc:m"], n])},
                       {"m:a": float(ps.values[pb.var_index["shift:m:a"], n])})
        recon = render_mixture(lib, prof, spec)
        for fi, f in enumerate(graph.factors):
            assert L[fi, n] == pytest.approx(loss_region(spec, recon, f.region.interval), rel=1e-9, abs=1e-12)


def test_iterate_permutation_invariant(problem):
    lib, spec, noise, graph, cfg, pb = problem
    ps = init_particles(graph, cfg, problem=pb)
    T = pb.default_schedule().T0
    a = iterate(ps, graph, spec, T, cfg, problem=pb)
    rng = np.random.default_rng(0)
    shuffled = np.stack([row[rng.permutation(ps.n)] for row in ps.values])
    b = iterate(ParticleSet(ps.variable_ids, shuffled, ps.weights, ps.t), graph, spec, T, cfg, problem=pb)
    assert np.array_equal(a.values, b.values)
    assert a.t == ps.t + 1


def test_infinite_temperature_keeps_distribution(problem):
    lib, spec, noise, graph, cfg, pb = problem
    ps = init_particles(graph, cfg, problem=pb)
    new = iterate(ps, graph, spec, 1e300, cfg, problem=pb)
    for v in range(pb.n_vars):
        old = ps.values[v]
        sd = old.std()
        # resampling plus kernel noise; the clamp at the domain edge adds a
        # small bias of order bandwidth^2 / width, well inside the tolerance
        assert abs(new.values[v].mean() - old.mean()) <= 3 * sd * math.sqrt(2) / math.sqrt(ps.n) + 1e-3 * sd


def test_temperature_must_be_positive(problem):
    lib, spec, noise, graph, cfg, pb = problem
    ps = init_particles(graph, cfg, problem=pb)
    with pytest.raises(InvalidArgumentError):
        iterate(ps, graph, spec, 0.0, cfg, problem=pb)


def test_one_iteration_moves_towards_truth():
    # shift pinned: one concentration variable and a single-peak region
    cl = Cluster("a", (PeakShape(1.0, 0.0, 4e-6),), 3.0, (3.0, 3.0))
    lib = SpectralLibrary("t", [Compound("m", "M", (cl,))], "m", 1.0)
    g = make_grid(2.9, 3.1, 0.0002)
    truth = 30.0
    spec = render_mixture(lib, Profile({"m": truth}, {"m:a": 3.0}), g)
    regions = partition_regions(lib, {"m:a": (2.95, 3.05)}, (g.start, g.stop))
    bound = ConcentrationBound({"m:a": 100.0}, {"m": 100.0})
    graph = build_factor_graph(regions, lib, bound)
    cfg = InferConfig(n_particles=20_000, seed=1)
    pb = Problem(graph, spec, lib, cfg)
    ps = init_particles(graph, cfg, problem=pb)
    T = pb.default_schedule().T0
    new = iterate(ps, graph, spec, T, cfg, problem=pb)
    row = pb.var_index["conc:m"]
    before = ps.values[row].mean()
    after = new.values[row].mean()
    assert abs(after - truth) < abs(before - truth)
    # 1-D grid-search posterior oracle of the Boltzmann factor with a uniform prior
    xs = np.linspace(0.0, 100.0, 20001)
    f = graph.factors[0]
    unit = render_mixture(lib, Profile({"m": 1.0}, {"m:a": 3.0}), g)
    a = loss_region(spec, spec.zeros(), f.region.interval)
    b = loss_region(spec.zeros(), unit, f.region.interval)
    c = loss_region(spec, unit, f.region.interval)
    # region loss is quadratic in x: a - (a + b - c) x + b x^2
    L = a - (a + b - c) * xs + b * xs * xs
    w = np.exp(-(L - L.min()) / T)
    post_mean = np.sum(w * xs) / np.sum(w)
    post_sd = math.sqrt(np.sum(w * (xs - post_mean) ** 2) / np.sum(w))
    assert abs(after - post_mean) <= 4 * post_sd / math.sqrt(200) + 0.02 * post_sd


def test_empty_library():
    g = make_grid(0.0, 1.0, 0.01)
    s = g.with_intensities(np.sin(np.arange(len(g))))
    lib = types.SimpleNamespace(compounds=(), iter_clusters=lambda: iter(()),
                                reference_compound=None, reference_concentration=1.0)
    regions = partition_regions(lib, {}, (g.start, g.stop))
    graph = build_factor_graph(regions, lib, ConcentrationBound({}, {}))
    sol = run_map(graph, s, lib, InferConfig(n_particles=100))
    assert sol.profile.concentrations == {} and sol.converged and sol.iterations == 0
    assert sol.final_loss == pytest.approx(loss_region(s, s.zeros(), (g.start, g.stop + 1)), rel=1e-12)


def test_single_compound_recovery():
    lib, spec, noise, graph = small_problem(conc=100.0, shift=3.0031, sigma=0.0)
    sol = run_map(graph, spec, lib, InferConfig(seed=2), noise=noise)
    assert sol.profile.concentrations["m"] == pytest.approx(100.0, rel=0.01)
    assert abs(sol.profile.shifts["m:a"] - 3.0031) <= spec.step
    assert np.all(np.diff(sol.best_loss_trace) <= 0)
    assert sol.profile.detected["m"]


def test_domain_containment_and_sharpening():
    lib, spec, noise, graph = small_problem(conc=60.0, shift=2.996, sigma=0.2, seed=8)
    cfg = InferConfig(n_particles=3000, seed=4)
    pb = Problem(graph, spec, lib, cfg)
    ps = init_particles(graph, cfg, problem=pb)
    sched = pb.default_schedule()
    for t in range(25):
        ps = iterate(ps, graph, spec, sched.temperature(t), cfg, problem=pb)
        assert np.all(ps.values >= pb.lo[:, None]) and np.all(ps.values <= pb.hi[:, None])
    sol = run_map(graph, spec, lib, cfg, noise=noise)
    hist = sol.diagnostics["meanRelativeKdeStd"]
    assert sol.converged
    tail = hist[-6:]
    assert all(b <= a for a, b in zip(tail[:-1], tail[1:]))
    for vid, v in zip(pb.var_ids, graph.variables):
        val = sol.profile.concentrations["m"] if vid == conc_var("m") else sol.profile.shifts["m:a"]
        assert v.lo <= val <= v.hi


def test_run_map_deterministic():
    lib, spec, noise, graph = small_problem(sigma=0.3, seed=2)
    cfg = InferConfig(n_particles=1000, seed=9)
    a = run_map(graph, spec, lib, cfg, noise=noise).to_json()
    b = run_map(graph, spec, lib, cfg, noise=noise).to_json()
    assert a == b


def test_solution_round_trip(tmp_path):
    lib, spec, noise, graph = small_problem(sigma=0.3, seed=2)
    sol = run_map(graph, spec, lib, InferConfig(n_particles=500, seed=1), noise=noise)
    sol.save(tmp_path / "s.json")
    again = Solution.load(tmp_path / "s.json")
    assert again.to_json() == sol.to_json()


def test_absolute_quantify_examples():
    lib = separated_library()
    conc = {c: 10.0 * (i + 1) for i, c in enumerate(lib.compound_ids)}
    conc["DSS"] = 100.0
    p = Profile(conc, {})
    assert absolute_quantify(p, lib).concentrations == conc
    doubled = dict(conc)
    doubled["DSS"] = 200.0
    halved = absolute_quantify(Profile(doubled, {}), lib).concentrations
    for cid in lib.metabolite_ids:
        assert halved[cid] == conc[cid] / 2
    assert halved["DSS"] == 100.0
    missing = dict(conc)
    missing["DSS"] = 0.0
    with pytest.warns(ReferenceWarning):
        out = absolute_quantify(Profile(missing, {}), lib)
    assert out.concentrations == missing


def test_arbitrary_unit_scale_recovered():
    lib = separated_library(n=6, seed=3)
    rng = np.random.default_rng(3)
    conc = {c: float(rng.uniform(20, 200)) for c in lib.metabolite_ids}
    conc["DSS"] = lib.reference_concentration
    shifts = {key: cl.nominal_center for key, _, cl in lib.iter_clusters()}
    g = make_grid(-0.5, 10.0, 0.0002)
    spec = render_mixture(lib, Profile({k: 3.7 * v for k, v in conc.items()}, shifts), g)
    res = profile(spec, lib, PreprocessConfig(solvent_region=None), InferConfig(n_particles=2000, seed=1))
    got = res.solution.profile.concentrations
    for cid in lib.metabolite_ids:
        assert got[cid] == pytest.approx(conc[cid], rel=0.02)
    assert res.solution.reference_scale == pytest.approx(1 / 3.7, rel=0.02)
