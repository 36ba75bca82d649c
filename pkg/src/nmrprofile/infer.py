"""Annealed particle search for the most probable profile on the factor graph.

Every variable carries ``N`` particles. One iteration pairs the n-th particle
of every variable into a joint assignment, scores each factor on its region
with only that region's clusters, weights each variable's particles by the
product of its factors' Boltzmann values, and resamples each variable from a
weighted Gaussian kernel density estimate. Temperature falls geometrically,
so the per-variable distributions sharpen around the loss minimum.

Shift particles live on a lattice of ``lattice_substeps`` positions per grid
step so cluster signatures can be read from precomputed tables.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import lsq_linear, minimize_scalar

from . import _kernels
from .errors import InvalidArgumentError, TemperatureTooLowError
from .loss import LossConfig, density_coefficients, loss_density, loss_total
from .metrics import detection_thresholds
from .model import Profile, SpectralLibrary, Spectrum, cluster_key
from .partition import FactorGraph, conc_var, shift_var

log = logging.getLogger(__name__)

#: purposes of the per-variable random streams
_INIT, _SHUFFLE, _RESAMPLE = 0, 1, 2
_MODE_BINS = 512
#: polish ranges reach this many line widths beyond a cluster's window
_POLISH_REACH_FWHM = 50.0


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class InferConfig:
    """Settings of the particle search.

    ``convergence_tol`` is relative to each variable's domain width. Polish
    settings control the final local refinement on the exact loss.
    """

    n_particles: int = 10000
    max_iterations: int = 60
    convergence_tol: float = 0.01
    kernel: str = "gaussian"
    bandwidth_rule: str = "silverman"
    use_importance_weights: bool = False
    seed: int = 0
    elitism: bool = True
    polish: bool = True
    polish_sweeps: int = 2
    lattice_substeps: int = 16
    chunk: int = 64
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.n_particles < 100:
            raise InvalidArgumentError("need at least 100 particles")
        if not (self.convergence_tol > 0):
            raise InvalidArgumentError("convergence tolerance must be positive")
        if self.max_iterations < 0:
            raise InvalidArgumentError("max iterations must be >= 0")
        if self.kernel != "gaussian":
            raise InvalidArgumentError("only the Gaussian kernel is supported")
        if self.bandwidth_rule != "silverman":
            raise InvalidArgumentError("only the silverman bandwidth rule is supported")
        if self.lattice_substeps < 1:
            raise InvalidArgumentError("lattice substeps must be >= 1")

    def to_dict(self) -> dict:
        return {
            "N": self.n_particles, "maxIterations": self.max_iterations,
            "convergenceTol": self.convergence_tol, "kernel": self.kernel,
            "bandwidthRule": self.bandwidth_rule,
            "useImportanceWeights": self.use_importance_weights, "seed": self.seed,
            "elitism": self.elitism, "polish": self.polish, "polishSweeps": self.polish_sweeps,
            "latticeSubsteps": self.lattice_substeps, "loss": self.loss.to_dict(),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "InferConfig":
        d = cls()
        return cls(
            n_particles=int(doc.get("N", d.n_particles)),
            max_iterations=int(doc.get("maxIterations", d.max_iterations)),
            convergence_tol=float(doc.get("convergenceTol", d.convergence_tol)),
            kernel=doc.get("kernel", d.kernel),
            bandwidth_rule=doc.get("bandwidthRule", d.bandwidth_rule),
            use_importance_weights=bool(doc.get("useImportanceWeights", d.use_importance_weights)),
            seed=int(doc.get("seed", d.seed)),
            elitism=bool(doc.get("elitism", d.elitism)),
            polish=bool(doc.get("polish", d.polish)),
            polish_sweeps=int(doc.get("polishSweeps", d.polish_sweeps)),
            lattice_substeps=int(doc.get("latticeSubsteps", d.lattice_substeps)),
            loss=LossConfig.from_dict(doc.get("loss", {})),
        )


@dataclass(frozen=True)
class AnnealSchedule:
    """Geometric cooling ``T(t) = max(T0 * decay**t, Tmin)``."""

    T0: float
    decay: float = 0.7
    Tmin: float = None

    def __post_init__(self):
        if self.Tmin is None:
            object.__setattr__(self, "Tmin", 1e-6 * self.T0)
        if not (self.T0 > self.Tmin > 0):
            raise InvalidArgumentError("schedule needs T0 > Tmin > 0")
        if not (0 < self.decay < 1):
            raise InvalidArgumentError("decay must lie in (0, 1)")

    def temperature(self, t: int) -> float:
        return max(self.T0 * self.decay ** t, self.Tmin)

    def to_dict(self) -> dict:
        return {"T0": self.T0, "decay": self.decay, "Tmin": self.Tmin}


# --------------------------------------------------------------- particles


@dataclass(eq=False)
class ParticleSet:
    """Particle values and weights per variable (rows follow ``variable_ids``)."""

    variable_ids: tuple
    values: np.ndarray
    weights: np.ndarray
    t: int = 0
    log_proposal: np.ndarray = None
    bandwidths: np.ndarray = None

    def __getitem__(self, vid: str):
        i = self.variable_ids.index(vid)
        return self.values[i], self.weights[i]

    @property
    def n(self) -> int:
        return self.values.shape[1]


def _rng(seed: int, t: int, v: int, purpose: int) -> np.random.Generator:
    """Independent stream per (iteration, variable, purpose), whatever the execution order."""
    return np.random.default_rng(np.random.SeedSequence(int(seed) & (2 ** 64 - 1),
                                                        spawn_key=(t, v, purpose)))


# ---------------------------------------------------------------- problem


class Problem:
    """Factor graph compiled into flat arrays for the particle kernel."""

    def __init__(self, graph: FactorGraph, observed: Spectrum, library: SpectralLibrary = None,
                 config: InferConfig = InferConfig()):
        library = library if library is not None else graph.library
        if library is None:
            raise InvalidArgumentError("factor graph carries no library; pass one explicitly")
        self.graph, self.library, self.config = graph, library, config
        obs = observed.real()
        self.observed = obs
        n = len(obs)
        self.n_points = n
        self.h = obs.step
        self.start = obs.start
        s = np.where(obs.included, np.asarray(obs.intensities, dtype=float), 0.0)
        self.s = s
        self.K = density_coefficients(obs, config.loss)
        self.density0 = loss_density(obs, obs.zeros(), config.loss)

        var_ids = [v.id for v in graph.variables]
        self.var_ids = tuple(var_ids)
        self.var_index = {vid: i for i, vid in enumerate(var_ids)}
        self.lo = np.array([v.lo for v in graph.variables])
        self.hi = np.array([v.hi for v in graph.variables])
        self.is_shift = np.array([v.kind == "shift" for v in graph.variables])
        deg = np.array([graph.degree(v.id) for v in graph.variables])
        self.active = (deg > 0) & (self.hi > self.lo)
        self.dq = self.h / config.lattice_substeps
        self.S = config.lattice_substeps

        # frozen values for variables that never move
        self.fixed = np.zeros(len(var_ids))
        self.nominal = {}
        for key, comp, cl in library.iter_clusters():
            self.nominal[key] = cl.nominal_center
        for i, v in enumerate(graph.variables):
            if v.kind == "shift":
                nominal = min(max(self.nominal[v.target], v.lo), v.hi)
                self.fixed[i] = self._snap(i, nominal)
            else:
                self.fixed[i] = 0.0

        self.compounds = list(library.compounds)
        self.conc_rows = np.array([self.var_index[conc_var(c.id)] for c in self.compounds], dtype=np.int64)
        # concentration row owning each shift variable (-1 for concentrations)
        self.owner = np.full(len(var_ids), -1, dtype=np.int64)
        for comp in self.compounds:
            for cl in comp.clusters:
                self.owner[self.var_index[shift_var(cluster_key(comp.id, cl.id))]] = \
                    self.var_index[conc_var(comp.id)]
        comp_pos = {c.id: j for j, c in enumerate(self.compounds)}

        # factor ranges on the padded grid
        factors = graph.factors
        f_lo, f_hi = [], []
        for f in factors:
            a, b = obs.index_range(*f.region.interval)
            f_lo.append(a + 2)
            f_hi.append(b + 2)
        self.f_lo = np.array(f_lo, dtype=np.int64)
        self.f_hi = np.array(f_hi, dtype=np.int64)

        # tabulated clusters: those touching at least one factor
        by_key = {key: (comp, cl) for key, comp, cl in library.iter_clusters()}
        table_keys = []
        for f in factors:
            for key in f.region.cluster_ids:
                if key not in table_keys:
                    table_keys.append(key)
        table_pos = {k: j for j, k in enumerate(table_keys)}
        ptr, idx = [0], []
        for f in factors:
            idx.extend(table_pos[k] for k in f.region.cluster_ids)
            ptr.append(len(idx))
        self.f_ptr = np.array(ptr, dtype=np.int64)
        self.f_cl = np.array(idx, dtype=np.int64)
        self.table_keys = table_keys
        self.shift_rows = np.array([self.var_index[shift_var(k)] for k in table_keys], dtype=np.int64)
        self.cl_conc = np.array([comp_pos[by_key[k][0].id] for k in table_keys], dtype=np.int64)
        self._build_tables(table_keys, by_key)

        # incidence of variables on factors
        rows, cols = [], []
        for fi, f in enumerate(factors):
            for vid in f.variables:
                rows.append(self.var_index[vid])
                cols.append(fi)
        self.B = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)),
                                   shape=(len(var_ids), len(factors)))
        # concentrations below these count as absent for the convergence test
        self.conc_floor = np.zeros(len(var_ids))
        self.background = 0.0
        self.zero_loss = 0.0
        for region in graph.regions:
            a, b = obs.index_range(*region.interval)
            part = float(np.sum(self.density0[a:b]))
            self.zero_loss += part
            if region.is_background:
                self.background += part

    def _snap(self, i: int, value: float) -> float:
        q = math.floor((self.hi[i] - self.lo[i]) / self.dq + 1e-9)
        k = min(max(int(round((value - self.lo[i]) / self.dq)), 0), q)
        # lo + k dq can overshoot hi by an ulp
        return min(self.lo[i] + k * self.dq, self.hi[i])

    def _build_tables(self, keys, by_key):
        S, h, dq = self.S, self.h, self.dq
        cl_off, cl_rowlen, cl_jbase, self.cl_Q = [], [], [], []
        chunks = []
        total = 0
        for j, key in enumerate(keys):
            comp, cl = by_key[key]
            fis = [fi for fi in range(len(self.f_lo)) if key in self.graph.factors[fi].region.cluster_ids]
            i_lo = min(self.f_lo[fi] for fi in fis) - 2
            i_hi = max(self.f_hi[fi] for fi in fis) + 2
            lo, hi = cl.window
            Q = int(math.floor((hi - lo) / dq + 1e-9))
            qi_max = Q // S
            rowlen = int(i_hi - i_lo + qi_max)
            jbase = int(i_lo - qi_max)
            # padded index g sits at ppm start + (g - 2) h
            jj = jbase + np.arange(rowlen)
            table = np.empty((S, rowlen))
            for p in range(S):
                y = self.start + (jj - 2) * h
                d = (cl.offsets[:, None] + lo + p * dq) - y[None, :]
                table[p] = np.sum(cl.amplitudes[:, None] * cl.widths[:, None]
                                  / (cl.widths[:, None] + 4.0 * d * d), axis=0)
            chunks.append(table.ravel())
            cl_off.append(total)
            cl_rowlen.append(rowlen)
            cl_jbase.append(jbase)
            self.cl_Q.append(Q)
            total += table.size
        self.tables = np.concatenate(chunks) if chunks else np.zeros(1)
        self.cl_off = np.array(cl_off, dtype=np.int64)
        self.cl_rowlen = np.array(cl_rowlen, dtype=np.int64)
        self.cl_jbase = np.array(cl_jbase, dtype=np.int64)
        self.cl_Q = np.array(self.cl_Q, dtype=np.int64)
        self.s_pad = np.concatenate([[0.0, 0.0], self.s, [0.0, 0.0]])
        self.K_pad = np.ascontiguousarray(np.pad(self.K, ((0, 0), (2, 2))))

    @property
    def n_vars(self) -> int:
        return len(self.var_ids)

    @property
    def n_factors(self) -> int:
        return len(self.f_lo)

    def lattice_index(self, values: np.ndarray) -> np.ndarray:
        """Lattice indices of the tabulated clusters' shift particles."""
        rows = values[self.shift_rows]
        lo = self.lo[self.shift_rows][:, None]
        q = np.rint((rows - lo) / self.dq).astype(np.int64)
        return np.clip(q, 0, self.cl_Q[:, None])

    def factor_losses(self, values: np.ndarray) -> np.ndarray:
        """Loss of every factor (rows) for every joint particle (columns)."""
        n = values.shape[1]
        out = np.empty((self.n_factors, n))
        if self.n_factors == 0:
            return out
        conc = np.ascontiguousarray(values[self.conc_rows])
        q = np.ascontiguousarray(self.lattice_index(values))
        _kernels.factor_losses(self.s_pad, self.K_pad, self.f_lo, self.f_hi, self.f_ptr, self.f_cl,
                               self.cl_conc, self.cl_off, self.cl_rowlen, self.cl_jbase, self.S,
                               self.tables, conc, q, out, self.config.chunk)
        return out

    def bandwidth_floor(self) -> np.ndarray:
        return np.where(self.is_shift, self.h, 1e-3 * (self.hi - self.lo))

    def default_schedule(self) -> AnnealSchedule:
        """``T0`` = loss of the all-zero profile per region."""
        n_regions = max(len(self.graph.regions), 1)
        T0 = self.zero_loss / n_regions
        if not (T0 > 0):
            T0 = 1.0
        return AnnealSchedule(T0)


# ------------------------------------------------------------- particles ops


def init_particles(graph: FactorGraph, config: InferConfig = InferConfig(), problem: Problem = None,
                   observed: Spectrum = None) -> ParticleSet:
    """``N`` uniform draws per variable; frozen variables hold their single value."""
    N = config.n_particles
    V = len(graph.variables)
    values = np.empty((V, N))
    dq = None
    if problem is not None:
        dq = problem.dq
    elif observed is not None:
        dq = observed.step / config.lattice_substeps
    for i, v in enumerate(graph.variables):
        lo, hi = v.lo, v.hi
        if problem is not None and not problem.active[i]:
            values[i] = problem.fixed[i]
            continue
        if not hi > lo:
            values[i] = lo
            continue
        x = _rng(config.seed, 0, i, _INIT).uniform(lo, hi, N)
        if v.kind == "shift" and dq is not None:
            q = math.floor((hi - lo) / dq + 1e-9)
            x = np.minimum(lo + np.clip(np.rint((x - lo) / dq), 0, q) * dq, hi)
        values[i] = x
    weights = np.full((V, N), 1.0 / N)
    return ParticleSet(tuple(v.id for v in graph.variables), values, weights, 0)


def _binned_density(x, w, lo, hi, bw, bins=_MODE_BINS):
    """Gaussian KDE of weighted samples evaluated on ``bins`` cells of ``[lo, hi]``."""
    edges = np.linspace(lo, hi, bins + 1)
    hist, _ = np.histogram(x, bins=edges, weights=w)
    width = (hi - lo) / bins
    dens = gaussian_filter1d(hist, max(bw / width, 1e-3), mode="reflect") / width
    centres = 0.5 * (edges[:-1] + edges[1:])
    return centres, dens


@dataclass
class StepInfo:
    totals: np.ndarray
    paired: np.ndarray
    kde_std: np.ndarray
    bandwidth: np.ndarray
    converged: bool
    temperature: float
    tracked: np.ndarray = None


def _step(pb: Problem, ps: ParticleSet, T: float, cfg: InferConfig, elite=None):
    if not (T > 0):
        raise InvalidArgumentError("temperature must be positive")
    V, N = ps.values.shape
    t = ps.t
    vals = np.empty_like(ps.values)
    logq = None
    use_iw = cfg.use_importance_weights and ps.log_proposal is not None
    if use_iw:
        logq = np.zeros_like(ps.values)
    for v in range(V):
        if not pb.active[v]:
            vals[v] = ps.values[v]
            continue
        # sort first so the pairing does not depend on the incoming order
        # equal values are interchangeable, so an unstable sort is still deterministic
        order = np.argsort(ps.values[v])
        idx = order[_rng(cfg.seed, t, v, _SHUFFLE).permutation(N)]
        vals[v] = ps.values[v][idx]
        if use_iw:
            logq[v] = ps.log_proposal[v][idx]
    if elite is not None:
        vals[:, 0] = elite
        if use_iw:
            logq[:, 0] = _elite_log_proposal(pb, ps, elite)
    L = pb.factor_losses(vals)
    logw = -np.asarray(pb.B @ L) / T
    totals = L.sum(axis=0) + pb.background
    if use_iw:
        logw = logw - logq

    floor = pb.bandwidth_floor()
    new_vals = vals.copy()
    stds = np.zeros(V)
    bws = np.zeros(V)
    resolved = np.zeros(V, dtype=bool)
    new_logq = np.zeros_like(vals) if cfg.use_importance_weights else None
    grids = []
    for v in range(V):
        if not pb.active[v]:
            grids.append(None)
            continue
        lw = logw[v]
        m = float(np.max(lw))
        if not math.isfinite(m):
            raise TemperatureTooLowError(
                f"all particle weights vanished at T={T:g}; raise the initial temperature"
            )
        w = np.exp(lw - m)
        w /= w.sum()
        x = vals[v]
        mean = float(w @ x)
        var = float(w @ (x - mean) ** 2)
        n_eff = 1.0 / float(w @ w)
        bw = max(1.06 * math.sqrt(var) * n_eff ** -0.2, floor[v])
        rng = _rng(cfg.seed, t, v, _RESAMPLE)
        # multinomial resampling; sorted uniforms come from normalized exponential
        # spacings so the inverse-CDF lookup walks the table once
        cdf = np.cumsum(w)
        e = np.cumsum(rng.standard_exponential(N + 1))
        u = e[:-1] * (cdf[-1] / e[-1])
        pick = np.minimum(np.searchsorted(cdf, u, side="right"), N - 1)
        y = x[pick] + bw * rng.standard_normal(N)
        y = np.clip(y, pb.lo[v], pb.hi[v])
        if pb.is_shift[v]:
            qmax = math.floor((pb.hi[v] - pb.lo[v]) / pb.dq + 1e-9)
            y = np.minimum(pb.lo[v] + np.clip(np.rint((y - pb.lo[v]) / pb.dq), 0, qmax) * pb.dq, pb.hi[v])
        new_vals[v] = y
        stds[v] = math.sqrt(var + bw * bw)
        bws[v] = bw
        resolved[v] = math.sqrt(var) <= floor[v]
        if new_logq is not None:
            centres, dens = _binned_density(x, w, pb.lo[v], pb.hi[v], bw)
            new_logq[v] = np.log(np.maximum(np.interp(y, centres, dens), 1e-300))
            grids.append((centres, dens))
        else:
            grids.append(None)
    width = pb.hi - pb.lo
    # a population narrower than the bandwidth floor cannot sharpen further
    settled = (stds < cfg.convergence_tol * width) | resolved
    # a concentration confidently below its detection floor is decided absent;
    # at the temperature floor it keeps a sub-threshold spread that need not shrink
    absent = ~pb.is_shift & pb.active & (new_vals.mean(axis=1) + 3.0 * stds < pb.conc_floor)
    settled |= absent
    tracked = _tracked(pb, new_vals, settled)
    conv = bool(np.all(settled[tracked]))
    new = ParticleSet(ps.variable_ids, new_vals, np.full((V, N), 1.0 / N), t + 1,
                      new_logq, bws)
    new._grids = grids
    return new, StepInfo(totals, vals, stds, bws, conv, T, tracked)


def _tracked(pb: Problem, values: np.ndarray, settled: np.ndarray) -> np.ndarray:
    """Variables that take part in the convergence test.

    Besides frozen variables, a shift is left out once its compound's
    concentration has settled below the detection threshold: the shift then
    barely affects the loss and its particles only diffuse.
    """
    tracked = pb.active.copy()
    for v in np.flatnonzero(pb.active & pb.is_shift):
        c = pb.owner[v]
        if pb.active[c] and settled[c] and float(np.mean(values[c])) < pb.conc_floor[c]:
            tracked[v] = False
    return tracked


def _elite_log_proposal(pb, ps, elite):
    out = np.zeros(len(elite))
    grids = getattr(ps, "_grids", None)
    if grids is None:
        return out
    for v, g in enumerate(grids):
        if g is not None:
            out[v] = math.log(max(float(np.interp(elite[v], g[0], g[1])), 1e-300))
    return out


def iterate(particles: ParticleSet, graph: FactorGraph, observed: Spectrum, T: float,
            config: InferConfig = InferConfig(), problem: Problem = None, elite=None) -> ParticleSet:
    """One pairing / scoring / weighting / resampling pass at temperature ``T``."""
    pb = problem if problem is not None else Problem(graph, observed, graph.library, config)
    new, _ = _step(pb, particles, T, config, elite)
    return new


# ---------------------------------------------------------------- polish


class _ExactFit:
    """Full-resolution reconstruction with cheap single-variable updates."""

    def __init__(self, pb: Problem):
        self.pb = pb
        obs = pb.observed
        self.y = obs.ppm
        self.n = len(obs)
        self.inc = obs.included
        self.s = pb.s
        self.K = pb.K
        self.clusters = []  # (key, compound index, cluster, var index, lo index, hi index)
        for j, comp in enumerate(pb.compounds):
            for cl in comp.clusters:
                key = cluster_key(comp.id, cl.id)
                reach = _POLISH_REACH_FWHM * float(np.sqrt(cl.widths.max()))
                off_lo, off_hi = cl.span()
                a, b = obs.index_range(cl.window[0] + off_lo - reach, cl.window[1] + off_hi + reach)
                b = min(b + 1, self.n)
                self.clusters.append((key, j, cl, pb.var_index[shift_var(key)], a, b))
        self.by_comp = {}
        for ci, entry in enumerate(self.clusters):
            self.by_comp.setdefault(entry[1], []).append(ci)

    def signature(self, ci: int, shift: float) -> np.ndarray:
        _, _, cl, _, a, b = self.clusters[ci]
        return cl.signature(self.y[a:b], shift)

    def render(self, values: np.ndarray) -> np.ndarray:
        recon = np.zeros(self.n)
        for ci, (key, j, cl, sv, a, b) in enumerate(self.clusters):
            x = values[self.pb.conc_rows[j]]
            if x != 0.0:
                recon[a:b] += x * self.signature(ci, values[sv])
        return recon

    def _window(self, a: int, b: int):
        return max(a - 2, 0), min(b + 2, self.n)

    def local_loss(self, recon_piece: np.ndarray, a: int, b: int) -> float:
        """Loss owned by points ``[a, b)`` given the reconstruction on ``[a-2, b+2)``."""
        lo, hi = self._window(a, b)
        r = np.where(self.inc[lo:hi], self.s[lo:hi] - recon_piece, 0.0)
        m = hi - lo
        D = np.zeros((4, m))
        D[0] = r
        if m >= 3:
            D[1, 1:-1] = 0.5 * (r[2:] - r[:-2])
            D[2, 1:-1] = r[2:] - 2.0 * r[1:-1] + r[:-2]
        if m >= 5:
            D[3, 2:-2] = 0.5 * (r[4:] - 2.0 * r[3:-1] + 2.0 * r[1:-3] - r[:-4])
        Kp = self.K[:, lo:hi]
        own = slice(a - lo, a - lo + (b - a))
        # stencils at the slice edge see only local data; those points are owned by neighbours
        return float(np.sum(Kp[:, own] * D[:, own] ** 2))

    def sweep_shift(self, values, recon, ci, bracket):
        key, j, cl, sv, a, b = self.clusters[ci]
        x = values[self.pb.conc_rows[j]]
        if x == 0.0 or not self.pb.active[sv]:
            return
        lo, hi = self._window(a, b)
        base = recon[lo:hi] - x * self._padded_sig(ci, values[sv], lo, hi)

        def f(d):
            return self.local_loss(base + x * self._padded_sig(ci, d, lo, hi), a, b)

        current = f(values[sv])
        res = minimize_scalar(f, bounds=bracket, method="bounded", options={"xatol": 1e-7})
        if res.fun < current:
            values[sv] = float(res.x)
        recon[lo:hi] = base + x * self._padded_sig(ci, values[sv], lo, hi)

    def _padded_sig(self, ci, shift, lo, hi):
        _, _, cl, _, a, b = self.clusters[ci]
        out = np.zeros(hi - lo)
        out[a - lo: b - lo] = cl.signature(self.y[a:b], shift)
        return out

    def compound_profile(self, values, j):
        """Unit-concentration contribution of compound ``j`` and its index range."""
        cis = self.by_comp.get(j, [])
        a = min(self.clusters[ci][4] for ci in cis)
        b = max(self.clusters[ci][5] for ci in cis)
        g = np.zeros(b - a)
        for ci in cis:
            _, _, cl, sv, ca, cb = self.clusters[ci]
            g[ca - a: cb - a] += cl.signature(self.y[ca:cb], values[sv])
        return g, a, b

    def sweep_conc(self, values, recon, j, upper):
        row = self.pb.conc_rows[j]
        if not self.pb.active[row]:
            return
        g, a, b = self.compound_profile(values, j)
        lo, hi = self._window(a, b)
        gp = np.zeros(hi - lo)
        gp[a - lo: b - lo] = g
        x_old = values[row]
        r = np.where(self.inc[lo:hi], self.s[lo:hi] - recon[lo:hi], 0.0)
        gi = np.where(self.inc[lo:hi], gp, 0.0)
        Dr, Dg = _diffs(r), _diffs(gi)
        own = slice(a - lo, b - lo)
        Kp = self.K[:, lo:hi][:, own]
        num = float(np.sum(Kp * Dr[:, own] * Dg[:, own]))
        den = float(np.sum(Kp * Dg[:, own] ** 2))
        if den <= 0:
            return
        x_new = min(max(x_old + num / den, 0.0), upper)
        values[row] = x_new
        recon[lo:hi] += (x_new - x_old) * gp

    def joint_concentrations(self, values, uppers):
        """Bounded least squares for every free concentration at fixed shifts."""
        free = [j for j in range(len(self.pb.compounds))
                if self.pb.active[self.pb.conc_rows[j]] and j in self.by_comp]
        if not free:
            return
        n = self.n
        A = np.zeros((n, len(free)))
        for col, j in enumerate(free):
            g, a, b = self.compound_profile(values, j)
            A[a:b, col] = g
        fixed = np.zeros(n)
        for j in range(len(self.pb.compounds)):
            if j in free or j not in self.by_comp:
                continue
            x = values[self.pb.conc_rows[j]]
            if x != 0.0:
                g, a, b = self.compound_profile(values, j)
                fixed[a:b] += x * g
        inc = self.inc
        target = np.where(inc, self.s - fixed, 0.0)
        A[~inc] = 0.0
        G = np.zeros((len(free), len(free)))
        rhs = np.zeros(len(free))
        Dt = _diffs(target)
        for c in range(4):
            DA = _diff_cols(A, c)
            KDA = self.K[c][:, None] * DA
            G += DA.T @ KDA
            rhs += KDA.T @ Dt[c]
        scale = np.sqrt(np.maximum(np.diag(G), 1e-300))
        Gs = G / np.outer(scale, scale)
        bs = rhs / scale
        w, U = np.linalg.eigh(Gs)
        w = np.maximum(w, 1e-12 * max(w.max(), 1e-300))
        M = (U * np.sqrt(w)) @ U.T
        z = np.linalg.solve(M, bs)
        ub = np.array([uppers[j] for j in free]) * scale
        lb = np.zeros(len(free))
        fixed_cols = ub <= 0
        ub = np.where(fixed_cols, 1e-300, ub)
        res = lsq_linear(M, z, bounds=(lb, ub), method="bvls", tol=1e-12)
        x = res.x / scale
        for col, j in enumerate(free):
            values[self.pb.conc_rows[j]] = 0.0 if fixed_cols[col] else float(min(max(x[col], 0.0), uppers[j]))


def _diffs(r: np.ndarray) -> np.ndarray:
    m = r.size
    D = np.zeros((4, m))
    D[0] = r
    if m >= 3:
        D[1, 1:-1] = 0.5 * (r[2:] - r[:-2])
        D[2, 1:-1] = r[2:] - 2.0 * r[1:-1] + r[:-2]
    if m >= 5:
        D[3, 2:-2] = 0.5 * (r[4:] - 2.0 * r[3:-1] + 2.0 * r[1:-3] - r[:-4])
    return D


def _diff_cols(A: np.ndarray, c: int) -> np.ndarray:
    if c == 0:
        return A
    D = np.zeros_like(A)
    if c == 1:
        D[1:-1] = 0.5 * (A[2:] - A[:-2])
    elif c == 2:
        D[1:-1] = A[2:] - 2.0 * A[1:-1] + A[:-2]
    else:
        D[2:-2] = 0.5 * (A[4:] - 2.0 * A[3:-1] + 2.0 * A[1:-3] - A[:-4])
    return D


def polish(pb: Problem, values: np.ndarray, bandwidths: np.ndarray, sweeps: int = 2) -> np.ndarray:
    """Coordinate descent on the exact loss, then joint bounded least squares for concentrations.

    Shifts are searched within three bandwidths of their start (inside the
    window) by bounded golden-section/Brent search. A concentration enters
    the loss quadratically, so its coordinate step is the exact minimizer
    clipped to ``[0, bound]``.
    """
    fit = _ExactFit(pb)
    values = values.copy()
    uppers = {j: pb.hi[pb.conc_rows[j]] for j in range(len(pb.compounds))}
    recon = fit.render(values)
    for _ in range(sweeps):
        for j in range(len(pb.compounds)):
            if j not in fit.by_comp:
                continue
            fit.sweep_conc(values, recon, j, uppers[j])
            for ci in fit.by_comp[j]:
                sv = fit.clusters[ci][3]
                if not pb.active[sv]:
                    continue
                r = 3.0 * max(bandwidths[sv], pb.h)
                bracket = (max(pb.lo[sv], values[sv] - r), min(pb.hi[sv], values[sv] + r))
                if bracket[1] > bracket[0]:
                    fit.sweep_shift(values, recon, ci, bracket)
    fit.joint_concentrations(values, uppers)
    return values


# -------------------------------------------------------------- solution


@dataclass
class Solution:
    profile: Profile
    final_loss: float
    best_loss_trace: list
    converged: bool
    iterations: int
    diagnostics: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=dict)
    names: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    reference_scale: float = 1.0
    reference: str = None

    def to_dict(self) -> dict:
        p = self.profile
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "finalLoss": self.final_loss,
            "referenceCompound": self.reference,
            "referenceScale": self.reference_scale,
            "compounds": [
                {"id": cid, "name": self.names.get(cid, cid), "concentration_uM": x,
                 "detected": bool(p.detected.get(cid, False)),
                 "threshold_uM": self.thresholds.get(cid)}
                for cid, x in p.concentrations.items()
            ],
            "clusters": [{"id": k, "shift_ppm": v} for k, v in p.shifts.items()],
            "bestLossTrace": list(self.best_loss_trace),
            "warnings": list(self.warnings),
            "diagnostics": self.diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def from_dict(cls, doc: dict) -> "Solution":
        conc = {c["id"]: float(c["concentration_uM"]) for c in doc["compounds"]}
        det = {c["id"]: bool(c["detected"]) for c in doc["compounds"]}
        shifts = {c["id"]: float(c["shift_ppm"]) for c in doc["clusters"]}
        return cls(
            Profile(conc, shifts, det), float(doc["finalLoss"]), list(doc["bestLossTrace"]),
            bool(doc["converged"]), int(doc["iterations"]), doc.get("diagnostics", {}),
            {c["id"]: c.get("threshold_uM") for c in doc["compounds"]},
            {c["id"]: c.get("name", c["id"]) for c in doc["compounds"]},
            list(doc.get("warnings", [])), float(doc.get("referenceScale", 1.0)),
            doc.get("referenceCompound"),
        )

    @classmethod
    def load(cls, path) -> "Solution":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"{path}: malformed solution ({exc})") from exc


def _values_to_profile(pb: Problem, values: np.ndarray) -> Profile:
    conc = {c.id: float(values[pb.conc_rows[j]]) for j, c in enumerate(pb.compounds)}
    shifts = {}
    for key, comp, cl in pb.library.iter_clusters():
        shifts[key] = float(values[pb.var_index[shift_var(key)]])
    return Profile(conc, shifts)


def _modes(pb: Problem, ps: ParticleSet, bws: np.ndarray) -> np.ndarray:
    out = np.empty(pb.n_vars)
    for v in range(pb.n_vars):
        if not pb.active[v]:
            out[v] = pb.fixed[v]
            continue
        x = ps.values[v]
        bw = max(bws[v], pb.bandwidth_floor()[v])
        centres, dens = _binned_density(x, np.full(x.size, 1.0 / x.size), pb.lo[v], pb.hi[v], bw)
        k = int(np.argmax(dens))
        m = centres[k]
        if 0 < k < dens.size - 1:
            a, b, c = dens[k - 1], dens[k], dens[k + 1]
            den = a - 2 * b + c
            if den < 0:
                m += 0.5 * (a - c) / den * (centres[1] - centres[0])
        out[v] = min(max(m, pb.lo[v]), pb.hi[v])
    return out


def run_map(graph: FactorGraph, observed: Spectrum, library: SpectralLibrary = None,
            config: InferConfig = InferConfig(), schedule: AnnealSchedule = None,
            noise=None, problem: Problem = None, progress=None) -> Solution:
    """Anneal the particle populations and return the best profile found.

    The final profile is polished on the exact loss from both the kernel
    density modes and the elite joint particle; the lower-loss result wins.
    ``noise`` (estimate or sigma) sets the detection thresholds.
    """
    library = library if library is not None else graph.library
    pb = problem if problem is not None else Problem(graph, observed, library, config)
    schedule = schedule if schedule is not None else pb.default_schedule()
    thr = detection_thresholds(noise if noise is not None else 0.0, library)
    for j, comp in enumerate(pb.compounds):
        row = pb.conc_rows[j]
        pb.conc_floor[row] = max(thr[comp.id], config.convergence_tol * (pb.hi[row] - pb.lo[row]))
    ps = init_particles(graph, config, problem=pb)
    elite, elite_loss = None, math.inf
    trace = []
    converged = False
    iterations = 0
    info = None
    stds_hist = []
    bws = pb.bandwidth_floor().copy()
    if not pb.active.any():
        converged = True
    else:
        for t in range(config.max_iterations):
            T = schedule.temperature(t)
            ps, info = _step(pb, ps, T, config, elite if config.elitism else None)
            iterations = t + 1
            n_best = int(np.argmin(info.totals))
            best = float(info.totals[n_best])
            if config.elitism:
                if best < elite_loss:
                    elite_loss = best
                    elite = info.paired[:, n_best].copy()
                trace.append(elite_loss)
            else:
                if best < elite_loss:
                    elite_loss, elite = best, info.paired[:, n_best].copy()
                trace.append(best)
            bws = np.maximum(info.bandwidth, pb.bandwidth_floor())
            tr = info.tracked
            stds_hist.append(float(np.mean(info.kde_std[tr] / (pb.hi - pb.lo)[tr])) if tr.any() else 0.0)
            if progress is not None:
                progress(t, T, trace[-1])
            log.debug("iteration %d T=%.4g best=%.6g", t, T, trace[-1])
            if info.converged:
                converged = True
                break
    if pb.active.any():
        candidates = [_modes(pb, ps, bws)]
        if elite is not None:
            candidates.append(elite)
    else:
        candidates = [pb.fixed.copy()]
    best_values, best_loss = None, math.inf
    for cand in candidates:
        vals = polish(pb, cand, bws, config.polish_sweeps) if config.polish else cand
        prof = _values_to_profile(pb, vals)
        lv = loss_total(pb.observed, prof, library, graph.regions, config.loss)
        if lv < best_loss:
            best_values, best_loss = vals, lv
    profile = _values_to_profile(pb, best_values)
    detected = {cid: x >= thr[cid] for cid, x in profile.concentrations.items()}
    profile = Profile(profile.concentrations, profile.shifts, detected)
    diag = {
        "variables": [
            {"id": vid, "active": bool(pb.active[i]),
             "kdeStd": float(info.kde_std[i]) if info is not None else 0.0,
             "bandwidth": float(bws[i])}
            for i, vid in enumerate(pb.var_ids)
        ],
        "meanRelativeKdeStd": stds_hist,
        "temperature": schedule.to_dict(),
        "nFactors": pb.n_factors,
    }
    return Solution(profile, float(best_loss), trace, converged, iterations, diag,
                    dict(thr.thresholds), {c.id: c.name for c in library.compounds},
                    reference=library.reference_compound)


# ---------------------------------------------------------- absolute scale


def reference_scale(profile: Profile, library: SpectralLibrary):
    """Factor mapping fitted concentrations to uM, or ``None`` if the reference was not fitted."""
    fitted = float(profile.concentrations.get(library.reference_compound, 0.0))
    if not (fitted > 0):
        return None
    return library.reference_concentration / fitted


class ReferenceWarning(UserWarning):
    """The reference compound was not detected; concentrations stay unscaled."""


def absolute_quantify(profile: Profile, library: SpectralLibrary) -> Profile:
    """Scale concentrations so the reference compound reads its known concentration."""
    scale = reference_scale(profile, library)
    if scale is None:
        warnings.warn("reference compound not detected; concentrations left unscaled",
                      ReferenceWarning, stacklevel=2)
        return profile
    conc = {k: v * scale for k, v in profile.concentrations.items()}
    conc[library.reference_compound] = library.reference_concentration
    return Profile(conc, dict(profile.shifts), dict(profile.detected))
