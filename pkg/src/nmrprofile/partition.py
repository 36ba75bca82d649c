"""Concentration bounds, influence intervals, region partition and factor graph.

A cluster at concentration ``x`` can only explain as much signal as the
observed spectrum holds, which caps ``x`` (the bound). Given that cap, the
cluster's Lorentzian tails drop below a fifth of the noise level outside a
finite interval (its influence interval). Sweeping over interval endpoints
splits the spectrum into regions that each see a fixed cluster set; every
region with at least one cluster becomes a factor of the model.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from . import _kernels
from .errors import InvalidArgumentError, ShiftDomainError
from .model import Cluster, SpectralLibrary, Spectrum, cluster_key

#: signature points below this fraction of the cluster apex are ignored by the bound
SUPPORT_FRACTION = 0.01
#: multiples of sigma added to the observed spectrum inside the bound
DEFAULT_NOISE_ALLOWANCE = 5.0
#: tails below sigma * INFLUENCE_FRACTION are treated as no influence
INFLUENCE_FRACTION = 0.2


# ------------------------------------------------------------------- bounds


@dataclass(frozen=True)
class ConcentrationBound:
    per_cluster: dict
    per_compound: dict

    def to_list(self) -> list:
        return [{"compound": cid, "bound_uM": b} for cid, b in self.per_compound.items()]


def _support_radius(cluster: Cluster, fraction: float) -> float:
    """Distance beyond the outermost peaks where the unit signature is below ``fraction`` of apex."""
    target = fraction * cluster.apex()
    total = float(np.sum(cluster.amplitudes * cluster.widths))
    return math.sqrt(max(total / (4.0 * target), 0.0)) + 1e-12


def bound_concentration(spec: Spectrum, cluster: Cluster, noise,
                        noise_allowance: float = DEFAULT_NOISE_ALLOWANCE,
                        refine: bool = True) -> float:
    """Largest concentration of ``cluster`` the spectrum can support.

    For each candidate shift the bound is the smallest ratio of observed
    intensity to unit signature over the points where the signature exceeds
    1% of its apex; the result is the largest such ratio over the window.
    The observed intensity is clipped at zero and raised by
    ``noise_allowance * sigma`` so noise dips cannot push the bound below the
    truth. Shifts are scanned on the spectrum grid, then the best one is
    refined continuously, because the ratio on a steep flank is very
    sensitive to sub-grid misplacement.

    Returns ``inf`` when every candidate shift puts the signature on excluded
    points only (the cluster carries no evidence).
    """
    lo, hi = cluster.window
    if lo < spec.start - 1e-9 or hi > spec.stop + 1e-9:
        raise ShiftDomainError(
            f"cluster {cluster.id!r} window [{lo}, {hi}] outside spectrum "
            f"[{spec.start}, {spec.stop}]"
        )
    y_all = spec.ppm
    s = np.clip(np.real(np.asarray(spec.intensities)), 0.0, None)
    s = s + noise_allowance * float(noise.sigma)
    inc = spec.included
    apex = cluster.apex()
    cut = SUPPORT_FRACTION * apex
    radius = _support_radius(cluster, SUPPORT_FRACTION)
    off_lo, off_hi = cluster.span()
    amp, off, wid = cluster.amplitudes, cluster.offsets, cluster.widths

    a, b = spec.index_range(lo + off_lo - radius, hi + off_hi + radius)
    b = min(b + 1, len(spec))
    block = (np.ascontiguousarray(y_all[a:b]), np.ascontiguousarray(s[a:b]),
             np.ascontiguousarray(inc[a:b]), amp, off, wid, cut, off_lo - radius, off_hi + radius)

    def ratio(delta: float) -> float:
        return float(_kernels.support_ratios(np.array([delta]), *block)[0])

    n_shift = int(math.floor((hi - lo) / spec.step + 1e-9)) + 1
    shifts = lo + spec.step * np.arange(n_shift)
    if shifts[-1] < hi:
        shifts = np.append(shifts, hi)
    vals = _kernels.support_ratios(shifts, *block)
    j = int(np.argmax(vals))
    best = float(vals[j])
    if best == -math.inf:
        return math.inf
    if refine and hi > lo:
        # optimise the offset from the grid shift; the bounded method's
        # tolerance is relative to |x|, which would be coarse at ppm ~ 10
        x0 = float(shifts[j])
        a = max(lo, x0 - spec.step) - x0
        b = min(hi, x0 + spec.step) - x0
        res = minimize_scalar(lambda u: -ratio(x0 + u), bounds=(a, b), method="bounded",
                              options={"xatol": 1e-12})
        best = max(best, float(-res.fun))
    return max(best, 0.0)


def compute_bounds(spec: Spectrum, library: SpectralLibrary, noise,
                   noise_allowance: float = DEFAULT_NOISE_ALLOWANCE) -> ConcentrationBound:
    """Bounds for every cluster and, by taking the minimum, every compound."""
    per_cluster = {}
    per_compound = {}
    for comp in library.compounds:
        vals = []
        for cl in comp.clusters:
            b = bound_concentration(spec, cl, noise, noise_allowance)
            per_cluster[cluster_key(comp.id, cl.id)] = b
            vals.append(b)
        finite = [v for v in vals if math.isfinite(v)]
        per_compound[comp.id] = min(finite) if finite else 0.0
    return ConcentrationBound(per_cluster, per_compound)


# -------------------------------------------------------- influence intervals


def influence_interval(cluster: Cluster, bound: float, noise,
                       fraction: float = INFLUENCE_FRACTION):
    """Smallest ``(lo, hi)`` outside which the cluster at ``bound`` stays below ``fraction * sigma``.

    Holds for every shift in the cluster window. Returns ``None`` (empty
    interval) when the bound or sigma is zero, or when even the apex at the
    bound is below the threshold.
    """
    sigma = float(noise.sigma)
    if not (bound > 0) or not (sigma > 0):
        return None
    if not math.isfinite(bound):
        raise InvalidArgumentError("influence interval needs a finite bound")
    tau = fraction * sigma
    amp, off, wid = cluster.amplitudes, cluster.offsets, cluster.widths

    def excess(u):
        d = off - u
        return bound * float(np.sum(amp * wid / (wid + 4.0 * d * d))) - tau

    if bound * cluster.apex() < tau:
        return None
    reach = math.sqrt(bound * float(np.sum(amp * wid)) / (4.0 * tau))
    fw = float(np.sqrt(wid.min()))
    step = fw / 20.0

    def outer(direction: int) -> float:
        start = (off.max() + reach) if direction > 0 else (off.min() - reach)
        inner = off.max() if direction > 0 else off.min()
        n = int(math.ceil(abs(start - inner) / step)) + 1
        u = start - direction * step * np.arange(n + 1)
        d = off[:, None] - u[None, :]
        val = bound * np.sum(amp[:, None] * wid[:, None] / (wid[:, None] + 4.0 * d * d), axis=0) - tau
        hit = np.flatnonzero(val >= 0)
        if hit.size == 0:
            # the apex condition above guarantees a hit; keep the inner peak as a safe fallback
            return float(inner)
        k = int(hit[0])
        if k == 0:
            return float(u[0])
        a, b = sorted((u[k - 1], u[k]))
        return float(brentq(excess, a, b, xtol=1e-14))

    lo, hi = cluster.window
    return (lo + outer(-1), hi + outer(+1))


def single_peak_interval(cluster: Cluster, bound: float, sigma: float,
                         fraction: float = INFLUENCE_FRACTION):
    """Closed-form influence interval of a one-peak cluster."""
    (a,), (c,), (w,) = cluster.amplitudes, cluster.offsets, cluster.widths
    d = math.sqrt(max((bound * a * w / (fraction * sigma) - w) / 4.0, 0.0))
    lo, hi = cluster.window
    return (lo + c - d, hi + c + d)


def compute_intervals(library: SpectralLibrary, bounds: ConcentrationBound, noise,
                      domain=None, fraction: float = INFLUENCE_FRACTION) -> dict:
    """Influence interval of every cluster at its compound's bound, clipped to ``domain``."""
    out = {}
    for key, comp, cl in library.iter_clusters():
        iv = influence_interval(cl, bounds.per_compound[comp.id], noise, fraction)
        if iv is not None and domain is not None:
            iv = (max(iv[0], domain[0]), min(iv[1], domain[1]))
            if iv[0] >= iv[1]:
                iv = None
        out[key] = iv
    return out


# ----------------------------------------------------------------- regions


@dataclass(frozen=True)
class Region:
    """Half-open ppm interval ``[lo, hi)`` influenced by exactly ``cluster_ids``."""

    interval: tuple
    cluster_ids: tuple = ()
    compound_ids: tuple = ()

    @property
    def is_background(self) -> bool:
        return not self.cluster_ids

    def contains(self, y: float) -> bool:
        return self.interval[0] <= y < self.interval[1]

    def to_dict(self) -> dict:
        return {"interval_ppm": list(self.interval), "clusters": list(self.cluster_ids),
                "compounds": list(self.compound_ids)}


def _subtract(pieces, cut):
    lo, hi = cut
    out = []
    for a, b in pieces:
        if hi <= a or lo >= b:
            out.append((a, b))
            continue
        if a < lo:
            out.append((a, lo))
        if hi < b:
            out.append((hi, b))
    return out


def partition_regions(library: SpectralLibrary, intervals: dict, domain, exclusions=()) -> list:
    """Split ``domain`` into maximal runs with a constant influencing cluster set.

    Influence intervals count as ``[lo, hi)``. The last region is closed on the
    right so the domain's end point belongs to it. Exclusions are cut out.
    """
    d0, d1 = float(domain[0]), float(domain[1])
    if not d0 < d1:
        raise InvalidArgumentError("empty partition domain")
    end = math.nextafter(d1, math.inf)
    order = {key: i for i, (key, _, _) in enumerate(library.iter_clusters())}
    owner = {key: comp.id for key, comp, _ in library.iter_clusters()}
    comp_order = {c.id: i for i, c in enumerate(library.compounds)}
    active = {}
    for key, iv in intervals.items():
        if iv is None:
            continue
        lo, hi = max(float(iv[0]), d0), min(float(iv[1]), end)
        if lo < hi:
            active[key] = (lo, hi)
    points = {d0, end}
    for lo, hi in active.values():
        points.update((lo, hi))
    pts = sorted(points)
    # sweep: events sorted by position, the active set changes only at endpoints
    starts = sorted(active.items(), key=lambda kv: kv[1][0])
    ends = sorted(active.items(), key=lambda kv: kv[1][1])
    si = ei = 0
    current = set()
    raw = []
    for a, b in zip(pts[:-1], pts[1:]):
        while si < len(starts) and starts[si][1][0] <= a:
            current.add(starts[si][0])
            si += 1
        while ei < len(ends) and ends[ei][1][1] <= a:
            current.discard(ends[ei][0])
            ei += 1
        raw.append(((a, b), tuple(sorted(current, key=order.__getitem__))))
    merged = []
    for (a, b), keys in raw:
        if merged and merged[-1][1] == keys and merged[-1][0][1] == a:
            merged[-1] = ((merged[-1][0][0], b), keys)
        else:
            merged.append(((a, b), keys))
    regions = []
    for (a, b), keys in merged:
        pieces = [(a, b)]
        for cut in exclusions:
            pieces = _subtract(pieces, (float(cut[0]), float(cut[1])))
        comps = tuple(sorted({owner[k] for k in keys}, key=comp_order.__getitem__))
        for p in pieces:
            if p[0] < p[1]:
                regions.append(Region(p, keys, comps))
    return regions


# ------------------------------------------------------------ factor graph


@dataclass(frozen=True)
class Variable:
    """A concentration (``kind='conc'``) or shift (``kind='shift'``) variable."""

    id: str
    kind: str
    target: str
    lo: float
    hi: float

    @property
    def width(self) -> float:
        return self.hi - self.lo

    @property
    def degenerate(self) -> bool:
        return not (self.hi > self.lo)


@dataclass(frozen=True)
class Factor:
    region_index: int
    region: Region
    variables: tuple


@dataclass(frozen=True, eq=False)
class FactorGraph:
    variables: tuple
    factors: tuple
    regions: tuple
    bounds: ConcentrationBound = None
    library: SpectralLibrary = None
    adjacency: dict = field(default=None)

    def __post_init__(self):
        adj = {v.id: [] for v in self.variables}
        for fi, f in enumerate(self.factors):
            for vid in f.variables:
                adj[vid].append(fi)
        object.__setattr__(self, "adjacency", {k: tuple(v) for k, v in adj.items()})
        object.__setattr__(self, "_index", {v.id: i for i, v in enumerate(self.variables)})

    def variable(self, vid: str) -> Variable:
        return self.variables[self._index[vid]]

    def degree(self, vid: str) -> int:
        return len(self.adjacency[vid])

    @property
    def n_edges(self) -> int:
        return sum(len(f.variables) for f in self.factors)


def conc_var(compound_id: str) -> str:
    return f"conc:{compound_id}"


def shift_var(key: str) -> str:
    return f"shift:{key}"


def build_factor_graph(regions, library: SpectralLibrary, bounds: ConcentrationBound) -> FactorGraph:
    """One concentration variable per compound, one shift variable per cluster, one factor per non-empty region."""
    variables = []
    for comp in library.compounds:
        variables.append(Variable(conc_var(comp.id), "conc", comp.id, 0.0,
                                  float(bounds.per_compound[comp.id])))
        for cl in comp.clusters:
            key = cluster_key(comp.id, cl.id)
            variables.append(Variable(shift_var(key), "shift", key, *cl.window))
    factors = []
    for i, region in enumerate(regions):
        if region.is_background:
            continue
        vids = [conc_var(c) for c in region.compound_ids] + [shift_var(k) for k in region.cluster_ids]
        factors.append(Factor(i, region, tuple(vids)))
    return FactorGraph(tuple(variables), tuple(factors), tuple(regions), bounds, library)


def diagnostics(graph: FactorGraph, spec: Spectrum = None, noise=None) -> dict:
    """Regions and bounds as a JSON-ready document.

    With a spectrum and noise estimate, background regions holding a point
    above five sigma are flagged as unexplained signal.
    """
    regions = []
    for region in graph.regions:
        entry = region.to_dict()
        if region.is_background and spec is not None and noise is not None:
            a, b = spec.index_range(*region.interval)
            vals = np.abs(np.real(np.asarray(spec.intensities[a:b])))[spec.included[a:b]]
            peak = float(vals.max()) if vals.size else 0.0
            entry["maxAbsIntensity"] = peak
            entry["unexplainedSignal"] = bool(peak > 5.0 * noise.sigma)
        regions.append(entry)
    return {
        "regions": regions,
        "bounds": graph.bounds.to_list() if graph.bounds is not None else [],
        "nFactors": len(graph.factors),
        "nVariables": len(graph.variables),
    }


def save_diagnostics(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1))
