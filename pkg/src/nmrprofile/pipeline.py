"""End-to-end profiling: preprocessing, partitioning, annealed search, absolute scale."""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import preprocess as pp
from .errors import InvalidArgumentError
from .infer import (AnnealSchedule, InferConfig, Problem, ReferenceWarning, Solution,
                    absolute_quantify, reference_scale, run_map)
from .metrics import detection_thresholds
from .model import SPECTRUM_DOMAIN, Profile, SpectralLibrary, Spectrum
from .partition import (DEFAULT_NOISE_ALLOWANCE, build_factor_graph, compute_bounds,
                        compute_intervals, diagnostics, partition_regions)

log = logging.getLogger(__name__)

#: noise level never taken below this fraction of the tallest absolute intensity
DEFAULT_NOISE_FLOOR = 1e-4


@dataclass(frozen=True)
class PreprocessConfig:
    """Preprocessing switches; ``None`` means the default for the input kind.

    Time-domain input is phased, baseline-corrected and referenced by
    default; a frequency-domain spectrum is taken as already processed.
    """

    phase: bool = None
    baseline: bool = None
    reference: bool = None
    baseline_method: str = "whittaker"
    smoothing_lambda: float = pp.DEFAULT_WHITTAKER_LAMBDA
    solvent_region: tuple = pp.DEFAULT_SOLVENT_REGION
    reference_window: tuple = pp.DEFAULT_REFERENCE_WINDOW
    smoothing: dict = None
    fill_factor: int = 2
    noise_floor: float = DEFAULT_NOISE_FLOOR
    noise_allowance: float = DEFAULT_NOISE_ALLOWANCE

    def __post_init__(self):
        if self.baseline_method not in pp.BASELINE_METHODS:
            raise InvalidArgumentError(f"unknown baseline method {self.baseline_method!r}")
        if not (self.smoothing_lambda > 0):
            raise InvalidArgumentError("smoothing lambda must be positive")
        if self.fill_factor < 1 or self.fill_factor & (self.fill_factor - 1):
            raise InvalidArgumentError("fill factor must be a power of two")
        if not (0 <= self.noise_floor < 1):
            raise InvalidArgumentError("noise floor must lie in [0, 1)")
        if not (self.noise_allowance >= 0):
            raise InvalidArgumentError("noise allowance must be >= 0")
        if self.solvent_region is not None and self.solvent_region[0] > self.solvent_region[1]:
            raise InvalidArgumentError("inverted solvent region")

    def resolved(self, kind: str) -> "PreprocessConfig":
        on = kind == "fid"
        return replace(
            self,
            phase=on if self.phase is None else self.phase,
            baseline=on if self.baseline is None else self.baseline,
            reference=on if self.reference is None else self.reference,
        )

    def to_dict(self) -> dict:
        return {
            "phase": self.phase, "baseline": self.baseline, "reference": self.reference,
            "baselineMethod": self.baseline_method, "smoothingLambda": self.smoothing_lambda,
            "solventRegion": list(self.solvent_region) if self.solvent_region is not None else None,
            "referenceWindow": list(self.reference_window), "smoothing": self.smoothing,
            "fillFactor": self.fill_factor, "noiseFloor": self.noise_floor,
            "noiseAllowance": self.noise_allowance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PreprocessConfig":
        d = cls()
        solvent = doc.get("solventRegion", d.solvent_region)
        return cls(
            phase=doc.get("phase"), baseline=doc.get("baseline"), reference=doc.get("reference"),
            baseline_method=doc.get("baselineMethod", d.baseline_method),
            smoothing_lambda=float(doc.get("smoothingLambda", d.smoothing_lambda)),
            solvent_region=tuple(solvent) if solvent is not None else None,
            reference_window=tuple(doc.get("referenceWindow", d.reference_window)),
            smoothing=doc.get("smoothing"),
            fill_factor=int(doc.get("fillFactor", d.fill_factor)),
            noise_floor=float(doc.get("noiseFloor", d.noise_floor)),
            noise_allowance=float(doc.get("noiseAllowance", d.noise_allowance)),
        )


@dataclass(frozen=True)
class ScheduleConfig:
    """Cooling settings; ``T0=None`` derives the start temperature from the data."""

    T0: float = None
    decay: float = 0.7
    tmin_fraction: float = 1e-6

    def build(self, problem: Problem) -> AnnealSchedule:
        T0 = self.T0 if self.T0 is not None else problem.default_schedule().T0
        return AnnealSchedule(T0, self.decay, self.tmin_fraction * T0)

    def to_dict(self) -> dict:
        return {"T0": self.T0, "decay": self.decay, "TminFraction": self.tmin_fraction}

    @classmethod
    def from_dict(cls, doc: dict) -> "ScheduleConfig":
        d = cls()
        T0 = doc.get("T0")
        return cls(None if T0 is None else float(T0), float(doc.get("decay", d.decay)),
                   float(doc.get("TminFraction", d.tmin_fraction)))


@dataclass
class PreprocessResult:
    spectrum: Spectrum
    noise: pp.NoiseEstimate
    info: dict = field(default_factory=dict)


@dataclass
class ProfileResult:
    solution: Solution
    processed: Spectrum
    noise: pp.NoiseEstimate
    regions: dict
    preprocessing: dict


def preprocess_input(data, config: PreprocessConfig = PreprocessConfig(), seed: int = 0) -> PreprocessResult:
    """Turn a FID or spectrum into a real, referenced spectrum plus its noise estimate."""
    kind = "fid" if isinstance(data, pp.Fid) else "spectrum"
    cfg = config.resolved(kind)
    info = {"inputKind": kind}
    if kind == "fid":
        spec = pp.zero_fill_transform(data, cfg.fill_factor)
    else:
        spec = data
    if cfg.phase:
        if not spec.is_complex:
            raise InvalidArgumentError("phasing needs a complex spectrum")
        params, spec = pp.autophase(spec, seed=seed)
        info["phase"] = params.to_dict()
    spec = spec.real()
    if cfg.baseline:
        noise = pp.detect_baseline(spec)
        spec, model = pp.correct_baseline(spec, noise, cfg.baseline_method, cfg.smoothing_lambda)
        info["baseline"] = {"method": model.method, "anchors": len(model.anchor_points)}
    if cfg.reference:
        spec, offset = pp.reference_shift(spec, cfg.reference_window)
        info["referenceOffset_ppm"] = offset
    if cfg.solvent_region is not None:
        lo, hi = cfg.solvent_region
        if hi > spec.start and lo < spec.stop:
            spec = pp.exclude_solvent(spec, cfg.solvent_region)
    if cfg.smoothing:
        opts = dict(cfg.smoothing)
        spec = pp.smooth(spec, **{_snake(k): v for k, v in opts.items()})
    noise = pp.detect_baseline(spec)
    peak = float(np.max(np.abs(spec.intensities[spec.included]))) if spec.included.any() else 0.0
    sigma = max(noise.sigma, cfg.noise_floor * peak)
    info["noise"] = {"detectedSigma": noise.sigma, "sigma": sigma,
                     "baselineFraction": float(np.mean(noise.baseline_mask))}
    info["excluded_ppm"] = pp.excluded_intervals(spec)
    return PreprocessResult(spec, noise.with_sigma(sigma), info)


def _snake(key: str) -> str:
    return {"sigmaPpm": "sigma_ppm"}.get(key, key)


def _domain(spec: Spectrum, library: SpectralLibrary) -> tuple:
    lo = max(spec.start, SPECTRUM_DOMAIN[0])
    hi = min(spec.stop, SPECTRUM_DOMAIN[1])
    for _, comp, cl in library.iter_clusters():
        a, b = cl.window
        if a < lo or b > hi:
            raise InvalidArgumentError(
                f"spectrum [{spec.start:.4f}, {spec.stop:.4f}] ppm does not cover the window "
                f"of {comp.id} cluster {cl.id}"
            )
    return lo, hi


def profile(data, library: SpectralLibrary, preprocess: PreprocessConfig = PreprocessConfig(),
            infer: InferConfig = InferConfig(), schedule: ScheduleConfig = ScheduleConfig(),
            progress=None) -> ProfileResult:
    """Full pipeline on a FID or spectrum against ``library``."""
    pre = preprocess_input(data, preprocess, infer.seed)
    spec, noise = pre.spectrum, pre.noise
    domain = _domain(spec, library)
    bounds = compute_bounds(spec, library, noise, preprocess.noise_allowance)
    intervals = compute_intervals(library, bounds, noise, domain)
    exclusions = [tuple(iv) for iv in pp.excluded_intervals(spec)]
    regions = partition_regions(library, intervals, domain, exclusions)
    graph = build_factor_graph(regions, library, bounds)
    problem = Problem(graph, spec, library, infer)
    sched = schedule.build(problem)
    sol = run_map(graph, spec, library, infer, sched, noise=noise, problem=problem, progress=progress)
    sol = _absolute(sol, library, noise)
    region_doc = diagnostics(graph, spec, noise)
    region_doc["intervals"] = {k: list(v) if v is not None else None for k, v in intervals.items()}
    return ProfileResult(sol, spec, noise, region_doc, pre.info)


def _absolute(sol: Solution, library: SpectralLibrary, noise) -> Solution:
    """Scale to the reference concentration and re-derive thresholds and verdicts."""
    thr = detection_thresholds(noise, library)
    scale = reference_scale(sol.profile, library) if library.reference_compound else None
    notes = list(sol.warnings)
    if scale is None:
        notes.append("reference compound not detected; concentrations left unscaled")
        prof = sol.profile
        scale = 1.0
    else:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ReferenceWarning)
            prof = absolute_quantify(sol.profile, library)
        thr = thr.scaled(scale)
    detected = {cid: x >= thr[cid] for cid, x in prof.concentrations.items()}
    prof = Profile(prof.concentrations, prof.shifts, detected)
    return replace(sol, profile=prof, thresholds=dict(thr.thresholds), warnings=notes,
                   reference_scale=float(scale) if math.isfinite(scale) else 1.0)
