"""Domain types and forward rendering of Lorentzian mixture spectra.

A compound is a set of clusters, each cluster a rigid group of Lorentzian
peaks that translates as a whole inside its shift window. Peak centres are
stored relative to the cluster's nominal centre, so a cluster positioned at
``shift`` ppm places each peak at ``shift + peak.center``.

The peak kernel is

    height(y) = amplitude * width / (width + 4 * (center + shift - y) ** 2)

where ``width`` is the square of the full width at half maximum (ppm^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .errors import (
    IncompleteProfileError,
    InvalidArgumentError,
    LibraryValidationError,
    ShiftDomainError,
)

#: Chemical-shift domain of a DSS-referenced proton spectrum, in ppm.
SPECTRUM_DOMAIN = (-1.0, 13.0)
DEFAULT_HALF_WINDOW = 0.025
_WINDOW_TOL = 1e-9


def cluster_key(compound_id: str, cluster_id: str) -> str:
    """Globally unique key of a cluster, used by profiles and factor graphs."""
    return f"{compound_id}:{cluster_id}"


@dataclass(frozen=True)
class PeakShape:
    """One Lorentzian line: height, centre offset (ppm) and squared FWHM (ppm^2)."""

    amplitude: float
    center: float
    width: float

    def __post_init__(self):
        for name in ("amplitude", "center", "width"):
            if not math.isfinite(getattr(self, name)):
                raise InvalidArgumentError(f"peak {name} must be finite")
        if self.amplitude <= 0 or self.width <= 0:
            raise InvalidArgumentError("peak amplitude and width must be positive")

    @property
    def fwhm(self) -> float:
        return math.sqrt(self.width)


def eval_peak(y, peak: PeakShape, cluster_shift: float = 0.0):
    """Height of ``peak`` at ``y`` when its cluster sits at ``cluster_shift``.

    ``y`` may be a scalar or an array; the result has the same shape.
    """
    y_arr = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y_arr)) or not math.isfinite(cluster_shift):
        raise InvalidArgumentError("eval_peak requires finite inputs")
    d = peak.center + cluster_shift - y_arr
    out = peak.amplitude * peak.width / (peak.width + 4.0 * d * d)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Cluster:
    id: str
    peaks: tuple
    nominal_center: float
    window: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "peaks", tuple(self.peaks))
        if self.window is None:
            c = self.nominal_center
            object.__setattr__(
                self, "window", (c - DEFAULT_HALF_WINDOW, c + DEFAULT_HALF_WINDOW)
            )
        else:
            object.__setattr__(self, "window", (float(self.window[0]), float(self.window[1])))
        errors = _cluster_errors(self)
        if errors:
            raise LibraryValidationError(errors)
        amp = np.array([p.amplitude for p in self.peaks])
        cen = np.array([p.center for p in self.peaks])
        wid = np.array([p.width for p in self.peaks])
        for arr in (amp, cen, wid):
            arr.setflags(write=False)
        object.__setattr__(self, "_arrays", (amp, cen, wid))

    @property
    def amplitudes(self) -> np.ndarray:
        return self._arrays[0]

    @property
    def offsets(self) -> np.ndarray:
        return self._arrays[1]

    @property
    def widths(self) -> np.ndarray:
        return self._arrays[2]

    def signature(self, y, shift: float) -> np.ndarray:
        """Unit-concentration height of the whole cluster at ``y`` for a given shift."""
        y = np.asarray(y, dtype=float)
        out = np.zeros(y.shape)
        for a, c, w in zip(*self._arrays):
            d = c + shift - y
            out += a * w / (w + 4.0 * d * d)
        return out

    def span(self) -> tuple:
        """Offsets of the outermost peaks relative to the nominal centre."""
        return float(self.offsets.min()), float(self.offsets.max())

    def apex(self) -> float:
        """Tallest value of the unit signature (located to ~1e-6 relative)."""
        # the cluster is immutable, so the search runs once
        if "_apex" not in self.__dict__:
            object.__setattr__(self, "_apex", _signature_apex(self))
        return self.__dict__["_apex"]


def _signature_apex(cluster: Cluster) -> float:
    lo, hi = cluster.span()
    fw = float(np.sqrt(cluster.widths.min()))
    y = np.arange(lo - fw, hi + fw, fw / 40.0)
    y = np.concatenate([y, cluster.offsets])
    vals = cluster.signature(y, 0.0)
    i = int(np.argmax(vals))
    best_y = y[i]
    # golden refinement on a bracket of one sampling step
    from scipy.optimize import minimize_scalar

    res = minimize_scalar(
        lambda t: -cluster.signature(np.array([t]), 0.0)[0],
        bounds=(best_y - fw / 40.0, best_y + fw / 40.0),
        method="bounded",
        options={"xatol": 1e-12},
    )
    return float(max(vals[i], -res.fun))


def _cluster_errors(cluster: Cluster, where: str = "") -> list:
    where = where or f"cluster {cluster.id!r}"
    errors = []
    if not cluster.peaks:
        errors.append(f"{where}: has no peaks")
    lo, hi = cluster.window
    if not (math.isfinite(lo) and math.isfinite(hi) and math.isfinite(cluster.nominal_center)):
        errors.append(f"{where}: window and nominal centre must be finite")
    elif lo > hi:
        errors.append(f"{where}: inverted shift window [{lo}, {hi}]")
    elif not (lo - _WINDOW_TOL <= cluster.nominal_center <= hi + _WINDOW_TOL):
        errors.append(
            f"{where}: nominal centre {cluster.nominal_center} outside window [{lo}, {hi}]"
        )
    return errors


@dataclass(frozen=True)
class Compound:
    id: str
    name: str
    clusters: tuple
    detectability: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "clusters", tuple(self.clusters))
        errors = _compound_errors(self)
        if errors:
            raise LibraryValidationError(errors)

    def cluster(self, cluster_id: str) -> Cluster:
        for cl in self.clusters:
            if cl.id == cluster_id:
                return cl
        raise KeyError(cluster_id)

    @property
    def n_peaks(self) -> int:
        return sum(len(c.peaks) for c in self.clusters)


def _compound_errors(compound: Compound) -> list:
    errors = []
    where = f"compound {compound.id!r}"
    if not compound.clusters:
        errors.append(f"{where}: has no clusters")
    seen = set()
    for cl in compound.clusters:
        if cl.id in seen:
            errors.append(f"{where}: duplicate cluster id {cl.id!r}")
        seen.add(cl.id)
    if not (math.isfinite(compound.detectability) and compound.detectability >= 1.0):
        errors.append(f"{where}: detectability must be >= 1")
    return errors


@dataclass(frozen=True)
class SpectralLibrary:
    biofluid: str
    compounds: tuple
    reference_compound: str
    reference_concentration: float

    def __post_init__(self):
        object.__setattr__(self, "compounds", tuple(self.compounds))
        errors = library_errors(self)
        if errors:
            raise LibraryValidationError(errors)
        object.__setattr__(self, "_index", {c.id: c for c in self.compounds})

    def compound(self, compound_id: str) -> Compound:
        return self._index[compound_id]

    def __contains__(self, compound_id) -> bool:
        return compound_id in self._index

    @property
    def compound_ids(self) -> list:
        return [c.id for c in self.compounds]

    @property
    def metabolite_ids(self) -> list:
        """Compound ids excluding the reference standard."""
        return [c.id for c in self.compounds if c.id != self.reference_compound]

    def iter_clusters(self) -> Iterator[tuple]:
        """Yield ``(key, compound, cluster)`` for every cluster in library order."""
        for comp in self.compounds:
            for cl in comp.clusters:
                yield cluster_key(comp.id, cl.id), comp, cl

    def stats(self, include_reference: bool = False) -> dict:
        """Counts of compounds, clusters and peaks.

        The reference standard is left out unless ``include_reference`` is set,
        so the counts describe the metabolites being profiled.
        """
        comps = [
            c for c in self.compounds
            if include_reference or c.id != self.reference_compound
        ]
        return {
            "compounds": len(comps),
            "clusters": sum(len(c.clusters) for c in comps),
            "peaks": sum(c.n_peaks for c in comps),
        }


def library_errors(library: SpectralLibrary) -> list:
    errors = []
    seen = set()
    for comp in library.compounds:
        if comp.id in seen:
            errors.append(f"duplicate compound id {comp.id!r}")
        seen.add(comp.id)
        for cl in comp.clusters:
            lo, hi = cl.window
            if lo < SPECTRUM_DOMAIN[0] or hi > SPECTRUM_DOMAIN[1]:
                errors.append(
                    f"compound {comp.id!r} cluster {cl.id!r}: window [{lo}, {hi}] "
                    f"outside spectrum domain {list(SPECTRUM_DOMAIN)}"
                )
    if library.reference_compound not in seen:
        errors.append(f"reference compound {library.reference_compound!r} not in library")
    if not (math.isfinite(library.reference_concentration) and library.reference_concentration > 0):
        errors.append("reference concentration must be positive")
    return errors


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Spectrum:
    """Intensities on a uniform ascending ppm grid.

    ``intensities[i]`` is the value at ``start + i * step``. ``excluded`` is an
    optional boolean mask of points (e.g. the solvent signal) that take no
    part in any loss computation. Intensities may be complex for spectra that
    still carry an imaginary channel.
    """

    start: float
    step: float
    intensities: np.ndarray
    excluded: np.ndarray = field(default=None)

    def __post_init__(self):
        if not (math.isfinite(self.step) and self.step > 0):
            raise InvalidArgumentError("spectrum step must be positive")
        if not math.isfinite(self.start):
            raise InvalidArgumentError("spectrum start must be finite")
        values = np.asarray(self.intensities)
        if values.ndim != 1 or values.size < 2:
            raise InvalidArgumentError("spectrum needs at least two points")
        if not np.iscomplexobj(values):
            values = values.astype(float)
        object.__setattr__(self, "intensities", _readonly(values))
        if self.excluded is not None:
            mask = np.asarray(self.excluded, dtype=bool)
            if mask.shape != values.shape:
                raise InvalidArgumentError("exclusion mask does not match spectrum length")
            object.__setattr__(self, "excluded", _readonly(mask))

    def __len__(self) -> int:
        return self.intensities.size

    @property
    def ppm(self) -> np.ndarray:
        axis = self.__dict__.get("_ppm")
        if axis is None:
            axis = _readonly(self.start + self.step * np.arange(len(self)))
            object.__setattr__(self, "_ppm", axis)
        return axis

    @property
    def stop(self) -> float:
        return self.start + self.step * (len(self) - 1)

    @property
    def included(self) -> np.ndarray:
        if self.excluded is None:
            return np.ones(len(self), dtype=bool)
        return ~self.excluded

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.intensities)

    def same_grid(self, other: "Spectrum", rtol: float = 1e-9) -> bool:
        return (
            len(self) == len(other)
            and abs(self.start - other.start) <= rtol * max(1.0, abs(self.start))
            and abs(self.step - other.step) <= rtol * self.step
        )

    def with_intensities(self, values, excluded="keep") -> "Spectrum":
        mask = self.excluded if isinstance(excluded, str) else excluded
        return Spectrum(self.start, self.step, values, mask)

    def real(self) -> "Spectrum":
        return self.with_intensities(np.real(self.intensities))

    def zeros(self) -> "Spectrum":
        return self.with_intensities(np.zeros(len(self)))

    def index_range(self, lo: float, hi: float) -> tuple:
        """Indices ``[a, b)`` of grid points ``y`` with ``lo <= y < hi``."""
        ppm = self.ppm
        return int(np.searchsorted(ppm, lo, "left")), int(np.searchsorted(ppm, hi, "left"))


def make_grid(start: float = SPECTRUM_DOMAIN[0], stop: float = SPECTRUM_DOMAIN[1],
              step: float = 0.0002) -> Spectrum:
    """All-zero spectrum spanning ``[start, stop]`` inclusive at ``step`` ppm."""
    n = int(round((stop - start) / step)) + 1
    return Spectrum(start, step, np.zeros(n))


@dataclass(frozen=True)
class Profile:
    """Compound concentrations (uM), cluster shifts (ppm) and detection verdicts.

    Shifts are keyed by :func:`cluster_key`.
    """

    concentrations: Mapping[str, float]
    shifts: Mapping[str, float]
    detected: Mapping[str, bool] = field(default_factory=dict)

    def __post_init__(self):
        for cid, x in self.concentrations.items():
            if not (math.isfinite(x) and x >= 0):
                raise InvalidArgumentError(f"concentration of {cid!r} must be finite and >= 0")

    def to_dict(self) -> dict:
        return {
            "concentrations": dict(self.concentrations),
            "shifts": dict(self.shifts),
            "detected": dict(self.detected),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Profile":
        return cls(
            {k: float(v) for k, v in doc["concentrations"].items()},
            {k: float(v) for k, v in doc["shifts"].items()},
            {k: bool(v) for k, v in doc.get("detected", {}).items()},
        )


def nominal_shifts(library: SpectralLibrary) -> dict:
    return {key: cl.nominal_center for key, _, cl in library.iter_clusters()}


def _check_shift(cluster: Cluster, shift: float, where: str):
    lo, hi = cluster.window
    if not (math.isfinite(shift) and lo - _WINDOW_TOL <= shift <= hi + _WINDOW_TOL):
        raise ShiftDomainError(f"{where}: shift {shift} outside window [{lo}, {hi}]")


def render_compound(compound: Compound, conc: float, shifts: Mapping[str, float],
                    grid: Spectrum) -> Spectrum:
    """Spectrum of one compound at concentration ``conc``.

    ``shifts`` maps each of the compound's cluster ids (unqualified) to ppm.
    """
    values = np.zeros(len(grid))
    y = grid.ppm
    for cl in compound.clusters:
        if cl.id not in shifts:
            raise IncompleteProfileError(f"no shift for cluster {cl.id!r} of {compound.id!r}")
        shift = float(shifts[cl.id])
        _check_shift(cl, shift, f"compound {compound.id!r} cluster {cl.id!r}")
        if conc != 0.0:
            values += cl.signature(y, shift)
    return grid.with_intensities(conc * values)


def _compound_shifts(compound: Compound, shifts: Mapping[str, float]) -> dict:
    out = {}
    for cl in compound.clusters:
        key = cluster_key(compound.id, cl.id)
        if key in shifts:
            out[cl.id] = shifts[key]
    return out


def render_mixture(library: SpectralLibrary, profile: Profile, grid: Spectrum) -> Spectrum:
    """Sum of all compound spectra for ``profile``; absent compounds contribute nothing."""
    total = np.zeros(len(grid))
    for comp in library.compounds:
        conc = float(profile.concentrations.get(comp.id, 0.0))
        if conc == 0.0:
            continue
        total += render_compound(comp, conc, _compound_shifts(comp, profile.shifts), grid).intensities
    return grid.with_intensities(total)


def compound_unit_apex(compound: Compound) -> float:
    """Tallest point of the compound rendered at unit concentration and nominal shifts."""
    pts = []
    for cl in compound.clusters:
        lo, hi = cl.span()
        fw = float(np.sqrt(cl.widths.min()))
        pts.append(np.arange(lo - fw, hi + fw, fw / 40.0) + cl.nominal_center)
        pts.append(cl.offsets + cl.nominal_center)
    y = np.concatenate(pts)
    total = np.zeros(y.size)
    for cl in compound.clusters:
        total += cl.signature(y, cl.nominal_center)
    return float(total.max())


def clusters_by_key(library: SpectralLibrary) -> dict:
    return {key: (comp, cl) for key, comp, cl in library.iter_clusters()}
