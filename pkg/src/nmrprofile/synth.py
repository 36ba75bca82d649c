"""Ground-truthed synthetic mixtures and the demonstration libraries.

Two demonstration libraries are generated deterministically from fixed seeds:

``csf48``
    48 metabolites named after the human CSF metabolome with 180 clusters and
    946 peaks in total, plus a DSS singlet as reference standard.
``mix15``
    A smaller 15-metabolite library for quick round-trip checks.

Peak parameters are synthetic but shaped like 600 MHz proton multiplets:
line widths of 1.0-1.6 Hz, couplings of 2-8 Hz, and no signal near water.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError
from .model import (
    Cluster,
    Compound,
    PeakShape,
    Profile,
    SpectralLibrary,
    Spectrum,
    cluster_key,
    compound_unit_apex,
    make_grid,
    render_mixture,
)

DEFAULT_GRID = (-1.0, 13.0, 0.0002)
DEFAULT_NOISE_FRACTION = 0.005
REFERENCE_ID = "DSS"
DEMO_MHZ = 600.0

CSF48_NAMES = (
    "2-Hydroxybutyrate", "2-Oxoisovalerate", "3-Hydroxyisobutyrate", "Acetate",
    "Ascorbic acid", "Acetoacetate", "Creatine", "Dimethylamine", "Citrate", "Choline",
    "Glucose", "Glycerol", "Formate", "Glutamate", "Tyrosine", "Phenylalanine", "Alanine",
    "Threonine", "Mannose", "Isoleucine", "Histidine", "Lysine", "Serine", "Lactate",
    "2-Oxoglutarate", "myo-Inositol", "Oxalacetate", "Pyruvate", "Succinate",
    "Pyroglutamate", "Xanthine", "Urea", "3-Hydroxybutyrate", "2-Hydroxyisovalerate",
    "Creatinine", "Glutamine", "Fructose", "Leucine", "Methionine",
    "3-Hydroxyisovalerate", "Isopropanol", "Valine", "Tryptophan", "Acetone", "Methanol",
    "Propylene glycol", "1,5-Anhydrosorbitol", "Dimethylsulfone",
)

MIX15_NAMES = (
    "Acetate", "Alanine", "Citrate", "Creatine", "Creatinine", "Formate", "Glutamine",
    "Glycerol", "Histidine", "Lactate", "Leucine", "Pyruvate", "Succinate", "Tyrosine",
    "Valine",
)

# (names, clusters, peaks, seed) for each demonstration library
_DEMO_LAYOUT = {
    "csf48": (CSF48_NAMES, 180, 946, 48),
    "mix15": (MIX15_NAMES, 45, 190, 15),
}
DEMO_LIBRARIES = tuple(_DEMO_LAYOUT)

# spectral bands that hold cluster centres, with their share of clusters
_BANDS = ((0.85, 4.30, 0.7), (5.25, 8.55, 0.3))
_MIN_CENTER_SEPARATION = 0.012
_MAX_MULTIPLET_SPAN = 0.06


def _slug(name: str) -> str:
    out = "".join(ch.lower() if ch.isalnum() else "-" for ch in name)
    while "--" in out:
        out = out.replace("--", "-")
    return out.strip("-")


def _spread(total: int, k: int, lo: int, hi: int, rng) -> np.ndarray:
    """``k`` random integers in ``[lo, hi]`` summing to ``total``."""
    if not (k * lo <= total <= k * hi):
        raise InvalidArgumentError("cannot spread total within bounds")
    w = rng.gamma(1.5, size=k)
    counts = np.clip(np.round(lo + (total - k * lo) * w / w.sum()), lo, hi).astype(int)
    while counts.sum() != total:
        i = int(rng.integers(k))
        if counts.sum() < total and counts[i] < hi:
            counts[i] += 1
        elif counts.sum() > total and counts[i] > lo:
            counts[i] -= 1
    return counts


def _multiplet(n: int, rng) -> tuple:
    """Relative line positions (ppm) and intensities of an ``n``-line multiplet."""
    j = rng.uniform(2.0, 8.0) / DEMO_MHZ
    if n > 1:
        j = min(j, _MAX_MULTIPLET_SPAN / (n - 1))
    pos = (np.arange(n) - (n - 1) / 2.0) * j
    if n <= 6:
        inten = np.array([math.comb(n - 1, i) for i in range(n)], dtype=float)
    else:
        half = rng.uniform(0.3, 1.0, size=(n + 1) // 2)
        inten = np.concatenate([half, half[: n // 2][::-1]])
    # a slight symmetric roof effect keeps multiplets from being perfectly regular
    pos = pos + rng.uniform(-0.1, 0.1) * j * np.sign(pos) * (np.abs(pos) > 0)
    return pos, inten / inten.sum()


def _place_centers(n: int, rng) -> np.ndarray:
    centers = []
    shares = np.array([b[2] for b in _BANDS])
    counts = np.round(shares / shares.sum() * n).astype(int)
    counts[0] += n - counts.sum()
    for (lo, hi, _), m in zip(_BANDS, counts):
        placed = 0
        tries = 0
        while placed < m:
            tries += 1
            if tries > 200000:
                raise RuntimeError("could not place cluster centres")
            c = float(rng.uniform(lo, hi))
            if all(abs(c - x) >= _MIN_CENTER_SEPARATION for x in centers):
                centers.append(c)
                placed += 1
    centers = np.array(centers)
    rng.shuffle(centers)
    return centers


def _generate_library(names, n_clusters: int, n_peaks: int, seed: int,
                      biofluid: str) -> SpectralLibrary:
    rng = np.random.default_rng(seed)
    k = len(names)
    per_compound = _spread(n_clusters, k, 1, 8, rng)
    per_cluster = _spread(n_peaks, n_clusters, 1, 16, rng)
    centers = _place_centers(n_clusters, rng)
    compounds = []
    ci = 0
    for name, m in zip(names, per_compound):
        clusters = []
        for kk in range(m):
            n = int(per_cluster[ci])
            c = round(float(centers[ci]), 4)
            ci += 1
            protons = float(rng.choice([1, 1, 2, 2, 3, 6]))
            pos, inten = _multiplet(n, rng)
            peaks = []
            for p, frac in zip(pos, inten):
                fwhm = rng.uniform(1.0, 1.6) / DEMO_MHZ
                # area of a Lorentzian is pi * height * fwhm / 2; one proton at
                # fwhm 0.002 ppm has unit height per uM
                height = protons * frac * 0.002 / fwhm
                peaks.append(PeakShape(round(height, 6), round(float(p), 6), fwhm * fwhm))
            clusters.append(Cluster(f"c{kk + 1}", peaks, c))
        compounds.append(Compound(_slug(name), name, clusters))
    dss_peak = PeakShape(9.0 * 0.002 / (1.1 / DEMO_MHZ), 0.0, (1.1 / DEMO_MHZ) ** 2)
    compounds.append(
        Compound(REFERENCE_ID, "DSS", [Cluster("c1", [dss_peak], 0.0, (-0.005, 0.005))])
    )
    return SpectralLibrary(biofluid, compounds, REFERENCE_ID, 500.0)


_DEMO_CACHE = {}


def demo_library(name: str) -> SpectralLibrary:
    """One of the bundled demonstration libraries (see :data:`DEMO_LIBRARIES`)."""
    if name not in _DEMO_LAYOUT:
        raise InvalidArgumentError(f"unknown demo library {name!r}; choose from {DEMO_LIBRARIES}")
    if name not in _DEMO_CACHE:
        names, n_cl, n_pk, seed = _DEMO_LAYOUT[name]
        _DEMO_CACHE[name] = _generate_library(names, n_cl, n_pk, seed, name)
    return _DEMO_CACHE[name]


# ------------------------------------------------------------ mixture specs


@dataclass(frozen=True)
class MixtureSpec:
    """Sampling distribution of synthetic mixtures.

    ``noise_sigma=None`` selects :func:`default_noise_sigma` for the library.
    """

    presence: dict
    ranges: dict
    noise_sigma: float = None
    seed: int = 0

    def __post_init__(self):
        for cid, p in self.presence.items():
            if not (0.0 <= p <= 1.0):
                raise InvalidArgumentError(f"presence probability of {cid!r} outside [0, 1]")
        for cid, (lo, hi) in self.ranges.items():
            if not (0.0 <= lo <= hi and math.isfinite(hi)):
                raise InvalidArgumentError(f"concentration range of {cid!r} must satisfy 0 <= lo <= hi")
        if set(self.presence) != set(self.ranges):
            raise InvalidArgumentError("presence and ranges must cover the same compounds")
        if self.noise_sigma is not None and not (self.noise_sigma >= 0):
            raise InvalidArgumentError("noise sigma must be >= 0")

    def with_seed(self, seed: int) -> "MixtureSpec":
        return MixtureSpec(self.presence, self.ranges, self.noise_sigma, seed)

    def with_noise(self, sigma) -> "MixtureSpec":
        return MixtureSpec(self.presence, self.ranges, sigma, self.seed)

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "noiseSigma": self.noise_sigma,
            "compounds": [
                {"id": cid, "presenceProbability": self.presence[cid],
                 "concentrationRange_uM": list(self.ranges[cid])}
                for cid in self.presence
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MixtureSpec":
        try:
            comps = doc["compounds"]
            return cls(
                {c["id"]: float(c["presenceProbability"]) for c in comps},
                {c["id"]: (float(c["concentrationRange_uM"][0]),
                           float(c["concentrationRange_uM"][1])) for c in comps},
                None if doc.get("noiseSigma") is None else float(doc["noiseSigma"]),
                int(doc.get("seed", 0)),
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise InvalidArgumentError(f"malformed mixture spec: {exc}") from exc


def demo_mixture_spec(library: SpectralLibrary, seed: int = 0, presence: float = 0.7,
                      noise_sigma=None) -> MixtureSpec:
    """Mixture spec for a demo library: each metabolite present with ``presence``.

    Ranges are drawn once per library (fixed seed) with lower ends of
    15-60 uM and upper ends 3-8 times higher; the reference is always present
    at its known concentration.
    """
    rng = np.random.default_rng(zlib.crc32(library.biofluid.encode()))
    pres, ranges = {}, {}
    for comp in library.compounds:
        if comp.id == library.reference_compound:
            pres[comp.id] = 1.0
            ranges[comp.id] = (library.reference_concentration,) * 2
            continue
        lo = float(rng.uniform(15.0, 60.0))
        hi = lo * float(rng.uniform(3.0, 8.0))
        pres[comp.id] = float(presence)
        ranges[comp.id] = (round(lo, 3), round(hi, 3))
    return MixtureSpec(pres, ranges, noise_sigma, seed)


def default_noise_sigma(library: SpectralLibrary, spec: MixtureSpec,
                        fraction: float = DEFAULT_NOISE_FRACTION) -> float:
    """``fraction`` of the tallest metabolite apex at the middle of its concentration range."""
    best = 0.0
    for comp in library.compounds:
        if comp.id == library.reference_compound or comp.id not in spec.ranges:
            continue
        lo, hi = spec.ranges[comp.id]
        best = max(best, compound_unit_apex(comp) * 0.5 * (lo + hi))
    return fraction * best


# ------------------------------------------------------------ ground truth


@dataclass(frozen=True)
class GroundTruth:
    profile: Profile
    noise_sigma: float
    seed: int

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "noiseSigma": self.noise_sigma,
            "concentrations_uM": dict(self.profile.concentrations),
            "shifts_ppm": dict(self.profile.shifts),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "GroundTruth":
        try:
            prof = Profile({k: float(v) for k, v in doc["concentrations_uM"].items()},
                           {k: float(v) for k, v in doc["shifts_ppm"].items()})
            return cls(prof, float(doc["noiseSigma"]), int(doc["seed"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"malformed ground truth: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "GroundTruth":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidArgumentError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(doc)


def sample_profile(library: SpectralLibrary, spec: MixtureSpec) -> GroundTruth:
    """Draw presence, concentration and cluster shifts for every compound."""
    missing = [c for c in library.compound_ids if c not in spec.presence]
    if missing:
        raise InvalidArgumentError(f"mixture spec lacks compounds {missing}")
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(0,)))
    conc, shifts = {}, {}
    for comp in library.compounds:
        present = rng.random() < spec.presence[comp.id]
        lo, hi = spec.ranges[comp.id]
        x = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
        conc[comp.id] = x if present else 0.0
        for cl in comp.clusters:
            a, b = cl.window
            shifts[cluster_key(comp.id, cl.id)] = float(rng.uniform(a, b)) if b > a else float(a)
    sigma = spec.noise_sigma
    if sigma is None:
        sigma = default_noise_sigma(library, spec)
    return GroundTruth(Profile(conc, shifts), float(sigma), int(spec.seed))


def generate_spectrum(library: SpectralLibrary, truth: GroundTruth, grid: Spectrum = None) -> Spectrum:
    """Render the truth and add i.i.d. Gaussian noise of std ``truth.noise_sigma``."""
    if grid is None:
        grid = make_grid(*DEFAULT_GRID)
    clean = render_mixture(library, truth.profile, grid)
    if truth.noise_sigma == 0:
        return clean
    rng = np.random.default_rng(np.random.SeedSequence(truth.seed, spawn_key=(1,)))
    return clean.with_intensities(clean.intensities + truth.noise_sigma * rng.standard_normal(len(grid)))


# ---------------------------------------------------------------- FIDs


def render_fid(library: SpectralLibrary, profile: Profile, n_points: int = 32768,
               spectrometer_freq: float = DEMO_MHZ, sweep_width: float = 8400.0,
               carrier_ppm: float = 4.7, noise_sigma: float = 0.0, seed: int = 0):
    """Time-domain signal whose transform holds the Lorentzian mixture of ``profile``.

    Each line of height ``a`` and FWHM ``f`` (ppm) becomes a decaying complex
    exponential with time constant ``1 / (pi f_Hz)``; the amplitude is scaled
    so the real channel of the unfilled transform peaks at ``a``.
    """
    from .preprocess import Fid

    dt = 1.0 / sweep_width
    t = np.arange(n_points) * dt
    fid = np.zeros(n_points, dtype=complex)
    for comp in library.compounds:
        x = float(profile.concentrations.get(comp.id, 0.0))
        if x == 0.0:
            continue
        for cl in comp.clusters:
            shift = float(profile.shifts[cluster_key(comp.id, cl.id)])
            for a, c, w in zip(cl.amplitudes, cl.offsets, cl.widths):
                f_hz = (shift + c - carrier_ppm) * spectrometer_freq
                rate = math.pi * math.sqrt(w) * spectrometer_freq
                # the discrete transform of exp(-rate t) peaks at ~1 / (rate dt)
                fid += x * a * rate * dt * np.exp((-rate + 2j * math.pi * f_hz) * t)
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        fid += noise_sigma * (rng.standard_normal(n_points) + 1j * rng.standard_normal(n_points))
    return Fid(fid, dt, spectrometer_freq, sweep_width, carrier_ppm)
