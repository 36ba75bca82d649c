"""From a raw complex FID to a phased, baseline-corrected, referenced spectrum.

Phase convention: a spectrum distorted by ``PhaseParams(phi0, phi1)`` is the
clean spectrum multiplied by ``exp(1j * phi(i))`` with

    phi(i) = phi0 + phi1 * (i / (n - 1) - 0.5)

(degrees, ``i`` indexing the ascending ppm grid), so ``phi1`` is the phase
change across the full sweep and the pivot sits at the centre of the spectrum.
:func:`autophase` estimates the distortion and removes it.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal, sparse
from scipy.interpolate import PchipInterpolator
from scipy.linalg import solveh_banded
from scipy.ndimage import gaussian_filter1d

from .errors import (
    CannotPhaseError,
    DegenerateBaselineError,
    InvalidArgumentError,
    ReferenceNotFoundError,
)
from .model import Spectrum

DEFAULT_CARRIER_PPM = 4.7
DEFAULT_SOLVENT_REGION = (4.5, 4.9)
DEFAULT_REFERENCE_WINDOW = (-0.1, 0.1)
BASELINE_K = 3.0
BASELINE_WINDOW_FRACTION = 0.05
BASELINE_MAX_PASSES = 50
MIN_MASK_FRACTION = 0.01
DEFAULT_WHITTAKER_LAMBDA = 1e7
BASELINE_METHODS = ("whittaker", "hermite")
#: peaks whose magnitude departs further than this from a single line are not used for phasing
MAX_LINESHAPE_MISFIT = 0.05


# --------------------------------------------------------------------------- types


@dataclass(frozen=True, eq=False)
class Fid:
    """Complex time-domain signal.

    ``carrier_ppm`` is the chemical shift of the transmitter frequency, i.e. the
    ppm value that maps to zero offset after the transform.
    """

    samples: np.ndarray
    dwell_time: float
    spectrometer_freq: float
    sweep_width: float
    carrier_ppm: float = DEFAULT_CARRIER_PPM

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=complex)
        if s.ndim != 1 or s.size == 0:
            raise InvalidArgumentError("FID has no samples")
        if not np.all(np.isfinite(s)):
            raise InvalidArgumentError("FID samples must be finite")
        if not (self.dwell_time > 0 and self.spectrometer_freq > 0):
            raise InvalidArgumentError("dwell time and spectrometer frequency must be positive")
        if abs(self.sweep_width * self.dwell_time - 1.0) > 1e-6:
            raise InvalidArgumentError("sweep width must equal 1 / dwell time")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    @property
    def time(self) -> np.ndarray:
        return np.arange(self.samples.size) * self.dwell_time

    def to_dict(self) -> dict:
        return {
            "dwellTime_s": self.dwell_time,
            "spectrometerFreq_MHz": self.spectrometer_freq,
            "sweepWidth_Hz": self.sweep_width,
            "carrierPpm": self.carrier_ppm,
            "samples": [[float(z.real), float(z.imag)] for z in self.samples],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Fid":
        try:
            samples = np.array([complex(re, im) for re, im in doc["samples"]])
            return cls(samples, float(doc["dwellTime_s"]), float(doc["spectrometerFreq_MHz"]),
                       float(doc["sweepWidth_Hz"]), float(doc.get("carrierPpm", DEFAULT_CARRIER_PPM)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"malformed FID document: {exc}") from exc


def load_fid(path) -> Fid:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: not valid JSON ({exc})") from exc
    return Fid.from_dict(doc)


def save_fid(fid: Fid, path) -> None:
    Path(path).write_text(json.dumps(fid.to_dict()))


def _wrap_degrees(a: float) -> float:
    """Map an angle to (-180, 180]."""
    a = math.fmod(a, 360.0)
    if a <= -180.0:
        a += 360.0
    elif a > 180.0:
        a -= 360.0
    return a


@dataclass(frozen=True)
class PhaseParams:
    phi0: float = 0.0
    phi1: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.phi0) and math.isfinite(self.phi1)):
            raise InvalidArgumentError("phase parameters must be finite")
        object.__setattr__(self, "phi0", _wrap_degrees(float(self.phi0)))
        object.__setattr__(self, "phi1", float(self.phi1))

    def to_dict(self) -> dict:
        return {"phi0_deg": self.phi0, "phi1_deg": self.phi1}


@dataclass(frozen=True, eq=False)
class BaselineModel:
    """Fitted baseline: anchors (ppm, intensity) plus the curve on the grid."""

    anchor_points: tuple
    method: str
    smoothing_lambda: float = DEFAULT_WHITTAKER_LAMBDA
    values: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "smoothingLambda": self.smoothing_lambda,
            "anchorPoints": [[float(p), float(v)] for p, v in self.anchor_points],
        }


@dataclass(frozen=True, eq=False)
class NoiseEstimate:
    """Noise standard deviation and the mask of points classified as baseline."""

    sigma: float
    baseline_mask: np.ndarray

    def __post_init__(self):
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise InvalidArgumentError("noise sigma must be finite and >= 0")
        mask = np.asarray(self.baseline_mask, dtype=bool).copy()
        mask.setflags(write=False)
        object.__setattr__(self, "baseline_mask", mask)

    @classmethod
    def constant(cls, sigma: float, n: int) -> "NoiseEstimate":
        return cls(float(sigma), np.ones(n, dtype=bool))

    def with_sigma(self, sigma: float) -> "NoiseEstimate":
        return NoiseEstimate(float(sigma), self.baseline_mask)


# ----------------------------------------------------------------- transform


def zero_fill_transform(fid: Fid, fill_factor: int = 1) -> Spectrum:
    """Fourier transform of the zero-filled FID on an ascending ppm axis.

    The first sample is halved so the real channel carries no constant offset.
    ``fill_factor`` multiplies the number of points and must be a power of two.
    """
    if fill_factor < 1 or (fill_factor & (fill_factor - 1)) != 0:
        raise InvalidArgumentError("fill factor must be a power of two >= 1")
    n = fid.samples.size * int(fill_factor)
    data = np.zeros(n, dtype=complex)
    data[: fid.samples.size] = fid.samples
    data[0] *= 0.5
    spec = np.fft.fftshift(np.fft.fft(data))
    step_hz = fid.sweep_width / n
    start_hz = -(n // 2) * step_hz
    return Spectrum(
        fid.carrier_ppm + start_hz / fid.spectrometer_freq,
        step_hz / fid.spectrometer_freq,
        spec,
    )


# ------------------------------------------------------------------- phasing


def phase_ramp(n: int, params: PhaseParams) -> np.ndarray:
    """Phase in radians at each of ``n`` points."""
    x = np.arange(n) / max(n - 1, 1) - 0.5
    return np.deg2rad(params.phi0 + params.phi1 * x)


def apply_phase(spec: Spectrum, params: PhaseParams) -> Spectrum:
    """Distort a spectrum by ``params`` (multiply by ``exp(+i phi)``)."""
    z = np.asarray(spec.intensities, dtype=complex)
    return spec.with_intensities(z * np.exp(1j * phase_ramp(len(spec), params)))


def correct_phase(spec: Spectrum, params: PhaseParams) -> Spectrum:
    """Undo a distortion ``params`` (multiply by ``exp(-i phi)``)."""
    z = np.asarray(spec.intensities, dtype=complex)
    return spec.with_intensities(z * np.exp(-1j * phase_ramp(len(spec), params)))


@dataclass
class _PeakWindow:
    index: int
    fwhm_pts: float
    z: np.ndarray  # complex samples c - m .. c + m
    x: np.ndarray  # relative sweep position of those samples


def _upsample(z: np.ndarray, factor: int):
    """Band-limited interpolation of a complex spectrum by zero-padding its inverse transform.

    Returns the fine samples and their fractional positions on the original grid.
    """
    n = z.size
    t = np.fft.ifft(np.fft.ifftshift(z))
    padded = np.zeros(n * factor, dtype=complex)
    padded[:n] = t
    fine = np.fft.fftshift(np.fft.fft(padded))
    pos = (np.arange(n * factor) - (n * factor) // 2) / factor + n // 2
    keep = (pos >= 0) & (pos <= n - 1)
    return fine[keep], pos[keep]


def _lineshape_misfit(mag: np.ndarray, fwhm: float) -> float:
    """RMS deviation of a magnitude window from one Lorentzian line, relative to its apex.

    The magnitude of a single line is ``h / sqrt(1 + u^2)`` whatever the
    phase, so this flags windows where neighbouring lines overlap without
    knowing the phase.
    """
    m = (mag.size - 1) // 2
    h = mag[m]
    u = (np.arange(mag.size) - m) / (0.5 * fwhm)
    return float(np.sqrt(np.mean((mag - h / np.sqrt(1.0 + u * u)) ** 2)) / h)


def _find_phase_peaks(z: np.ndarray, pos: np.ndarray, n: int, sigma: float):
    """Peak windows on a (possibly upsampled) complex spectrum.

    ``pos`` gives each sample's fractional index on the original ``n``-point grid.
    """
    mag = np.abs(z)
    m_pts = mag.size
    floor = max(sigma, 1e-12 * float(mag.max(initial=0.0)))
    if floor <= 0:
        raise CannotPhaseError("spectrum is identically zero", noise=sigma)
    idx, props = signal.find_peaks(mag, prominence=5.0 * floor)
    if idx.size == 0:
        raise CannotPhaseError("no peak above five times the noise level", noise=sigma)
    widths = signal.peak_widths(mag, idx, rel_height=0.5)[0]
    # magnitude-mode FWHM of a Lorentzian is sqrt(3) times its absorptive FWHM
    fwhm = np.maximum(widths / math.sqrt(3.0), 1.0)
    strong = props["prominences"] >= 10.0 * floor
    windows = []
    for j in np.flatnonzero(strong):
        c = int(idx[j])
        others = np.delete(idx, j)
        if others.size and np.min(np.abs(others - c)) < 3.0 * fwhm[j]:
            continue
        m = int(math.ceil(2.0 * fwhm[j]))
        if c - m < 0 or c + m >= m_pts:
            continue
        sl = slice(c - m, c + m + 1)
        if _lineshape_misfit(mag[sl], fwhm[j]) > MAX_LINESHAPE_MISFIT:
            continue
        windows.append(_PeakWindow(c, float(fwhm[j]), z[sl], pos[sl] / max(n - 1, 1) - 0.5))
    # every detected peak, isolated or not, for the fallback objective
    all_windows = []
    for j, c in enumerate(idx):
        m = int(math.ceil(2.0 * fwhm[j]))
        lo, hi = max(c - m, 0), min(c + m + 1, m_pts)
        all_windows.append(_PeakWindow(int(c), float(fwhm[j]), z[lo:hi],
                                       pos[lo:hi] / max(n - 1, 1) - 0.5))
    return windows, all_windows


def _rotated_real(win: _PeakWindow, phi0: np.ndarray, phi1: np.ndarray) -> np.ndarray:
    ph = np.deg2rad(phi0[:, None] + phi1[:, None] * win.x[None, :])
    return win.z.real[None, :] * np.cos(ph) + win.z.imag[None, :] * np.sin(ph)


def _symmetry_objective(windows, phi0, phi1):
    """Mean peak-symmetry score minus the negative-lobe fraction, per candidate."""
    score = np.zeros(phi0.size)
    neg = np.zeros(phi0.size)
    for win in windows:
        L = _rotated_real(win, phi0, phi1)
        m = (L.shape[1] - 1) // 2
        right = L[:, m + 1:]
        left = L[:, m - 1::-1]
        num = np.abs(right - left).sum(axis=1)
        den = (np.abs(right) + np.abs(left)).sum(axis=1)
        score += 1.0 - num / np.maximum(den, 1e-300)
        absL = np.abs(L).sum(axis=1)
        neg += np.maximum(-L, 0.0).sum(axis=1) / np.maximum(absL, 1e-300)
    k = len(windows)
    return score / k - neg / k


def _integral_objective(windows, phi0, phi1):
    """Fallback: positive real area with negative excursions penalized."""
    pos = np.zeros(phi0.size)
    total = 0.0
    for win in windows:
        L = _rotated_real(win, phi0, phi1)
        pos += L.sum(axis=1) - 3.0 * np.maximum(-L, 0.0).sum(axis=1)
        total += np.abs(win.z).sum()
    return pos / max(total, 1e-300)


def cross_entropy_maximize(objective, low, high, rng, population=200, elite_fraction=0.1,
                           max_iter=50, tol=0.1, circular=(True, False)):
    """Cross-entropy search for the maximum of a vectorized objective.

    ``objective`` maps arrays ``(p0, p1)`` of candidates to scores. Dimensions
    flagged ``circular`` are angles in degrees; their elite mean is taken on
    the circle so a population straddling +-180 is handled.

    Returns ``(best, iterations, converged)``.
    """
    low = np.asarray(low, dtype=float)
    high = np.asarray(high, dtype=float)
    dim = low.size
    n_elite = max(2, int(round(elite_fraction * population)))
    cand = rng.uniform(low, high, size=(population, dim))
    best, best_val = None, -np.inf
    mean = std = None
    for it in range(1, max_iter + 1):
        vals = objective(*cand.T)
        order = np.argsort(-vals, kind="stable")
        elite = cand[order[:n_elite]]
        if vals[order[0]] > best_val:
            best_val, best = float(vals[order[0]]), cand[order[0]].copy()
        mean = np.empty(dim)
        std = np.empty(dim)
        for d in range(dim):
            e = elite[:, d]
            if circular[d]:
                r = np.deg2rad(e)
                mu = math.degrees(math.atan2(np.sin(r).mean(), np.cos(r).mean()))
                e = mu + (e - mu + 180.0) % 360.0 - 180.0
            mean[d] = e.mean()
            std[d] = e.std()
        if np.all(std < tol):
            return mean, it, True
        cand = mean + std * rng.standard_normal((population, dim))
        for d in range(dim):
            if not circular[d]:
                cand[:, d] = np.clip(cand[:, d], low[d], high[d])
    return (best if best is not None else mean), max_iter, False


def autophase(spec: Spectrum, noise: NoiseEstimate = None, seed: int = 0,
              population: int = 200, elite_fraction: float = 0.1, max_iter: int = 50,
              tol: float = 0.1, upsample: int = 8):
    """Estimate zero- and first-order phase distortion and return the phased real spectrum.

    Isolated peaks are located on the magnitude spectrum, which does not depend
    on phase. With three or more of them the objective is their mean
    symmetry about the apex; otherwise the positive real area of all peaks is
    maximized (with ``phi1`` fixed to 0 when only one peak is present).
    Symmetry is judged on an ``upsample``-times finer band-limited
    interpolation so apexes falling between grid points do not bias the result.

    Returns
    -------
    (PhaseParams, Spectrum)
        The estimated distortion and the corrected real spectrum.
    """
    if noise is None:
        mag = spec.with_intensities(np.abs(np.asarray(spec.intensities, dtype=complex)))
        noise = detect_baseline(mag)
    z = np.asarray(spec.intensities, dtype=complex)
    if upsample > 1:
        fine, pos = _upsample(z, int(upsample))
    else:
        fine, pos = z, np.arange(z.size, dtype=float)
    windows, all_windows = _find_phase_peaks(fine, pos, z.size, noise.sigma)
    rng = np.random.default_rng(seed)
    if len(windows) >= 3:
        obj = lambda p0, p1: _symmetry_objective(windows, p0, p1)  # noqa: E731
        fit_phi1 = True
    else:
        obj = lambda p0, p1: _integral_objective(all_windows, p0, p1)  # noqa: E731
        fit_phi1 = len(all_windows) > 1
    if fit_phi1:
        best, _, _ = cross_entropy_maximize(obj, [-180.0, -180.0], [180.0, 180.0], rng,
                                            population, elite_fraction, max_iter, tol)
        params = PhaseParams(best[0], best[1])
    else:
        obj1 = lambda p0: obj(p0, np.zeros_like(p0))  # noqa: E731
        best, _, _ = cross_entropy_maximize(obj1, [-180.0], [180.0], rng, population,
                                            elite_fraction, max_iter, tol, circular=(True,))
        params = PhaseParams(best[0], 0.0)
    return params, correct_phase(spec, params).real()


# ------------------------------------------------------------------ baseline


def _moving_median(y: np.ndarray, mask: np.ndarray, window: int) -> np.ndarray:
    """Local median of masked points, by half-overlapping blocks interpolated linearly."""
    n = y.size
    half = max(window // 2, 1)
    starts = np.arange(0, n, half)
    centres, meds = [], []
    for s in starts:
        seg = y[s: s + window][mask[s: s + window]]
        if seg.size:
            centres.append(min(s + window / 2.0, (s + n) / 2.0))
            meds.append(np.median(seg))
    if not meds:
        return np.zeros(n)
    return np.interp(np.arange(n), centres, meds)


def detect_baseline(spec: Spectrum, k: float = BASELINE_K,
                    window_fraction: float = BASELINE_WINDOW_FRACTION) -> NoiseEstimate:
    """Classify baseline points by iterative thresholding and estimate the noise level.

    Points within ``k * sigma`` of a moving-median local baseline are baseline;
    sigma is re-estimated from them and the pass repeated until the mask stops
    changing. Excluded points never count as baseline.
    """
    y = np.real(np.asarray(spec.intensities))
    n = y.size
    if n < 64:
        raise InvalidArgumentError("baseline detection needs at least 64 points")
    allowed = spec.included
    window = max(5, int(round(window_fraction * n)))
    mask = allowed.copy()
    for _ in range(BASELINE_MAX_PASSES):
        if mask.sum() < max(1, MIN_MASK_FRACTION * n):
            raise DegenerateBaselineError("baseline mask collapsed below 1% of points")
        local = _moving_median(y, mask, window)
        sigma = float(np.std((y - local)[mask]))
        new = allowed & (np.abs(y - local) <= k * sigma)
        if np.array_equal(new, mask):
            break
        mask = new
    if mask.sum() < max(1, MIN_MASK_FRACTION * n):
        raise DegenerateBaselineError("baseline mask collapsed below 1% of points")
    local = _moving_median(y, mask, window)
    return NoiseEstimate(float(np.std((y - local)[mask])), mask)


def _runs(mask: np.ndarray):
    """Start/stop indices of contiguous True runs."""
    d = np.diff(np.concatenate([[0], mask.astype(np.int8), [0]]))
    return np.flatnonzero(d == 1), np.flatnonzero(d == -1)


def _hermite_anchors(ppm, y, mask, max_run):
    anchors = []
    for a, b in zip(*_runs(mask)):
        for s in range(a, b, max_run):
            e = min(s + max_run, b)
            anchors.append((float(ppm[s:e].mean()), float(y[s:e].mean())))
    return anchors


def _whittaker(y, w, lam):
    """Weighted second-difference Whittaker smoother, solved as a banded system."""
    n = y.size
    D = sparse.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(n - 2, n))
    A = (lam * (D.T @ D)).todia()
    ab = np.zeros((3, n))
    for off in range(3):
        diag = A.diagonal(off)
        ab[2 - off, off:] = diag
    ab[2] += w
    return solveh_banded(ab, w * y)


def correct_baseline(spec: Spectrum, noise: NoiseEstimate, method: str = "whittaker",
                     smoothing_lambda: float = DEFAULT_WHITTAKER_LAMBDA,
                     max_run_fraction: float = 0.01):
    """Fit a baseline through the masked points and subtract it.

    ``whittaker`` smooths with weight 1 on baseline points and 0 elsewhere.
    ``hermite`` interpolates monotone cubic pieces through the centroids of
    contiguous baseline runs; runs longer than ``max_run_fraction`` of the
    spectrum are split so long flat stretches still follow slow curvature.
    """
    if method not in BASELINE_METHODS:
        raise InvalidArgumentError(f"unknown baseline method {method!r}")
    if not (smoothing_lambda > 0):
        raise InvalidArgumentError("smoothing lambda must be positive")
    y = np.real(np.asarray(spec.intensities))
    mask = np.asarray(noise.baseline_mask, dtype=bool)
    if mask.shape != y.shape or not mask.any():
        raise InvalidArgumentError("baseline mask does not match the spectrum")
    ppm = spec.ppm
    max_run = max(2, int(max_run_fraction * y.size))
    if method == "whittaker":
        base = _whittaker(y, mask.astype(float), smoothing_lambda)
        anchors = [(p, float(np.interp(p, ppm, base)))
                   for p, _ in _hermite_anchors(ppm, y, mask, max_run)]
    else:
        anchors = _hermite_anchors(ppm, y, mask, max_run)
        if len(anchors) == 1:
            base = np.full(y.size, anchors[0][1])
        else:
            xs = np.array([a[0] for a in anchors])
            ys = np.array([a[1] for a in anchors])
            base = PchipInterpolator(xs, ys, extrapolate=False)(ppm)
            base[ppm < xs[0]] = ys[0]
            base[ppm > xs[-1]] = ys[-1]
    model = BaselineModel(tuple(anchors), method, float(smoothing_lambda), base)
    return spec.with_intensities(y - base), model


# -------------------------------------------------------------- referencing


def _parabolic_apex(y: np.ndarray, i: int) -> tuple:
    """Sub-grid offset (in points) and height of the parabola through ``i-1, i, i+1``."""
    if i <= 0 or i >= y.size - 1:
        return 0.0, float(y[i])
    a, b, c = y[i - 1], y[i], y[i + 1]
    den = a - 2.0 * b + c
    if den >= 0:
        return 0.0, float(b)
    off = 0.5 * (a - c) / den
    return float(off), float(b - 0.25 * (a - c) * off)


def reference_shift(spec: Spectrum, ref_window=DEFAULT_REFERENCE_WINDOW,
                    noise: NoiseEstimate = None):
    """Translate the ppm axis so the reference singlet apex sits at 0 ppm.

    The tallest local maximum in ``ref_window`` at least ten times the noise
    level is the reference (ties go to the one nearer 0 ppm). Returns the new
    spectrum and the offset added to the axis.
    """
    lo, hi = ref_window
    if lo > hi:
        raise InvalidArgumentError("inverted reference window")
    y = np.real(np.asarray(spec.intensities))
    if noise is None:
        noise = detect_baseline(spec.real())
    a, b = spec.index_range(lo, hi)
    b = min(b + 1, y.size)
    idx, _ = signal.find_peaks(y)
    idx = idx[(idx >= a) & (idx < b)]
    cand = []
    ppm = spec.ppm
    for i in idx:
        off, height = _parabolic_apex(y, int(i))
        pos = ppm[i] + off * spec.step
        if height >= 10.0 * noise.sigma and height > 0 and lo <= pos <= hi:
            cand.append((height, pos))
    if not cand:
        raise ReferenceNotFoundError(f"no reference peak in window [{lo}, {hi}]")
    top = max(h for h, _ in cand)
    tied = [c for c in cand if c[0] >= top * (1.0 - 1e-12)]
    _, pos = min(tied, key=lambda c: abs(c[1]))
    offset = -pos
    return Spectrum(spec.start + offset, spec.step, spec.intensities, spec.excluded), offset


# ------------------------------------------------------------ solvent, smooth


def exclude_solvent(spec: Spectrum, region=DEFAULT_SOLVENT_REGION) -> Spectrum:
    """Flag grid points ``lo <= y < hi`` as excluded from every loss integral."""
    lo, hi = float(region[0]), float(region[1])
    if lo > hi:
        raise InvalidArgumentError("inverted solvent region")
    a, b = spec.index_range(lo, hi)
    mask = np.zeros(len(spec), dtype=bool) if spec.excluded is None else spec.excluded.copy()
    mask[a:b] = True
    if mask.all():
        raise InvalidArgumentError("solvent exclusion would remove every point")
    return spec.with_intensities(spec.intensities, excluded=mask)


def excluded_intervals(spec: Spectrum) -> list:
    """Excluded stretches as ``[lo, hi)`` ppm intervals."""
    if spec.excluded is None:
        return []
    ppm = spec.ppm
    out = []
    for a, b in zip(*_runs(spec.excluded)):
        hi = ppm[b] if b < ppm.size else spec.stop + spec.step
        out.append([float(ppm[a]), float(hi)])
    return out


def smooth(spec: Spectrum, method: str = "savitzky_golay", window: int = 11, order: int = 3,
           sigma_ppm: float = 0.001) -> Spectrum:
    """Savitzky-Golay or Gaussian smoothing of the real spectrum."""
    y = np.real(np.asarray(spec.intensities))
    if method == "savitzky_golay":
        if window < 1 or window % 2 == 0 or not (0 <= order < window) or window > y.size:
            raise InvalidArgumentError("Savitzky-Golay needs an odd window > order")
        out = signal.savgol_filter(y, window, order, mode="interp")
    elif method == "gaussian":
        if not (sigma_ppm > 0):
            raise InvalidArgumentError("Gaussian sigma must be positive")
        out = gaussian_filter1d(y, sigma_ppm / spec.step, mode="nearest")
    else:
        raise InvalidArgumentError(f"unknown smoothing filter {method!r}")
    return spec.with_intensities(out)
