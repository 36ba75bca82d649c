"""Detection thresholds and identification / quantification accuracy."""

from __future__ import annotations

import csv
import json
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidArgumentError
from .model import SpectralLibrary, compound_unit_apex

DEFAULT_K = 5.0
DEFAULT_FLOOR_UM = 0.1


@dataclass(frozen=True)
class DetectionThresholds:
    """Per-compound concentration (uM) below which a compound is reported absent."""

    thresholds: dict
    noise_sigma: float
    k: float = DEFAULT_K
    floor: float = DEFAULT_FLOOR_UM

    def __getitem__(self, compound_id: str) -> float:
        return self.thresholds[compound_id]

    def scaled(self, factor: float) -> "DetectionThresholds":
        """Thresholds after every concentration is multiplied by ``factor``."""
        return DetectionThresholds(
            {c: max(t * factor, self.floor) for c, t in self.thresholds.items()},
            self.noise_sigma, self.k, self.floor,
        )


def detection_thresholds(noise, library: SpectralLibrary, k: float = DEFAULT_K,
                         floor: float = DEFAULT_FLOOR_UM) -> DetectionThresholds:
    """``k * sigma * detectability / unit apex`` per compound, never below ``floor``.

    ``noise`` may be a noise estimate or a plain sigma value.
    """
    sigma = float(getattr(noise, "sigma", noise))
    if not (sigma >= 0 and math.isfinite(sigma)):
        raise InvalidArgumentError("noise sigma must be finite and >= 0")
    out = {}
    for comp in library.compounds:
        apex = compound_unit_apex(comp)
        out[comp.id] = max(k * sigma * comp.detectability / apex, floor)
    return DetectionThresholds(out, sigma, k, floor)


def _threshold(thresholds, cid):
    if isinstance(thresholds, DetectionThresholds):
        return thresholds.thresholds[cid]
    return thresholds[cid]


@dataclass
class AccuracyReport:
    identification_accuracy: float
    quantification_error: float
    tp: int
    tn: int
    fp: int
    fn: int
    rows: list = field(default_factory=list)

    @property
    def quantification_accuracy(self) -> float:
        return 1.0 - self.quantification_error if not math.isnan(self.quantification_error) else math.nan

    @property
    def library_size(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self) -> dict:
        qe = self.quantification_error
        return {
            "identificationAccuracy": self.identification_accuracy,
            "quantificationError": None if math.isnan(qe) else qe,
            "quantificationAccuracy": None if math.isnan(qe) else 1.0 - qe,
            "quantificationDefined": not math.isnan(qe),
            "confusion": {"TP": self.tp, "TN": self.tn, "FP": self.fp, "FN": self.fn},
            "compounds": self.rows,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    def save_csv(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["compound", "truth_uM", "est_uM", "threshold_uM", "verdict"])
            for r in self.rows:
                w.writerow([r["compound"], repr(r["truth_uM"]), repr(r["est_uM"]),
                            repr(r["threshold_uM"]), r["verdict"]])


def _concs(profile):
    return getattr(profile, "concentrations", profile)


def identification_accuracy(truth, estimate, thresholds, compounds=None) -> AccuracyReport:
    """Confusion counts and ``(TP + TN) / library size``.

    A compound counts as present on either side when its concentration is at
    least its threshold. ``compounds`` restricts the library (e.g. to leave
    out the reference standard); by default every thresholded compound counts.
    """
    t, e = _concs(truth), _concs(estimate)
    ids = list(compounds) if compounds is not None else list(
        thresholds.thresholds if isinstance(thresholds, DetectionThresholds) else thresholds)
    missing = [c for c in ids if c not in t or c not in e]
    if missing:
        raise InvalidArgumentError(f"truth and estimate do not cover compounds {missing}")
    tp = tn = fp = fn = 0
    rows = []
    for cid in ids:
        thr = _threshold(thresholds, cid)
        a, b = float(t[cid]) >= thr, float(e[cid]) >= thr
        if a and b:
            tp, verdict = tp + 1, "TP"
        elif not a and not b:
            tn, verdict = tn + 1, "TN"
        elif b:
            fp, verdict = fp + 1, "FP"
        else:
            fn, verdict = fn + 1, "FN"
        rows.append({"compound": cid, "truth_uM": float(t[cid]), "est_uM": float(e[cid]),
                     "threshold_uM": float(thr), "verdict": verdict})
    size = len(ids)
    acc = (tp + tn) / size if size else 1.0
    qe = quantification_error(
        {r["compound"]: r["truth_uM"] for r in rows if r["verdict"] == "TP"},
        {r["compound"]: r["est_uM"] for r in rows if r["verdict"] == "TP"},
    )
    return AccuracyReport(acc, qe, tp, tn, fp, fn, rows)


def quantification_error(truth, estimate, compounds=None) -> float:
    """Median of ``|x - x_hat| / max(x, x_hat)``; NaN when there is nothing to compare.

    Pass the true-positive compounds only (``identification_accuracy`` does
    this itself).
    """
    t, e = _concs(truth), _concs(estimate)
    ids = list(compounds) if compounds is not None else [c for c in t if c in e]
    errs = []
    for cid in ids:
        x, xh = float(t[cid]), float(e[cid])
        den = max(x, xh)
        errs.append(0.0 if den == 0 else abs(x - xh) / den)
    return statistics.median(errs) if errs else math.nan


def _two(x: float) -> str:
    """Two decimals without the leading zero, as in ``.98``."""
    s = f"{x:.2f}"
    if s.startswith("0."):
        return s[1:]
    if s.startswith("-0."):
        return "-" + s[2:]
    return s


def format_pm(values) -> str:
    """``mean±std`` of a sample in two-decimal form, e.g. ``.98±.01``."""
    vals = [float(v) for v in values if not math.isnan(float(v))]
    if not vals:
        return "n/a"
    mean = statistics.fmean(vals)
    std = statistics.pstdev(vals) if len(vals) > 1 else 0.0
    return f"{_two(mean)}±{_two(std)}"


def aggregate(reports) -> dict:
    """Mean and spread of a batch of reports, in the two-decimal table style."""
    reports = list(reports)
    ida = [r.identification_accuracy for r in reports]
    qa = [r.quantification_accuracy for r in reports]
    return {
        "samples": len(reports),
        "identificationAccuracy": format_pm(ida),
        "quantificationAccuracy": format_pm(qa),
        "identificationAccuracyMean": statistics.fmean(ida) if ida else math.nan,
        "quantificationAccuracyMean": statistics.fmean([q for q in qa if not math.isnan(q)])
        if any(not math.isnan(q) for q in qa) else None,
    }
