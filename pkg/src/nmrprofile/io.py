"""Reading and writing libraries, spectra and FIDs."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError, LibraryValidationError
from .model import SPECTRUM_DOMAIN, Cluster, Compound, PeakShape, SpectralLibrary, Spectrum

GRID_TOLERANCE = 1e-9


def _num(value, where, errors):
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        errors.append(f"{where}: expected a finite number, got {value!r}")
        return None
    return float(value)


def library_errors_in_doc(doc) -> list:
    """Every schema and invariant violation in a library JSON document."""
    errors = []
    if not isinstance(doc, dict):
        return ["library document must be a JSON object"]
    for key in ("biofluid", "referenceCompound", "referenceConcentration_uM", "compounds"):
        if key not in doc:
            errors.append(f"missing top-level field {key!r}")
    if "referenceConcentration_uM" in doc:
        ref = _num(doc["referenceConcentration_uM"], "referenceConcentration_uM", errors)
        if ref is not None and ref <= 0:
            errors.append("referenceConcentration_uM must be positive")
    raw_compounds = doc.get("compounds", [])
    if not isinstance(raw_compounds, list):
        return errors + ["'compounds' must be a list"]
    compound_ids = []
    for ci, rc in enumerate(raw_compounds):
        if not isinstance(rc, dict):
            errors.append(f"compounds[{ci}]: must be an object")
            continue
        cid = rc.get("id")
        if not isinstance(cid, str) or not cid:
            errors.append(f"compounds[{ci}]: missing or empty 'id'")
            cid = f"#{ci}"
        elif cid in compound_ids:
            errors.append(f"duplicate compound id {cid!r}")
        compound_ids.append(cid)
        cwhere = f"compound {cid!r}"
        detect = _num(rc.get("detectability", 1.0), f"{cwhere} detectability", errors)
        if detect is not None and detect < 1.0:
            errors.append(f"{cwhere}: detectability must be >= 1")
        raw_clusters = rc.get("clusters")
        if not isinstance(raw_clusters, list) or not raw_clusters:
            errors.append(f"{cwhere}: 'clusters' must be a non-empty list")
            continue
        cluster_ids = []
        for ki, rk in enumerate(raw_clusters):
            if not isinstance(rk, dict):
                errors.append(f"{cwhere} clusters[{ki}]: must be an object")
                continue
            kid = rk.get("id")
            if not isinstance(kid, str) or not kid:
                errors.append(f"{cwhere} clusters[{ki}]: missing or empty 'id'")
                kid = f"#{ki}"
            elif kid in cluster_ids:
                errors.append(f"{cwhere}: duplicate cluster id {kid!r}")
            cluster_ids.append(kid)
            kwhere = f"{cwhere} cluster {kid!r}"
            center = _num(rk.get("nominalCenter_ppm"), f"{kwhere} nominalCenter_ppm", errors)
            window = rk.get("window_ppm")
            if not isinstance(window, list) or len(window) != 2:
                errors.append(f"{kwhere}: window_ppm must be [lo, hi]")
            else:
                lo = _num(window[0], f"{kwhere} window_ppm[0]", errors)
                hi = _num(window[1], f"{kwhere} window_ppm[1]", errors)
                if lo is not None and hi is not None:
                    if lo > hi:
                        errors.append(f"{kwhere}: inverted shift window [{lo}, {hi}]")
                    elif center is not None and not (lo - 1e-9 <= center <= hi + 1e-9):
                        errors.append(f"{kwhere}: nominal centre {center} outside window [{lo}, {hi}]")
                    if lo < SPECTRUM_DOMAIN[0] or hi > SPECTRUM_DOMAIN[1]:
                        errors.append(
                            f"{kwhere}: window [{lo}, {hi}] outside spectrum domain "
                            f"{list(SPECTRUM_DOMAIN)}"
                        )
            raw_peaks = rk.get("peaks")
            if not isinstance(raw_peaks, list) or not raw_peaks:
                errors.append(f"{kwhere}: 'peaks' must be a non-empty list")
                continue
            for pi, rp in enumerate(raw_peaks):
                pwhere = f"{kwhere} peaks[{pi}]"
                if not isinstance(rp, dict):
                    errors.append(f"{pwhere}: must be an object")
                    continue
                a = _num(rp.get("amplitude"), f"{pwhere} amplitude", errors)
                _num(rp.get("centerOffset_ppm"), f"{pwhere} centerOffset_ppm", errors)
                w = _num(rp.get("widthParam_ppm2"), f"{pwhere} widthParam_ppm2", errors)
                if a is not None and a <= 0:
                    errors.append(f"{pwhere}: amplitude must be positive")
                if w is not None and w <= 0:
                    errors.append(f"{pwhere}: widthParam_ppm2 must be positive")
    ref = doc.get("referenceCompound")
    if "referenceCompound" in doc and ref not in compound_ids:
        errors.append(f"reference compound {ref!r} not in library")
    return errors


def library_from_dict(doc) -> SpectralLibrary:
    """Build a library from its JSON document, reporting every violation at once."""
    errors = library_errors_in_doc(doc)
    if errors:
        raise LibraryValidationError(errors)
    compounds = []
    for rc in doc["compounds"]:
        clusters = [
            Cluster(
                rk["id"],
                [
                    PeakShape(float(p["amplitude"]), float(p["centerOffset_ppm"]),
                              float(p["widthParam_ppm2"]))
                    for p in rk["peaks"]
                ],
                float(rk["nominalCenter_ppm"]),
                (float(rk["window_ppm"][0]), float(rk["window_ppm"][1])),
            )
            for rk in rc["clusters"]
        ]
        compounds.append(
            Compound(rc["id"], str(rc.get("name", rc["id"])), clusters,
                     float(rc.get("detectability", 1.0)))
        )
    return SpectralLibrary(
        str(doc["biofluid"]), compounds, doc["referenceCompound"],
        float(doc["referenceConcentration_uM"]),
    )


def library_to_dict(library: SpectralLibrary) -> dict:
    return {
        "biofluid": library.biofluid,
        "referenceCompound": library.reference_compound,
        "referenceConcentration_uM": library.reference_concentration,
        "compounds": [
            {
                "id": comp.id,
                "name": comp.name,
                "detectability": comp.detectability,
                "clusters": [
                    {
                        "id": cl.id,
                        "nominalCenter_ppm": cl.nominal_center,
                        "window_ppm": list(cl.window),
                        "peaks": [
                            {
                                "amplitude": p.amplitude,
                                "centerOffset_ppm": p.center,
                                "widthParam_ppm2": p.width,
                            }
                            for p in cl.peaks
                        ],
                    }
                    for cl in comp.clusters
                ],
            }
            for comp in library.compounds
        ],
    }


def load_library(path) -> SpectralLibrary:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LibraryValidationError([f"{path}: not valid JSON ({exc})"]) from exc
    return library_from_dict(doc)


def save_library(library: SpectralLibrary, path) -> None:
    Path(path).write_text(json.dumps(library_to_dict(library), indent=1))


def read_spectrum_csv(path) -> Spectrum:
    """Read a two-column ``ppm,intensity`` CSV; the ppm grid must be uniform."""
    path = Path(path)
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or [c.strip().lower() for c in rows[0]][:2] != ["ppm", "intensity"]:
        raise InvalidArgumentError(f"{path}: expected header 'ppm,intensity'")
    try:
        data = np.array([[float(r[0]), float(r[1])] for r in rows[1:] if r], dtype=float)
    except (ValueError, IndexError) as exc:
        raise InvalidArgumentError(f"{path}: malformed row ({exc})") from exc
    if data.shape[0] < 2:
        raise InvalidArgumentError(f"{path}: need at least two points")
    ppm, values = data[:, 0], data[:, 1]
    if ppm[0] > ppm[-1]:
        ppm, values = ppm[::-1], values[::-1]
    diffs = np.diff(ppm)
    step = (ppm[-1] - ppm[0]) / (ppm.size - 1)
    if step <= 0 or np.max(np.abs(diffs - step)) > GRID_TOLERANCE * max(1.0, abs(ppm).max()):
        raise InvalidArgumentError(f"{path}: ppm grid is not uniform")
    return Spectrum(float(ppm[0]), float(step), values)


def write_spectrum_csv(spectrum: Spectrum, path) -> None:
    values = np.real(spectrum.intensities)
    ppm = spectrum.ppm
    with Path(path).open("w", newline="") as fh:
        fh.write("ppm,intensity\n")
        # tolist() yields Python floats, whose repr round-trips exactly
        for p, v in zip(ppm.tolist(), values.tolist()):
            fh.write(f"{p!r},{v!r}\n")
