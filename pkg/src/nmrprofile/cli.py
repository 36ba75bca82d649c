"""Command-line front end: ``nmrprofile {profile,preprocess,synth,eval,library-validate}``.

Exit codes: 0 success, 2 invalid input or configuration, 3 failure inside
the pipeline. Errors are reported as one line on stderr.

Package modules are imported lazily so ``--threads`` can size the compiled
kernel's thread pool before it starts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

EXIT_OK, EXIT_INVALID, EXIT_PIPELINE = 0, 2, 3
MANIFEST = "run-manifest.json"

log = logging.getLogger("nmrprofile")


class UsageError(Exception):
    """Bad command-line or configuration input (exit 2)."""


# ------------------------------------------------------------------ logging


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name,
                           "message": record.getMessage()})


def _setup_logging(args):
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if args.json_logs else logging.Formatter("%(message)s"))
    root = logging.getLogger("nmrprofile")
    root.handlers[:] = [handler]
    root.propagate = False
    root.setLevel(logging.WARNING if args.quiet else logging.INFO)


def _report_error(args, code: int, exc: BaseException):
    kind = type(exc).__name__
    msg = str(exc).replace("\n", " ")
    if getattr(args, "json_logs", False):
        line = json.dumps({"level": "error", "exit": code, "error": kind, "message": msg})
    else:
        line = f"nmrprofile: error[{code}] {kind}: {msg}"
    print(line, file=sys.stderr)


def _configure_threads(n):
    """Size the kernel thread pool; outputs never depend on it."""
    if n is None:
        return
    if n < 1:
        raise UsageError("--threads must be >= 1")
    if "numba" not in sys.modules:
        os.environ["NUMBA_NUM_THREADS"] = str(n)
        return
    import numba

    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ------------------------------------------------------------------- inputs


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _load_library(source: str):
    if not source:
        raise UsageError("no library given (use --library PATH or demo:NAME)")
    if source.startswith("demo:"):
        from .synth import demo_library

        try:
            return demo_library(source[5:])
        except Exception as exc:
            raise UsageError(str(exc)) from exc
    path = Path(source)
    if not path.is_file():
        raise UsageError(f"library file not found: {path}")
    from .io import load_library

    return load_library(path)


def _input_kind(path: Path, kind: str) -> str:
    if kind != "auto":
        return kind
    return "fid" if path.suffix.lower() == ".json" else "spectrum"


def _read_input(path: Path, kind: str):
    if not path.is_file():
        raise UsageError(f"input file not found: {path}")
    if kind == "fid":
        from .preprocess import load_fid

        return load_fid(path)
    from .io import read_spectrum_csv

    return read_spectrum_csv(path)


def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".fid.json", ".json", ".csv"):
        if name.lower().endswith(suffix):
            return name[: -len(suffix)]
    return path.stem


def _read_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: not valid JSON ({exc})") from exc
    # a run manifest carries its effective config under "config"
    if isinstance(doc, dict) and "config" in doc and isinstance(doc["config"], dict):
        doc = doc["config"]
    if not isinstance(doc, dict):
        raise UsageError(f"{p}: config must be a JSON object")
    return doc


# ------------------------------------------------------------------- config


def _merge_run_config(args) -> dict:
    """Config file overlaid with explicit flags; the result is written to the manifest."""
    cfg = _read_config(args.config)
    cfg = json.loads(json.dumps(cfg))
    if args.library is not None:
        cfg["library"] = args.library
    if args.inputs:
        cfg["inputs"] = [str(p) for p in args.inputs]
    if args.kind is not None:
        cfg["inputKind"] = args.kind
    if args.out is not None:
        cfg["outputDir"] = str(args.out)
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg.setdefault("inputKind", "auto")
    cfg.setdefault("outputDir", ".")
    cfg.setdefault("seed", 0)
    pre = cfg.setdefault("preprocess", {})
    for flag, key in (("phase", "phase"), ("baseline", "baseline"), ("reference", "reference")):
        val = getattr(args, flag, None)
        if val is not None:
            pre[key] = val
    if getattr(args, "baseline_method", None):
        pre["baselineMethod"] = args.baseline_method
    if getattr(args, "no_solvent", False):
        pre["solventRegion"] = None
    elif getattr(args, "solvent", None) is not None:
        pre["solventRegion"] = list(args.solvent)
    inf = cfg.setdefault("infer", {})
    if getattr(args, "fast", False):
        inf["N"] = 1000
    if getattr(args, "particles", None) is not None:
        inf["N"] = args.particles
    if getattr(args, "max_iterations", None) is not None:
        inf["maxIterations"] = args.max_iterations
    cfg.setdefault("loss", {})
    cfg.setdefault("schedule", {})
    if "inputs" not in cfg or not cfg["inputs"]:
        raise UsageError("no input files given")
    return cfg


def _build_configs(cfg: dict):
    from .errors import ProfilingError
    from .infer import InferConfig
    from .loss import LossConfig
    from .pipeline import PreprocessConfig, ScheduleConfig

    try:
        seed = int(cfg["seed"])
        if not (0 <= seed < 2 ** 64):
            raise UsageError("seed must be a 64-bit unsigned integer")
        pre = PreprocessConfig.from_dict(cfg["preprocess"])
        loss = LossConfig.from_dict(cfg["loss"])
        inf_doc = dict(cfg["infer"])
        inf_doc["seed"] = seed
        inf_doc["loss"] = loss.to_dict()
        inf = InferConfig.from_dict(inf_doc)
        sched = ScheduleConfig.from_dict(cfg["schedule"])
    except (ProfilingError, TypeError, ValueError, KeyError) as exc:
        if isinstance(exc, UsageError):
            raise
        raise UsageError(f"invalid configuration: {exc}") from exc
    return pre, inf, sched


def _effective(cfg, pre, inf, sched) -> dict:
    out = dict(cfg)
    out["preprocess"] = pre.to_dict()
    doc = inf.to_dict()
    out["loss"] = doc.pop("loss")
    doc.pop("seed")
    out["infer"] = doc
    out["schedule"] = sched.to_dict()
    return out


def _write_manifest(outdir: Path, command: str, cfg: dict, inputs, outputs, threads, started):
    from . import __version__

    doc = {
        "tool": "nmrprofile",
        "version": __version__,
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in inputs],
        "outputs": sorted(outputs),
        "threads": threads,
        "wallTime_s": round(time.time() - started, 3),
    }
    lib = cfg.get("library", "")
    if lib and not lib.startswith("demo:") and Path(lib).is_file():
        doc["librarySha256"] = _sha256(lib)
    (outdir / MANIFEST).write_text(json.dumps(doc, indent=1))


# ----------------------------------------------------------------- commands


def cmd_profile(args) -> int:
    started = time.time()
    cfg = _merge_run_config(args)
    pre, inf, sched = _build_configs(cfg)
    library = _load_library(cfg.get("library"))
    inputs = [Path(p) for p in cfg["inputs"]]
    for p in inputs:
        if not p.is_file():
            raise UsageError(f"input file not found: {p}")
    outdir = Path(cfg["outputDir"])
    outdir.mkdir(parents=True, exist_ok=True)
    from .io import write_spectrum_csv
    from .pipeline import profile

    outputs = []
    for path in inputs:
        data = _read_input(path, _input_kind(path, cfg["inputKind"]))
        stem = _stem(path)
        log.info("profiling %s (%d particles)", path, inf.n_particles)
        t0 = time.time()

        def progress(t, T, best):
            log.debug("  iteration %d  T=%.4g  best loss=%.6g", t, T, best)

        res = profile(data, library, pre, inf, sched, progress=progress)
        sol = res.solution
        sol.diagnostics["preprocessing"] = res.preprocessing
        files = {
            f"{stem}.solution.json": lambda p: sol.save(p),
            f"{stem}.processed.csv": lambda p: write_spectrum_csv(res.processed, p),
            f"{stem}.regions.json": lambda p: p.write_text(json.dumps(res.regions, indent=1)),
        }
        for name, write in files.items():
            write(outdir / name)
            outputs.append(name)
        n_det = sum(sol.profile.detected.values())
        log.info("  %s: %d compounds detected, loss %.6g, %d iterations%s (%.1f s)", stem, n_det,
                 sol.final_loss, sol.iterations, "" if sol.converged else ", not converged",
                 time.time() - t0)
    _write_manifest(outdir, "profile", _effective(cfg, pre, inf, sched), inputs, outputs,
                    args.threads, started)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    started = time.time()
    cfg = _merge_run_config(args)
    pre, inf, sched = _build_configs(cfg)
    inputs = [Path(p) for p in cfg["inputs"]]
    outdir = Path(cfg["outputDir"])
    outdir.mkdir(parents=True, exist_ok=True)
    from .io import write_spectrum_csv
    from .pipeline import preprocess_input

    outputs = []
    for path in inputs:
        data = _read_input(path, _input_kind(path, cfg["inputKind"]))
        stem = _stem(path)
        res = preprocess_input(data, pre, inf.seed)
        write_spectrum_csv(res.spectrum, outdir / f"{stem}.processed.csv")
        (outdir / f"{stem}.preprocess.json").write_text(json.dumps(res.info, indent=1))
        outputs += [f"{stem}.processed.csv", f"{stem}.preprocess.json"]
        phase = res.info.get("phase")
        if phase:
            log.info("%s: phi0=%.2f deg, phi1=%.2f deg", stem, phase["phi0_deg"], phase["phi1_deg"])
        if "referenceOffset_ppm" in res.info:
            log.info("%s: reference offset %.5f ppm", stem, res.info["referenceOffset_ppm"])
        log.info("%s: noise sigma %.4g", stem, res.info["noise"]["sigma"])
    _write_manifest(outdir, "preprocess", _effective(cfg, pre, inf, sched), inputs, outputs,
                    args.threads, started)
    return EXIT_OK


def cmd_synth(args) -> int:
    from .synth import (MixtureSpec, demo_mixture_spec, generate_spectrum,
                        render_fid, sample_profile)
    from .io import write_spectrum_csv
    from .preprocess import save_fid

    if args.count < 0:
        raise UsageError("--count must be >= 0")
    library = _load_library(args.library)
    if args.mixture is not None:
        p = Path(args.mixture)
        if not p.is_file():
            raise UsageError(f"mixture spec not found: {p}")
        try:
            spec = MixtureSpec.from_dict(json.loads(p.read_text()))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise UsageError(f"{p}: malformed mixture spec ({exc})") from exc
    else:
        spec = demo_mixture_spec(library, presence=args.presence)
    if args.noiseless:
        spec = spec.with_noise(0.0)
    elif args.noise_sigma is not None:
        spec = spec.with_noise(args.noise_sigma)
    if args.count == 0:
        return EXIT_OK
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    for i in range(args.count):
        truth = sample_profile(library, spec.with_seed(args.seed + i))
        stem = f"{args.prefix}-{i:03d}"
        if args.fid:
            fid = render_fid(library, truth.profile, noise_sigma=truth.noise_sigma, seed=args.seed + i)
            save_fid(fid, outdir / f"{stem}.fid.json")
        else:
            write_spectrum_csv(generate_spectrum(library, truth), outdir / f"{stem}.csv")
        truth.save(outdir / f"{stem}.json")
        log.info("wrote %s", stem)
    return EXIT_OK


def _truth_files(d: Path) -> dict:
    out = {}
    for p in sorted(d.glob("*.json")):
        if p.name.endswith(".solution.json") or p.name == MANIFEST:
            continue
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError:
            continue
        if isinstance(doc, dict) and "concentrations_uM" in doc:
            out[_stem(p)] = p
    return out


def cmd_eval(args) -> int:
    from .infer import Solution
    from .metrics import aggregate, identification_accuracy
    from .synth import GroundTruth

    tdir, sdir = Path(args.truth_dir), Path(args.solution_dir)
    for d in (tdir, sdir):
        if not d.is_dir():
            raise UsageError(f"not a directory: {d}")
    truths = _truth_files(tdir)
    sols = {p.name[: -len(".solution.json")]: p for p in sorted(sdir.glob("*.solution.json"))}
    if not truths and not sols:
        raise UsageError("no truth or solution files found")
    orphans = sorted(set(truths) ^ set(sols))
    if orphans:
        raise UsageError("unpaired files: " + ", ".join(orphans))
    outdir = Path(args.out) if args.out else sdir
    outdir.mkdir(parents=True, exist_ok=True)
    reports = {}
    for stem in sorted(truths):
        truth = GroundTruth.load(truths[stem])
        sol = Solution.load(sols[stem])
        ids = [c for c in sol.thresholds if c != sol.reference]
        thr = {c: float(sol.thresholds[c]) for c in ids}
        rep = identification_accuracy(truth.profile, sol.profile, thr, compounds=ids)
        rep.save(outdir / f"{stem}.report.json")
        rep.save_csv(outdir / f"{stem}.report.csv")
        reports[stem] = rep
        qa = rep.quantification_accuracy
        log.info("%s: identification %.3f, quantification %s", stem, rep.identification_accuracy,
                 "n/a" if qa != qa else f"{qa:.3f}")
    summary = aggregate(reports.values())
    summary["perSample"] = {k: {"identificationAccuracy": r.identification_accuracy,
                                "quantificationAccuracy": r.to_dict()["quantificationAccuracy"]}
                            for k, r in reports.items()}
    (outdir / "summary.json").write_text(json.dumps(summary, indent=1))
    print(f"samples {summary['samples']}  identification {summary['identificationAccuracy']}"
          f"  quantification {summary['quantificationAccuracy']}")
    return EXIT_OK


def cmd_library_validate(args) -> int:
    from .errors import LibraryValidationError

    try:
        lib = _load_library(args.path)
    except LibraryValidationError as exc:
        for err in exc.errors:
            print(f"invalid: {err}", file=sys.stderr)
        raise
    stats = lib.stats()
    print(f"ok: {stats['compounds']} compounds, {stats['clusters']} clusters, {stats['peaks']} peaks"
          f" (reference {lib.reference_compound} excluded)")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def _add_common(p):
    p.add_argument("--seed", type=int, default=None, help="master random seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="kernel worker threads; results do not depend on it")
    p.add_argument("--quiet", action="store_true", help="only warnings and errors")
    p.add_argument("--json-logs", action="store_true", help="log one JSON object per line")


def _add_run(p):
    p.add_argument("inputs", nargs="*", type=Path, help="spectrum CSV or FID JSON files")
    p.add_argument("--library", help="library JSON path or demo:csf48 / demo:mix15")
    p.add_argument("--config", help="JSON run config (or a previous run-manifest.json)")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--kind", choices=("auto", "fid", "spectrum"), default=None)
    for name in ("phase", "baseline", "reference"):
        p.add_argument(f"--{name}", dest=name, action="store_true", default=None)
        p.add_argument(f"--no-{name}", dest=name, action="store_false")
    p.add_argument("--baseline-method", choices=("whittaker", "hermite"))
    p.add_argument("--solvent", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--no-solvent", action="store_true", help="keep the solvent region")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="nmrprofile", description="Automated profiling of 1D NMR spectra.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("profile", help="preprocess, deconvolve and quantify")
    _add_run(p)
    p.add_argument("--fast", action="store_true", help="1000 particles instead of 10000")
    p.add_argument("--particles", type=int)
    p.add_argument("--max-iterations", type=int)
    _add_common(p)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("preprocess", help="preprocessing only")
    _add_run(p)
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("synth", help="generate synthetic mixtures with ground truth")
    p.add_argument("--library", default="demo:csf48")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--out", type=Path, default=Path("."))
    p.add_argument("--prefix", default="sample")
    p.add_argument("--mixture", help="mixture spec JSON (default: the library's demo spec)")
    p.add_argument("--presence", type=float, default=0.7)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--noiseless", action="store_true")
    p.add_argument("--fid", action="store_true", help="write time-domain FIDs instead of spectra")
    _add_common(p)
    p.set_defaults(func=cmd_synth, seed=0)

    p = sub.add_parser("eval", help="score solutions against ground truth")
    p.add_argument("truth_dir")
    p.add_argument("solution_dir")
    p.add_argument("--out", help="report directory (default: the solution directory)")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("library-validate", help="check a library file")
    p.add_argument("path")
    _add_common(p)
    p.set_defaults(func=cmd_library_validate)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    _setup_logging(args)
    try:
        _configure_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        _report_error(args, EXIT_INVALID, exc)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - mapped to exit codes below
        from .errors import InvalidArgumentError, LibraryValidationError, ProfilingError

        if isinstance(exc, (InvalidArgumentError, LibraryValidationError)):
            _report_error(args, EXIT_INVALID, exc)
            return EXIT_INVALID
        if isinstance(exc, (ProfilingError, ValueError, OSError)):
            _report_error(args, EXIT_PIPELINE, exc)
            return EXIT_PIPELINE
        raise


if __name__ == "__main__":
    sys.exit(main())
