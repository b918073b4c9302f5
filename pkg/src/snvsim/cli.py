"""Command-line front end.

Every command reads a run config, writes plain CSV/JSON next to a
``manifest.json`` that records the hashes of all inputs and outputs, and
returns one of the exit codes below.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import inspect
import json
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from ._kvfile import ConfigError, parse_blocks
from .analysis import (
    ExponentialDecayFit,
    GatingRules,
    PeakNotFound,
    fit_exp_decay,
    fit_linear,
    fit_lorentzian,
    fit_recovery_steps,
)
from .calibrate import CalibrationError, calibrate_file, read_targets_file, verify
from .kinetics import TimescaleSeparationViolated, read_emitter_file, write_emitter_file
from .ple import generate_ple, max_spectrum, mean_spectrum, scan_statistics, terminated_then_complete
from .pulses import SCAN_MODES, ScanConfig, canonical_sequences, read_sequence_file, serialize_sequence
from .ssa import read_trace_csv, simulate_ensemble

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CALIBRATION = 4

OUT_ENV = "SNVSIM_OUT"
DEFAULT_OUT = "snvsim_out"

# override key -> (builder kwarg, scale from file unit to SI)
_OVERRIDES = {
    "res_power_nW": ("res_power", 1e-9),
    "green_power_uW": ("green_power", 1e-6),
    "init_green_power_uW": ("init_green_power", 1e-6),
    "detuning_MHz": ("detuning", 1e6),
    "duration_ms": ("duration", 1e-3),
    "tail_ms": ("tail", 1e-3),
    "init_duration_ms": ("init_duration", 1e-3),
    "readout_ms": ("readout", 1e-3),
    "pulse_ms": ("pulse", 1e-3),
    "final_green_ms": ("final_green", 1e-3),
    "green_duration_ms": ("green_duration", 1e-3),
    "pump_duration_ms": ("pump_duration", 1e-3),
    "bin_width_us": ("bin_width", 1e-6),
    "repetitions": ("repetitions", None),
    "n_pulses": ("n_pulses", None),
    "n_blocks": ("n_blocks", None),
    "dark_start": ("dark_start", bool),
}
_SWEEP_AXES = {"res_power": ("res_power_nW", 1e-9, "nW"), "green_power": ("green_power_uW", 1e-6, "uW")}
_RUN_KEYS = ("emitter", "sequence", "seed", "out", "formats", "method", "threads")
_FORMATS = ("csv", "json", "gnuplot")


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


@dataclass
class RunConfig:
    """Parsed run config; paths are resolved against the config's directory."""

    path: Path
    emitter_path: Path | None
    sequence: str | None
    sequence_path: Path | None
    seed: int | None
    out: Path | None
    formats: tuple
    method: str
    threads: int
    overrides: dict = field(default_factory=dict)
    blocks: dict = field(default_factory=dict)

    def inputs(self):
        files = [self.path, self.emitter_path, self.sequence_path]
        return {str(p.name): _sha(p) for p in files if p is not None}


def read_run_config(path):
    """Schema::

        [run]        emitter, sequence (file or canonical name), seed, out,
                     formats (csv, json, gnuplot), method, threads
        [overrides]  unit-suffixed builder arguments for canonical sequences
        [sweep]      axis, values, observable, fit_min, fit_max
        [ple]        mode, n_scans, f_min_MHz, f_max_MHz, step_MHz, dwell_ms,
                     res_power_nW, green_power_uW, init_duration_ms,
                     min_linewidth_MHz, min_peak_to_bg
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        blocks = parse_blocks(path.read_text(encoding="utf-8"))
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    by_name = {}
    for b in blocks:
        if b.name in by_name:
            raise ConfigError(f"{path}: line {b.line}: duplicate block [{b.name}]")
        if b.name not in ("run", "overrides", "sweep", "ple"):
            raise ConfigError(f"{path}: line {b.line}: unknown block [{b.name}]")
        by_name[b.name] = b
    run = by_name.get("run")
    if run is None:
        raise ConfigError(f"{path}: missing [run] block")
    base = path.parent
    try:
        run.check_keys(_RUN_KEYS)
        emitter = run.get_str("emitter", "")
        emitter_path = (base / emitter) if emitter else None
        if emitter_path is not None and not emitter_path.is_file():
            raise ConfigError(f"emitter file not found: {emitter_path}")
        sequence = run.get_str("sequence", "")
        sequence_path = None
        if sequence and sequence not in canonical_sequences():
            sequence_path = base / sequence
            if not sequence_path.is_file():
                raise ConfigError(f"sequence file not found: {sequence_path}")
        seed = run.get_int("seed", None, minimum=0) if "seed" in run.entries else None
        formats = tuple(f.strip() for f in run.get_str("formats", "csv, json").split(","))
        bad = [f for f in formats if f not in _FORMATS]
        if bad:
            raise run.error("formats", f"unknown format(s) {bad}, expected {_FORMATS}")
        method = run.get_str("method", "auto")
        if method not in ("auto", "exact", "aggregate"):
            raise run.error("method", f"unknown method '{method}'")
        overrides = {}
        if "overrides" in by_name:
            ob = by_name["overrides"]
            ob.check_keys(_OVERRIDES)
            for key, (name, scale) in _OVERRIDES.items():
                if key not in ob.entries:
                    continue
                if scale is None:
                    overrides[name] = ob.get_int(key, minimum=1)
                elif scale is bool:
                    overrides[name] = ob.get_bool(key)
                else:
                    overrides[name] = ob.get_float(key) * scale
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig(
        path=path,
        emitter_path=emitter_path,
        sequence=sequence or None,
        sequence_path=sequence_path,
        seed=seed,
        out=(base / run.get_str("out")) if "out" in run.entries else None,
        formats=formats,
        method=method,
        threads=run.get_int("threads", 1, minimum=1),
        overrides=overrides,
        blocks=by_name,
    )


def build_sequence(cfg, extra=None):
    """Sequence from a file, or from a canonical builder plus overrides."""
    overrides = dict(cfg.overrides)
    overrides.update(extra or {})
    if cfg.sequence_path is not None:
        if overrides:
            raise ConfigError(f"{cfg.path}: [overrides] only apply to canonical sequences")
        return read_sequence_file(cfg.sequence_path)
    if cfg.sequence is None:
        raise ConfigError(f"{cfg.path}: [run] needs a sequence")
    if cfg.sequence == "ple":
        raise ConfigError(f"{cfg.path}: scan programs run through the ple command")
    builder = canonical_sequences()[cfg.sequence]
    accepted = set(inspect.signature(builder).parameters)
    unknown = sorted(set(overrides) - accepted)
    if unknown:
        raise ConfigError(f"{cfg.path}: sequence '{cfg.sequence}' does not take {unknown}")
    try:
        return builder(**overrides)
    except ValueError as exc:
        raise ConfigError(f"{cfg.path}: {exc}") from None


class _Output:
    """Collects written files for the manifest."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def path(self, name):
        self.files.append(name)
        return self.dir / name

    def json(self, name, obj):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")

    def text(self, name, text):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            fh.write(text)

    def rows(self, name, header, rows):
        with open(self.path(name), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows)

    def manifest(self, command, inputs, seed=None, extra=None):
        data = {
            "command": command,
            "version": __version__,
            "seed": seed,
            "inputs": inputs,
            "outputs": {name: _sha(self.dir / name) for name in sorted(set(self.files))},
        }
        data.update(extra or {})
        with open(self.dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not serializable: {type(obj)}")


def _f(x):
    return repr(float(x))


def _out_dir(args, cfg=None):
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.out is not None:
        return cfg.out
    return Path(os.environ.get(OUT_ENV, DEFAULT_OUT))


def _seed(args, cfg):
    seed = args.seed if args.seed is not None else cfg.seed
    if seed is None:
        raise ConfigError(f"{cfg.path}: no seed given (use --seed or [run] seed)")
    return int(seed)


def _threads(args, cfg):
    return int(args.threads) if args.threads is not None else cfg.threads


def _load_emitter(cfg):
    if cfg.emitter_path is None:
        raise ConfigError(f"{cfg.path}: [run] needs an emitter file")
    emitter, _ = read_emitter_file(cfg.emitter_path)
    return emitter


def _apply_reps(seq, args):
    if args.reps_override is not None:
        if args.reps_override < 1:
            raise ConfigError("--reps-override must be >= 1")
        return seq.with_repetitions(args.reps_override)
    return seq


def decay_window(sequence):
    """``(t_start, t_end)`` of the first recorded segment with resonant light."""
    starts = sequence.segment_starts()
    for i, seg in enumerate(sequence.segments):
        if seg.record and seg.has_resonant:
            return float(starts[i]), float(starts[i + 1])
    raise ValueError("sequence has no recorded resonant segment")


def segment_totals(trace, sequence):
    """Counts per recorded segment as ``[(label, t_start, t_end, counts)]``."""
    owner = sequence.bin_segment_index()
    starts = sequence.segment_starts()
    rows = []
    for i, seg in enumerate(sequence.segments):
        mask = owner == i
        if seg.record and mask.any():
            rows.append((seg.label or f"segment_{i}", float(starts[i]), float(starts[i + 1]),
                         int(trace.counts[mask].sum())))
    return rows


def fit_trace_decay(trace, t_start, t_end):
    mask = trace.window(t_start, t_end)
    return fit_exp_decay(trace.centers[mask] - t_start, trace.counts[mask])


def readout_levels(trace, sequence, prefix="readout_"):
    """Counts per readout segment (label ``prefix<k>``), in sequence order."""
    return np.array([c for label, _, _, c in segment_totals(trace, sequence) if label.startswith(prefix)])


def recovery_rate_from_step(q, green_duration):
    """Recovery rate implied by a recovered fraction ``q`` per green pulse."""
    if q >= 1.0:
        return math.inf
    return -math.log1p(-q) / green_duration


# --- gnuplot -------------------------------------------------------------------------------

def _gnuplot_trace(csv_name):
    return (
        "set datafile separator ','\n"
        "set xlabel 'time (ms)'\nset ylabel 'counts per bin'\n"
        f"plot '{csv_name}' every ::1 using ($1*1e3):3 with steps title 'counts'\n"
    )


def _gnuplot_sweep(csv_name, axis_unit, slope, intercept):
    return (
        "set datafile separator ','\n"
        f"set xlabel 'power ({axis_unit})'\nset ylabel 'rate (Hz)'\n"
        f"f(x) = {slope!r}*x + {intercept!r}\n"
        f"plot '{csv_name}' every ::1 using 1:2:3 with yerrorbars title 'fitted rate', f(x) title 'linear fit'\n"
    )


def _gnuplot_ple(csv_name):
    return (
        "set datafile separator ','\n"
        "set xlabel 'detuning (MHz)'\nset ylabel 'scan'\n"
        f"plot '{csv_name}' every ::1 using 2:1:3 with image title ''\n"
    )


# --- commands ------------------------------------------------------------------------------

def cmd_simulate(args):
    cfg = read_run_config(args.config)
    emitter = _load_emitter(cfg)
    seq = _apply_reps(build_sequence(cfg), args)
    seed = _seed(args, cfg)
    trace = simulate_ensemble(emitter, seq, seed, n_workers=_threads(args, cfg), method=cfg.method)
    out = _Output(_out_dir(args, cfg))
    trace.to_csv(out.path("trace.csv"))
    trace.write_metadata(out.path("trace.meta.json"))
    out.rows("segments.csv", ["label", "t_start_s", "t_end_s", "counts"],
             [(lab, _f(a), _f(b), c) for lab, a, b, c in segment_totals(trace, seq)])
    out.text("sequence.txt", serialize_sequence(seq))
    if "gnuplot" in cfg.formats:
        out.text("trace.gp", _gnuplot_trace("trace.csv"))
    out.manifest("simulate", cfg.inputs(), seed, {"n_reps": trace.n_reps})
    print(f"wrote {len(out.files)} files to {out.dir}")
    return EXIT_OK


def _sweep_config(cfg):
    block = cfg.blocks.get("sweep")
    if block is None:
        raise ConfigError(f"{cfg.path}: sweep needs a [sweep] block")
    try:
        block.check_keys(("axis", "values", "observable", "fit_min", "fit_max"))
        axis = block.get_str("axis")
        if axis not in _SWEEP_AXES:
            raise block.error("axis", f"must be one of {tuple(_SWEEP_AXES)}")
        values = block.get_floats("values")
        observable = block.get_str("observable", "decay")
        if observable not in ("decay", "recovery"):
            raise block.error("observable", "must be 'decay' or 'recovery'")
        if observable == "recovery" and axis != "green_power":
            raise block.error("observable", "recovery sweeps run along green_power")
        default_max = 30.0 if axis == "green_power" else math.inf
        fit_min = block.get_float("fit_min", -math.inf)
        fit_max = block.get_float("fit_max", default_max)
    except ConfigError as exc:
        raise ConfigError(f"{cfg.path}: {exc}") from None
    return axis, values, observable, fit_min, fit_max


def run_sweep(cfg, emitter, seed, n_workers=1, reps=None):
    """Rates per sweep value: list of ``(value in file units, rate, rate_err)``."""
    axis, values, observable, _, _ = _sweep_config(cfg)
    key, scale, _ = _SWEEP_AXES[axis]
    name = _OVERRIDES[key][0]
    rows = []
    for i, v in enumerate(values):
        seq = build_sequence(cfg, {name: v * scale})
        if reps is not None:
            seq = seq.with_repetitions(reps)
        # each point gets its own seed offset so points are independent
        trace = simulate_ensemble(emitter, seq, seed + i, n_workers=n_workers, method=cfg.method)
        if observable == "decay":
            t0, t1 = decay_window(seq)
            fit = fit_trace_decay(trace, t0, t1)
            rows.append((v, fit["rate"], fit.std_errors["rate"]))
        else:
            fit = fit_recovery_steps(readout_levels(trace, seq))
            q, dq = fit["rate_per_pulse"], fit.std_errors["rate_per_pulse"]
            green = next(s.duration for s in seq.segments if s.label.startswith("green_"))
            rate = recovery_rate_from_step(q, green)
            rows.append((v, rate, dq / ((1.0 - q) * green) if q < 1 else math.inf))
    return rows


def cmd_sweep(args):
    cfg = read_run_config(args.config)
    emitter = _load_emitter(cfg)
    seed = _seed(args, cfg)
    axis, _, observable, fit_min, fit_max = _sweep_config(cfg)
    key, _, unit = _SWEEP_AXES[axis]
    rows = run_sweep(cfg, emitter, seed, _threads(args, cfg), args.reps_override)
    out = _Output(_out_dir(args, cfg))
    out.rows("sweep.csv", [key, "rate_Hz", "rate_err_Hz"], [(_f(v), _f(r), _f(e)) for v, r, e in rows])
    xs = np.array([r[0] for r in rows])
    ys = np.array([r[1] for r in rows])
    keep = (xs >= fit_min) & (xs <= fit_max)
    summary = {"axis": axis, "observable": observable, "fit_window": [fit_min, fit_max],
               "n_points": int(keep.sum())}
    if keep.sum() >= 3:
        lin = fit_linear(xs[keep], ys[keep])
        summary["linear_fit"] = lin.to_dict()
        slope, intercept = lin["slope"], lin["intercept"]
    else:
        summary["linear_fit"] = None
        summary["degenerate"] = True
        summary["message"] = f"{int(keep.sum())} point(s) in the fit window; a line needs 3"
        slope, intercept = math.nan, math.nan
    out.json("sweep_fit.json", summary)
    if "gnuplot" in cfg.formats:
        out.text("sweep.gp", _gnuplot_sweep("sweep.csv", unit, slope, intercept))
    out.manifest("sweep", cfg.inputs(), seed)
    print(f"wrote {len(out.files)} files to {out.dir}")
    return EXIT_OK


def _ple_config(cfg):
    block = cfg.blocks.get("ple")
    if block is None:
        raise ConfigError(f"{cfg.path}: ple needs a [ple] block")
    try:
        block.check_keys(("mode", "n_scans", "f_min_MHz", "f_max_MHz", "step_MHz", "dwell_ms",
                          "res_power_nW", "green_power_uW", "init_duration_ms",
                          "min_linewidth_MHz", "min_peak_to_bg"))
        mode = block.get_str("mode")
        if mode not in SCAN_MODES:
            raise block.error("mode", f"must be one of {SCAN_MODES}")
        n_scans = block.get_int("n_scans", 20)
        if n_scans < 1:
            raise block.error("n_scans", "must be >= 1")
        scan = {}
        for key, name, unit in (("f_min_MHz", "f_min", 1e6), ("f_max_MHz", "f_max", 1e6),
                                ("step_MHz", "step", 1e6), ("dwell_ms", "dwell", 1e-3)):
            if key in block.entries:
                scan[name] = block.get_float(key, positive=name in ("step", "dwell")) * unit
        scan = ScanConfig(**scan)
        kwargs = {
            "mode": mode,
            "scan_config": scan,
            "n_scans": n_scans,
            "init_duration": block.get_float("init_duration_ms", 50.0, positive=True) * 1e-3,
        }
        if "res_power_nW" in block.entries:
            kwargs["res_power"] = block.get_float("res_power_nW", minimum=0.0) * 1e-9
        if "green_power_uW" in block.entries:
            kwargs["green_power"] = block.get_float("green_power_uW", minimum=0.0) * 1e-6
        gating = GatingRules(
            min_linewidth=block.get_float("min_linewidth_MHz", 20.0, minimum=0.0) * 1e6,
            min_peak_to_bg=block.get_float("min_peak_to_bg", 1.0, minimum=0.0),
        )
    except ConfigError as exc:
        raise ConfigError(f"{cfg.path}: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"{cfg.path}: [ple] {exc}") from None
    return kwargs, gating


def cmd_ple(args):
    cfg = read_run_config(args.config)
    emitter = _load_emitter(cfg)
    seed = _seed(args, cfg)
    kwargs, gating = _ple_config(cfg)
    scan_map = generate_ple(emitter, seed=seed, method=cfg.method, **kwargs)
    stats = scan_statistics(scan_map, gating)
    out = _Output(_out_dir(args, cfg))
    scan_map.to_csv(out.path("scans.csv"))
    scan_map.write_sidecar(out.path("scans.sidecar.json"))
    out.rows("spectrum.csv", ["detuning_MHz", "mean_counts", "max_counts"],
             [(_f(f / 1e6), _f(a), int(b)) for f, a, b in
              zip(scan_map.detuning_grid, mean_spectrum(scan_map), max_spectrum(scan_map))])
    report = stats.to_dict()
    try:
        report["terminated_then_complete"] = terminated_then_complete(scan_map, stats)
    except PeakNotFound:
        report["terminated_then_complete"] = []
    try:
        summed = scan_map.scans.sum(axis=0)
        report["summed_spectrum_fit"] = fit_lorentzian(scan_map.detuning_grid, summed, weighting="irls").to_dict()
    except PeakNotFound as exc:
        report["summed_spectrum_fit"] = None
        report["summed_spectrum_message"] = str(exc)
    out.json("statistics.json", report)
    if "gnuplot" in cfg.formats:
        out.text("scans.gp", _gnuplot_ple("scans.csv"))
    out.manifest("ple", cfg.inputs(), seed)
    if stats.empty:
        print(f"no scan passed gating: {stats.reason}", file=sys.stderr)
    print(f"wrote {len(out.files)} files to {out.dir}")
    return EXIT_OK


def cmd_calibrate(args):
    tf = read_targets_file(args.targets)
    emitter, prov = calibrate_file(tf)
    out = _Output(_out_dir(args))
    name = args.name or f"emitter_{tf.emitter_id}.txt"
    write_emitter_file(out.path(name), emitter, prov,
                       [f"calibrated emitter {tf.emitter_id}", f"generated by: snvsim calibrate {Path(args.targets).name}"])
    report = verify(emitter, tf.targets)
    out.text("verify.txt", report.to_text())
    out.manifest("calibrate", {Path(args.targets).name: _sha(args.targets)})
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_verify(args):
    emitter, _ = read_emitter_file(args.params)
    tf = read_targets_file(args.targets)
    report = verify(emitter, tf.targets)
    text = report.to_text()
    print(text, end="")
    if args.out:
        out = _Output(args.out)
        out.text("verify.txt", text)
        out.json("verify.json", report.to_dict())
        out.manifest("verify", {Path(args.params).name: _sha(args.params),
                                Path(args.targets).name: _sha(args.targets)})
    return EXIT_OK if report.passed else EXIT_CALIBRATION


_FIT_COLUMNS = {
    "exp_decay": ("bin_start_s", "counts"),
    "lorentzian": ("detuning_MHz", "counts"),
    "linear": (None, "rate_Hz"),
    "recovery_steps": (None, "counts"),
}


def _read_columns(path, xcol, ycol):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        xcol = xcol or header[0]
        for col in (xcol, ycol):
            if col not in header:
                raise ConfigError(f"{path}: no column '{col}' (have {header})")
        rows = list(reader)
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    return np.array([float(r[xcol]) for r in rows]), np.array([float(r[ycol]) for r in rows])


def cmd_fit(args):
    path = Path(args.input)
    if not path.is_file():
        raise ConfigError(f"input file not found: {path}")
    model = args.model
    xcol, ycol = _FIT_COLUMNS[model]
    xcol, ycol = args.x or xcol, args.y or ycol
    if model == "exp_decay" and args.x is None and args.y is None:
        trace = read_trace_csv(path)
        t0 = args.t_min_ms * 1e-3 if args.t_min_ms is not None else trace.bin_edges[0]
        t1 = args.t_max_ms * 1e-3 if args.t_max_ms is not None else trace.bin_edges[-1]
        result = fit_trace_decay(trace, t0, t1)
    else:
        x, y = _read_columns(path, xcol, ycol)
        if model == "lorentzian":
            # long-form scan maps repeat each detuning once per scan: sum them
            grid, inverse = np.unique(x, return_inverse=True)
            y = np.bincount(inverse, weights=y)
            x = grid * 1e6 if xcol.endswith("_MHz") else grid
            result = fit_lorentzian(x, y, weighting="irls")
        elif model == "linear":
            result = fit_linear(x, y)
        elif model == "recovery_steps":
            result = fit_recovery_steps(y)
        else:
            result = ExponentialDecayFit().fit(x - x[0], y).result_
    text = result.report(f"{model} fit of {path.name}")
    print(text, end="" if text.endswith("\n") else "\n")
    if args.out:
        out = _Output(args.out)
        out.text("fit.json", result.to_json(indent=2) + "\n")
        out.manifest("fit", {path.name: _sha(path)}, extra={"model": model})
    return EXIT_OK


# --- entry point ---------------------------------------------------------------------------

def _common(p, config=True):
    if config:
        p.add_argument("--config", required=True, help="run config file")
        p.add_argument("--seed", type=int, help="overrides [run] seed")
        p.add_argument("--reps-override", type=int, help="replace the sequence repetition count")
        p.add_argument("--threads", type=int, help="worker threads (results do not depend on it)")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")


def build_parser():
    parser = argparse.ArgumentParser(prog="snvsim", description="Charge-state kinetics simulator for SnV emitters.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", help="ensemble trace of one pulse sequence")
    _common(p)
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("sweep", help="fitted rates over a power sweep plus a linear fit")
    _common(p)
    p.set_defaults(func=cmd_sweep)
    p = sub.add_parser("ple", help="consecutive PLE scans and per-scan statistics")
    _common(p)
    p.set_defaults(func=cmd_ple)
    p = sub.add_parser("calibrate", help="solve emitter coefficients from a targets file")
    p.add_argument("targets")
    p.add_argument("--name", help="output file name (default emitter_<id>.txt)")
    _common(p, config=False)
    p.set_defaults(func=cmd_calibrate)
    p = sub.add_parser("verify", help="check an emitter file against a targets file")
    p.add_argument("params")
    p.add_argument("targets")
    _common(p, config=False)
    p.set_defaults(func=cmd_verify)
    p = sub.add_parser("fit", help="fit a model to an existing CSV")
    p.add_argument("input")
    p.add_argument("--model", required=True, choices=tuple(_FIT_COLUMNS))
    p.add_argument("--x", help="x column name")
    p.add_argument("--y", help="y column name")
    p.add_argument("--t-min-ms", type=float)
    p.add_argument("--t-max-ms", type=float)
    _common(p, config=False)
    p.set_defaults(func=cmd_fit)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CalibrationError as exc:
        print(f"calibration error: {exc}", file=sys.stderr)
        report = getattr(exc, "report", None)
        if report is not None:
            print(report.to_text(), end="", file=sys.stderr)
        return EXIT_CALIBRATION
    except (ConfigError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, RuntimeError, TimescaleSeparationViolated, PeakNotFound, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
