"""Laser pulse programs: data model, text format, canonical experiment builders
and boustrophedon PLE scan expansion."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._kvfile import ConfigError, dump_blocks, format_number, parse_blocks
from .kinetics import LaserState

__all__ = [
    "PulseSegment",
    "PulseSequence",
    "ScanConfig",
    "PLE_DEFAULTS",
    "parse_sequence",
    "serialize_sequence",
    "read_sequence_file",
    "sequence_hash",
    "seq_resonant_only",
    "seq_simultaneous",
    "seq_multipulse",
    "seq_recovery",
    "seq_ple",
    "canonical_sequences",
    "expand_scan_program",
    "scan_grid",
    "SCAN_MODES",
]

nW = 1e-9
uW = 1e-6
ms = 1e-3
us = 1e-6
MHz = 1e6

SCAN_MODES = ("res_only", "init_then_scan", "simultaneous")


@dataclass(frozen=True)
class PulseSegment:
    duration: float
    laser: LaserState = field(default_factory=LaserState)
    detuning_sweep: tuple[float, float] | None = None
    record: bool = True
    label: str = ""

    def __post_init__(self):
        if not (self.duration > 0 and math.isfinite(self.duration)):
            raise ValueError(f"segment '{self.label}': duration must be > 0, got {self.duration}")
        if self.detuning_sweep is not None:
            start, end = self.detuning_sweep
            if not (math.isfinite(start) and math.isfinite(end)):
                raise ValueError(f"segment '{self.label}': sweep bounds must be finite")
            object.__setattr__(self, "detuning_sweep", (float(start), float(end)))
        if "\n" in self.label:
            raise ValueError("segment label must be a single line")

    @property
    def has_green(self):
        return self.laser.green_power > 0

    @property
    def has_resonant(self):
        return self.laser.res_power > 0


@dataclass(frozen=True)
class PulseSequence:
    segments: tuple[PulseSegment, ...]
    repetitions: int = 1
    bin_width: float = 10 * us
    seed_label: str = ""
    dark_start: bool = False

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        if not self.segments:
            raise ValueError("sequence has no segments")
        if int(self.repetitions) != self.repetitions or self.repetitions < 1:
            raise ValueError("repetitions must be an integer >= 1")
        recorded = [s.duration for s in self.segments if s.record]
        if not recorded:
            raise ValueError("sequence records nothing (total recorded duration is 0)")
        if not self.bin_width > 0:
            raise ValueError("bin_width must be > 0")
        if self.bin_width > min(recorded) * (1 + 1e-12):
            raise ValueError(
                f"bin_width {self.bin_width:g} s exceeds the shortest recorded segment {min(recorded):g} s"
            )

    @property
    def duration(self):
        return sum(s.duration for s in self.segments)

    def segment_starts(self):
        starts = np.concatenate([[0.0], np.cumsum([s.duration for s in self.segments])])
        return starts

    def with_repetitions(self, repetitions):
        return replace(self, repetitions=int(repetitions))

    def bin_edges(self):
        """Bin edges covering first to last recorded segment.

        Each segment in that span is tiled separately with ``bin_width`` bins
        (the last one truncated at the segment end), so edges always align
        with segment boundaries.
        """
        starts = self.segment_starts()
        rec = [i for i, s in enumerate(self.segments) if s.record]
        edges = [starts[rec[0]]]
        for i in range(rec[0], rec[-1] + 1):
            t0, t1 = starts[i], starts[i + 1]
            n = max(1, int(math.ceil((t1 - t0) / self.bin_width - 1e-9)))
            inner = t0 + self.bin_width * np.arange(1, n)
            edges.extend(inner.tolist())
            edges.append(t1)
        return np.asarray(edges)

    def bin_segment_index(self):
        """Index of the owning segment for every bin of ``bin_edges()``."""
        edges = self.bin_edges()
        starts = self.segment_starts()
        mids = 0.5 * (edges[:-1] + edges[1:])
        return np.searchsorted(starts, mids, side="right") - 1


# --- text format ---------------------------------------------------------------------

_SEQ_KEYS = ("repetitions", "bin_width_us", "seed_label", "dark_start")
_SEG_KEYS = ("duration_ms", "res_power_nW", "res_detuning_MHz", "green_power_uW",
             "sweep_start_MHz", "sweep_end_MHz", "record", "label")


def serialize_sequence(seq):
    header = [
        ("repetitions", str(seq.repetitions)),
        ("bin_width_us", format_number(seq.bin_width, 1e-6)),
    ]
    if seq.seed_label:
        header.append(("seed_label", seq.seed_label))
    if seq.dark_start:
        header.append(("dark_start", "true"))
    blocks = [("sequence", header)]
    for seg in seq.segments:
        items = [
            ("duration_ms", format_number(seg.duration, 1e-3)),
            ("res_power_nW", format_number(seg.laser.res_power, 1e-9)),
            ("res_detuning_MHz", format_number(seg.laser.res_detuning, 1e6)),
            ("green_power_uW", format_number(seg.laser.green_power, 1e-6)),
        ]
        if seg.detuning_sweep is not None:
            items += [
                ("sweep_start_MHz", format_number(seg.detuning_sweep[0], 1e6)),
                ("sweep_end_MHz", format_number(seg.detuning_sweep[1], 1e6)),
            ]
        items.append(("record", "true" if seg.record else "false"))
        if seg.label:
            items.append(("label", seg.label))
        blocks.append(("segment", items))
    return dump_blocks(blocks)


def parse_sequence(text):
    """Parse sequence file text.

    Raises ``KVSyntaxError`` (line/column) for malformed text and
    ``ConfigError`` naming the offending segment and key for invalid values.
    """
    blocks = parse_blocks(text)
    headers = [b for b in blocks if b.name == "sequence"]
    if len(headers) != 1:
        raise ConfigError("sequence file must contain exactly one [sequence] block")
    segments = []
    for index, block in enumerate(b for b in blocks if b.name == "segment"):
        block.check_keys(_SEG_KEYS)
        label = block.get_str("label", "")
        where = f"segment {index}" + (f" '{label}'" if label else "")
        try:
            duration = block.get_float("duration_ms", positive=True) * 1e-3
            laser = LaserState(
                res_power=block.get_float("res_power_nW", 0.0, minimum=0.0) * 1e-9,
                res_detuning=block.get_float("res_detuning_MHz", 0.0) * 1e6,
                green_power=block.get_float("green_power_uW", 0.0, minimum=0.0) * 1e-6,
            )
        except ConfigError as exc:
            raise ConfigError(f"{where}: {exc}") from None
        sweep = None
        if "sweep_start_MHz" in block.entries or "sweep_end_MHz" in block.entries:
            sweep = (block.get_float("sweep_start_MHz") * 1e6, block.get_float("sweep_end_MHz") * 1e6)
        segments.append(PulseSegment(duration, laser, sweep, block.get_bool("record", True), label))
    for block in blocks:
        if block.name not in ("sequence", "segment"):
            raise ConfigError(f"line {block.line}: unknown block [{block.name}]")
    header = headers[0]
    header.check_keys(_SEQ_KEYS)
    if not segments:
        raise ConfigError(f"line {header.line}: sequence has no [segment] blocks")
    try:
        return PulseSequence(
            segments=tuple(segments),
            repetitions=header.get_int("repetitions", 1, minimum=1),
            bin_width=header.get_float("bin_width_us", 10.0, positive=True) * 1e-6,
            seed_label=header.get_str("seed_label", ""),
            dark_start=header.get_bool("dark_start", False),
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"line {header.line}: [sequence] {exc}") from None


def read_sequence_file(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return parse_sequence(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def sequence_hash(seq):
    return hashlib.sha256(serialize_sequence(seq).encode()).hexdigest()[:16]


# --- canonical builders --------------------------------------------------------------

def _green(duration, power, record=False, label="green"):
    return PulseSegment(duration, LaserState(green_power=power), record=record, label=label)


def seq_resonant_only(res_power=5 * nW, duration=2 * ms, repetitions=10_000, bin_width=20 * us,
                      init_green_power=0.0, init_duration=50 * ms, detuning=0.0):
    """Resonant pulse alone at fixed frequency.

    An initialization green pulse is prepended only when
    ``init_green_power > 0``.
    """
    segs = []
    if init_green_power > 0:
        segs.append(_green(init_duration, init_green_power, label="init"))
    segs.append(PulseSegment(duration, LaserState(res_power, detuning), record=True, label="resonant"))
    return PulseSequence(tuple(segs), repetitions, bin_width, "resonant_only")


def seq_simultaneous(res_power=5 * nW, green_power=11.5 * uW, duration=2 * ms, tail=0.5 * ms,
                     repetitions=10_000, bin_width=20 * us, init_duration=50 * ms, detuning=0.0):
    """Resonant pulse on top of continuous green light.

    Layout: green-only initialization (not recorded), resonant+green pulse,
    green-only tail (recorded; shows the surface background level).
    """
    segs = [_green(init_duration, green_power, label="init")]
    segs.append(PulseSegment(duration, LaserState(res_power, detuning, green_power), label="simultaneous"))
    if tail > 0:
        segs.append(_green(tail, green_power, record=True, label="green_tail"))
    return PulseSequence(tuple(segs), repetitions, bin_width, "simultaneous")


def seq_multipulse(res_power=4 * nW, green_power=32.2 * uW, readout=5 * ms, pulse=0.1 * ms,
                   n_pulses=2, init_duration=50 * ms, final_green=50 * ms,
                   repetitions=10_000, bin_width=50 * us):
    """Init, reference readout, then ``n_pulses`` x (simultaneous pulse, readout),
    then a green pulse and a final readout."""
    res = LaserState(res_power)
    segs = [_green(init_duration, green_power, label="init"),
            PulseSegment(readout, res, label="readout_0")]
    for k in range(n_pulses):
        segs.append(PulseSegment(pulse, LaserState(res_power, 0.0, green_power), label=f"simultaneous_{k + 1}"))
        segs.append(PulseSegment(readout, res, label=f"readout_{k + 1}"))
    segs.append(_green(final_green, green_power, record=True, label="reinit"))
    segs.append(PulseSegment(readout, res, label="readout_final"))
    return PulseSequence(tuple(segs), repetitions, bin_width, "multipulse")


def seq_recovery(green_power=30.1 * uW, res_power=5 * nW, n_blocks=16, green_duration=5 * ms,
                 readout=1 * ms, pump_duration=10 * ms, repetitions=1_000, bin_width=100 * us,
                 dark_start=False):
    """Simultaneous pump toward the dark state, then ``n_blocks`` x (green, readout)."""
    segs = [PulseSegment(pump_duration, LaserState(res_power, 0.0, green_power), record=False, label="pump")]
    for k in range(n_blocks):
        segs.append(_green(green_duration, green_power, label=f"green_{k + 1}"))
        segs.append(PulseSegment(readout, LaserState(res_power), label=f"readout_{k + 1}"))
    return PulseSequence(tuple(segs), repetitions, bin_width, "recovery", dark_start)


@dataclass(frozen=True)
class ScanConfig:
    f_min: float = -250 * MHz
    f_max: float = 250 * MHz
    step: float = 2 * MHz
    dwell: float = 50 * ms

    def __post_init__(self):
        if not self.f_min < self.f_max:
            raise ValueError("f_min must be < f_max")
        if not self.step > 0:
            raise ValueError("step must be > 0")
        if not self.dwell > 0:
            raise ValueError("dwell must be > 0")


PLE_DEFAULTS = {
    "res_only": {"res_power": 0.45 * nW, "green_power": 0.0},
    "init_then_scan": {"res_power": 4 * nW, "green_power": 20 * uW},
    "simultaneous": {"res_power": 0.9 * nW, "green_power": 20 * uW},
}


def scan_grid(scan):
    n = int(math.floor((scan.f_max - scan.f_min) / scan.step + 1e-9)) + 1
    grid = scan.f_min + scan.step * np.arange(n)
    if grid.size == 0:
        raise ValueError("empty scan grid")
    return grid


def expand_scan_program(mode, scan, n_scans, res_power=None, green_power=None, init_duration=50 * ms):
    """One ``PulseSequence`` per scan, alternating direction.

    Scan 0 runs from high to low detuning, scan 1 from low to high, and so
    on. Every grid point is one recorded segment of length ``dwell``.
    """
    if mode not in SCAN_MODES:
        raise ValueError(f"unknown scan mode '{mode}', expected one of {SCAN_MODES}")
    if n_scans < 1:
        raise ValueError("n_scans must be >= 1")
    defaults = PLE_DEFAULTS[mode]
    res_power = defaults["res_power"] if res_power is None else res_power
    green_power = defaults["green_power"] if green_power is None else green_power
    grid = scan_grid(scan)
    dwell_green = green_power if mode == "simultaneous" else 0.0
    sequences = []
    for k in range(n_scans):
        order = grid[::-1] if k % 2 == 0 else grid
        segs = []
        if mode == "init_then_scan":
            segs.append(_green(init_duration, green_power, label="init"))
        segs.extend(
            PulseSegment(scan.dwell, LaserState(res_power, float(f), dwell_green), label=f"f{i}")
            for i, f in enumerate(order)
        )
        sequences.append(PulseSequence(tuple(segs), 1, scan.dwell, f"ple_{mode}_{k}"))
    return sequences


def seq_ple(mode="res_only", scan=None, n_scans=20, res_power=None, green_power=None, init_duration=50 * ms):
    return expand_scan_program(mode, scan or ScanConfig(), n_scans, res_power, green_power, init_duration)


def canonical_sequences():
    """Builders keyed by the names accepted on the command line."""
    return {
        "resonant_only": seq_resonant_only,
        "simultaneous": seq_simultaneous,
        "multipulse": seq_multipulse,
        "recovery": seq_recovery,
        "ple": seq_ple,
    }
