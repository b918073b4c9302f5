"""Stochastic simulation of the three-state emitter over pulse sequences.

Two paths share one compiled kernel:

* ``exact`` draws every optical transition (Gillespie direct method).
* ``aggregate`` keeps the charge state exact under the reduced telegraph
  rates and draws detected photons as a Poisson stream with rate
  ``eta * gamma * p_e`` while bright. It is only valid when optical cycling
  is much faster than charge switching.

``auto`` picks ``aggregate`` per segment when the optical/charge rate ratio is
at least ``AGGREGATE_MIN_SEPARATION``.

Randomness for repetition ``r`` comes from a Philox generator keyed by
``(seed, stream)`` with counter block ``r``, so repetitions are independent
of execution order and worker count.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .kinetics import (
    DARK,
    GROUND,
    background_rate,
    build_rates,
    effective_telegraph,
    excited_fraction_qss,
    format_emitter,
    integrate_occupation,
    timescale_separation,
)
from .pulses import PulseSegment, PulseSequence, sequence_hash

__all__ = [
    "EventRecord",
    "BinnedTrace",
    "simulate_repetition",
    "simulate_ensemble",
    "real_time_trace",
    "run_segments",
    "expected_trace",
    "rep_generator",
    "read_trace_csv",
    "AGGREGATE_MIN_SEPARATION",
]

AGGREGATE_MIN_SEPARATION = 1000.0
STREAM_KINETICS = 0
STREAM_DIFFUSION = 1
EVENT_KINDS = ("photon_detected", "to_dark", "to_bright", "segment_boundary")
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class EventRecord:
    time: float
    kind: str


@dataclass
class BinnedTrace:
    bin_edges: np.ndarray
    counts: np.ndarray
    n_reps: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=float)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape[0] != self.bin_edges.shape[0] - 1:
            raise ValueError("len(counts) must equal len(bin_edges) - 1")
        if np.any(self.counts < 0):
            raise ValueError("counts must be >= 0")

    @property
    def widths(self):
        return np.diff(self.bin_edges)

    @property
    def centers(self):
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def rate(self):
        """Mean count rate per repetition in counts/s."""
        return self.counts / (self.n_reps * self.widths)

    def window(self, t_start, t_end):
        """Boolean mask of bins lying inside ``[t_start, t_end]``."""
        eps = 1e-12 * max(1.0, abs(t_end))
        return (self.bin_edges[:-1] >= t_start - eps) & (self.bin_edges[1:] <= t_end + eps)

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["bin_start_s", "bin_end_s", "counts", "n_reps"])
            for a, b, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts):
                writer.writerow([repr(float(a)), repr(float(b)), int(c), self.n_reps])

    def write_metadata(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.metadata, fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_trace_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, skipinitialspace=True)
        header = next(reader)
        if [h.strip() for h in header] != ["bin_start_s", "bin_end_s", "counts", "n_reps"]:
            raise ValueError(f"{path}: unexpected trace header {header}")
        rows = [row for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: empty trace")
    starts = [float(r[0]) for r in rows]
    edges = np.array(starts + [float(rows[-1][1])])
    counts = np.array([int(r[2]) for r in rows], dtype=np.int64)
    return BinnedTrace(edges, counts, int(rows[0][3]))


def rep_generator(seed, rep_index, stream=STREAM_KINETICS):
    """Counter-based generator for one repetition."""
    seed, rep_index = int(seed), int(rep_index)
    if seed < 0 or rep_index < 0:
        raise ValueError("seed and rep_index must be >= 0")
    bitgen = np.random.Philox(key=[seed & _MASK64, stream], counter=[0, 0, rep_index & _MASK64, rep_index >> 64])
    return np.random.Generator(bitgen)


def emitter_hash(emitter):
    return hashlib.sha256(format_emitter(emitter).encode()).hexdigest()[:16]


# --- segment tables ------------------------------------------------------------------

@dataclass
class _Table:
    t0: np.ndarray
    dur: np.ndarray
    mode: np.ndarray
    k_pump: np.ndarray
    gamma: np.ndarray
    k_ion: np.ndarray
    k_rec: np.ndarray
    k_off: np.ndarray
    k_on: np.ndarray
    bright_rate: np.ndarray
    p_exc: np.ndarray
    bg: np.ndarray
    record: np.ndarray


def _split_sweeps(emitter, segments):
    """Replace swept segments by piecewise-constant pieces.

    Each piece moves the detuning by at most 1/20 of the natural linewidth.
    """
    out = []
    max_step = emitter.natural_linewidth() / 20.0
    for seg in segments:
        if seg.detuning_sweep is None:
            out.append(seg)
            continue
        start, end = seg.detuning_sweep
        n = max(1, int(math.ceil(abs(end - start) / max_step)))
        for j in range(n):
            mid = start + (end - start) * (j + 0.5) / n
            laser = type(seg.laser)(seg.laser.res_power, mid, seg.laser.green_power)
            out.append(PulseSegment(seg.duration / n, laser, None, seg.record, seg.label))
    return out


def _segment_table(emitter, segments, method, t_offset=0.0):
    if method not in ("auto", "exact", "aggregate"):
        raise ValueError(f"unknown method '{method}'")
    segments = _split_sweeps(emitter, segments)
    n = len(segments)
    cols = {name: np.zeros(n) for name in ("dur", "k_pump", "gamma", "k_ion", "k_rec",
                                           "k_off", "k_on", "bright_rate", "p_exc", "bg")}
    mode = np.zeros(n, dtype=np.int64)
    record = np.zeros(n, dtype=np.bool_)
    for i, seg in enumerate(segments):
        rates = build_rates(emitter, seg.laser)
        sep = timescale_separation(rates)
        use_aggregate = method == "aggregate" or (method == "auto" and sep >= AGGREGATE_MIN_SEPARATION)
        if use_aggregate:
            k_off, k_on, _ = effective_telegraph(rates, min_separation=0.0)
        else:
            k_off = k_on = 0.0
        p_e = excited_fraction_qss(rates)
        mode[i] = 1 if use_aggregate else 0
        cols["dur"][i] = seg.duration
        cols["k_pump"][i] = rates.k_pump
        cols["gamma"][i] = rates.gamma_sp
        cols["k_ion"][i] = rates.k_ion
        cols["k_rec"][i] = rates.k_rec
        cols["k_off"][i] = k_off
        cols["k_on"][i] = k_on
        cols["bright_rate"][i] = emitter.detect_eff * rates.gamma_sp * p_e
        cols["p_exc"][i] = p_e
        cols["bg"][i] = background_rate(emitter, seg.laser)
        record[i] = seg.record
    t0 = t_offset + np.concatenate([[0.0], np.cumsum(cols["dur"])[:-1]])
    return _Table(t0=t0, mode=mode, record=record, **cols)


def _run(table, state, rng, eta):
    return _kernels.run_rep(rng, state, table.t0, table.dur, table.mode, table.k_pump, table.gamma,
                            table.k_ion, table.k_rec, table.k_off, table.k_on, table.bright_rate,
                            table.p_exc, table.bg, table.record, eta)


def run_segments(emitter, segments, state, rng, method="auto", t_offset=0.0):
    """Simulate consecutive segments starting from integer ``state``.

    Returns ``(photon_times, switch_times, switch_kinds, final_state)``;
    switch kinds are 1 for to-dark and 2 for to-bright.
    """
    table = _segment_table(emitter, segments, method, t_offset)
    return _run(table, int(state), rng, float(emitter.detect_eff))


def _initial_state(sequence):
    return 2 if sequence.dark_start else 0


def simulate_repetition(emitter, sequence, rep_index, seed, method="auto"):
    """Event list of one repetition, ordered by time."""
    rng = rep_generator(seed, rep_index)
    photons, sw_t, sw_k, _ = run_segments(emitter, sequence.segments, _initial_state(sequence), rng, method)
    events = [EventRecord(float(t), "photon_detected") for t in photons]
    events += [EventRecord(float(t), "to_dark" if k == _kernels.TO_DARK else "to_bright")
               for t, k in zip(sw_t, sw_k)]
    starts = sequence.segment_starts()
    events += [EventRecord(float(t), "segment_boundary") for t in starts[1:-1]]
    order = {"segment_boundary": 0, "to_dark": 1, "to_bright": 1, "photon_detected": 2}
    events.sort(key=lambda e: (e.time, order[e.kind]))
    return events


def _chunk_counts(table, eta, seed, reps, edges, initial):
    photons = []
    for r in reps:
        times, _, _, _ = _run(table, initial, rep_generator(seed, r), eta)
        if times.size:
            photons.append(times)
    if not photons:
        return np.zeros(edges.size - 1, dtype=np.int64)
    counts, _ = np.histogram(np.concatenate(photons), bins=edges)
    return counts.astype(np.int64)


def simulate_ensemble(emitter, sequence, seed, n_workers=1, method="auto", repetitions=None):
    """Photon counts per bin summed over all repetitions.

    The result is bit-identical for any ``n_workers``: each repetition has
    its own generator and per-bin integer counts are summed.
    """
    n_reps = sequence.repetitions if repetitions is None else int(repetitions)
    if n_reps < 1:
        raise ValueError("repetitions must be >= 1")
    table = _segment_table(emitter, sequence.segments, method)
    edges = sequence.bin_edges()
    eta = float(emitter.detect_eff)
    initial = _initial_state(sequence)
    n_workers = max(1, min(int(n_workers), n_reps))
    chunks = np.array_split(np.arange(n_reps), n_workers)
    if n_workers == 1:
        parts = [_chunk_counts(table, eta, seed, chunks[0], edges, initial)]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            parts = list(pool.map(lambda c: _chunk_counts(table, eta, seed, c, edges, initial), chunks))
    counts = np.zeros(edges.size - 1, dtype=np.int64)
    for part in parts:
        counts += part
    metadata = {
        "sequence_hash": sequence_hash(sequence),
        "emitter_hash": emitter_hash(emitter),
        "seed": int(seed),
        "method": method,
        "n_reps": n_reps,
    }
    return BinnedTrace(edges, counts, n_reps, metadata)


def real_time_trace(emitter, laser, total_time, bin_width, seed, method="auto"):
    """One long repetition under constant drive, binned at ``bin_width``."""
    seg = PulseSegment(total_time, laser, record=True, label="constant")
    seq = PulseSequence((seg,), 1, bin_width, "real_time")
    return simulate_ensemble(emitter, seq, seed, method=method)


def expected_trace(emitter, sequence):
    """Expected counts per bin per repetition from the master equation.

    Independent of the stochastic kernel: occupations are propagated with
    matrix exponentials and integrated exactly over every bin.
    """
    edges = sequence.bin_edges()
    starts = sequence.segment_starts()
    state = DARK if sequence.dark_start else GROUND
    expected = np.zeros(edges.size - 1)
    for i, seg in enumerate(sequence.segments):
        pieces = _split_sweeps(emitter, [seg])
        t = starts[i]
        for piece in pieces:
            rates = build_rates(emitter, piece.laser)
            t_end = t + piece.duration
            if not piece.record:
                state = _propagate_state(rates, state, piece.duration)
                t = t_end
                continue
            cut = np.concatenate([[t], edges[(edges > t + 1e-15) & (edges < t_end - 1e-15)], [t_end]])
            bg = background_rate(emitter, piece.laser)
            for a, b in zip(cut[:-1], cut[1:]):
                integral, state = integrate_occupation(rates, state, b - a)
                mean = emitter.detect_eff * rates.gamma_sp * integral[1] + bg * (b - a)
                k = np.searchsorted(edges, 0.5 * (a + b)) - 1
                expected[k] += mean
            t = t_end
    return edges, expected


def _propagate_state(rates, state, duration):
    _, end = integrate_occupation(rates, state, duration)
    return end
