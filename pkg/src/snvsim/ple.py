"""Consecutive PLE scan maps and their per-scan statistics.

The emitter's charge state carries over from one grid point to the next and
from one scan to the next. Only green light (or a spontaneous recovery event)
brings a dark emitter back, so a scan can stop fluorescing halfway through
the line and stay at background until the next initialization.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .analysis import GatingRules, LorentzianFit, PeakNotFound, hist_fwhm
from .pulses import SCAN_MODES, ScanConfig, expand_scan_program, scan_grid
from .ssa import STREAM_DIFFUSION, STREAM_KINETICS, emitter_hash, rep_generator, run_segments

__all__ = [
    "ScanMap",
    "ScanStatistics",
    "generate_ple",
    "generate_ple_maps",
    "scan_statistics",
    "mean_spectrum",
    "max_spectrum",
    "terminated_then_complete",
    "reference_line",
    "read_scanmap",
]


@dataclass
class ScanMap:
    """Counts per scan on an ascending detuning grid.

    ``scans[k, i]`` is the count at ``detuning_grid[i]`` in scan ``k``
    whatever the sweep direction; ``scan_direction[k]`` is -1 for a
    high-to-low sweep and +1 for low-to-high.
    """

    detuning_grid: np.ndarray
    scans: np.ndarray
    scan_direction: list
    init_markers: list
    true_center_log: list
    ended_dark: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.detuning_grid = np.asarray(self.detuning_grid, dtype=float)
        self.scans = np.asarray(self.scans, dtype=np.int64).reshape(-1, self.detuning_grid.size)
        n = self.scans.shape[0]
        if np.any(self.scans < 0):
            raise ValueError("counts must be >= 0")
        for name in ("scan_direction", "init_markers", "true_center_log"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries for {n} scans")

    @property
    def n_scans(self):
        return self.scans.shape[0]

    def scan_order(self, k):
        """Grid indices of scan ``k`` in the order they were visited."""
        idx = np.arange(self.detuning_grid.size)
        return idx[::-1] if self.scan_direction[k] < 0 else idx

    def to_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["scan_index", "detuning_MHz", "counts"])
            for k in range(self.n_scans):
                for f, c in zip(self.detuning_grid, self.scans[k]):
                    writer.writerow([k, repr(float(f) / 1e6), int(c)])

    def sidecar(self):
        return {
            "scan_direction": [int(d) for d in self.scan_direction],
            "init_markers": [bool(m) for m in self.init_markers],
            "true_center_MHz": [float(c) / 1e6 for c in self.true_center_log],
            "ended_dark": [bool(d) for d in self.ended_dark],
            "metadata": self.metadata,
        }

    def write_sidecar(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.sidecar(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def read_scanmap(csv_path, sidecar_path):
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["scan_index", "detuning_MHz", "counts"]:
            raise ValueError(f"{csv_path}: unexpected header {header}")
        rows = [r for r in reader if r]
    with open(sidecar_path, encoding="utf-8") as fh:
        side = json.load(fh)
    scans = {}
    grid = []
    for k, f, c in rows:
        k = int(k)
        scans.setdefault(k, []).append(int(c))
        if k == 0:
            grid.append(float(f) * 1e6)
    return ScanMap(
        detuning_grid=np.array(grid),
        scans=np.array([scans[k] for k in sorted(scans)]),
        scan_direction=side["scan_direction"],
        init_markers=side["init_markers"],
        true_center_log=[c * 1e6 for c in side["true_center_MHz"]],
        ended_dark=side.get("ended_dark", []),
        metadata=side.get("metadata", {}),
    )


def generate_ple(emitter, mode, scan_config=None, n_scans=20, seed=0, res_power=None,
                 green_power=None, init_duration=50e-3, method="auto", initial_state=0):
    """Simulate ``n_scans`` consecutive scans as one continuous run.

    Scan ``k`` draws from its own counter-based stream, so a map is a pure
    function of its arguments. With spectral diffusion enabled, the emitter
    center is redrawn around its nominal value after an initialization pulse
    with the configured probability.
    """
    if mode not in SCAN_MODES:
        raise ValueError(f"unknown scan mode '{mode}', expected one of {SCAN_MODES}")
    if int(n_scans) < 1:
        raise ValueError("n_scans must be >= 1")
    scan_config = scan_config or ScanConfig()
    program = expand_scan_program(mode, scan_config, int(n_scans), res_power, green_power, init_duration)
    grid = scan_grid(scan_config)
    n_grid = grid.size
    diffusion = emitter.spectral_diffusion
    nominal = emitter.center_frequency
    center = nominal
    state = int(initial_state)
    t = 0.0
    scans = np.zeros((len(program), n_grid), dtype=np.int64)
    directions, markers, centers, ended_dark = [], [], [], []
    for k, seq in enumerate(program):
        rng = rep_generator(seed, k, STREAM_KINETICS)
        segments = list(seq.segments)
        has_init = len(segments) > n_grid
        if has_init:
            init = segments.pop(0)
            _, _, _, state = run_segments(emitter.with_center(center), [init], state, rng, method, t)
            t += init.duration
            if diffusion.enabled:
                jump_rng = rep_generator(seed, k, STREAM_DIFFUSION)
                if jump_rng.random() < diffusion.jump_prob_per_init_pulse:
                    center = nominal + diffusion.jump_sigma * jump_rng.standard_normal()
        em = emitter.with_center(center)
        photons, _, _, state = run_segments(em, segments, state, rng, method, t)
        edges = t + scan_config.dwell * np.arange(n_grid + 1)
        counts, _ = np.histogram(photons, bins=edges)
        direction = -1 if segments[0].laser.res_detuning > segments[-1].laser.res_detuning else 1
        scans[k] = counts[::-1] if direction < 0 else counts
        t = float(edges[-1])
        directions.append(direction)
        markers.append(has_init)
        centers.append(center)
        ended_dark.append(state == _kernels.DARK_STATE)
    metadata = {
        "mode": mode,
        "seed": int(seed),
        "n_scans": int(n_scans),
        "emitter_hash": emitter_hash(emitter),
        "method": method,
        "dwell_s": scan_config.dwell,
        "res_power_W": program[0].segments[-1].laser.res_power,
    }
    return ScanMap(grid, scans, directions, markers, centers, ended_dark, metadata)


def generate_ple_maps(jobs, n_workers=1):
    """Run independent maps; ``jobs`` is a list of keyword dicts for ``generate_ple``."""
    if n_workers <= 1 or len(jobs) <= 1:
        return [generate_ple(**job) for job in jobs]
    with ThreadPoolExecutor(max_workers=n_workers) as pool:
        return list(pool.map(lambda job: generate_ple(**job), jobs))


def mean_spectrum(scan_map):
    return scan_map.scans.mean(axis=0)


def max_spectrum(scan_map):
    """Per-bin maximum over scans."""
    return scan_map.scans.max(axis=0)


@dataclass
class ScanStatistics:
    centers: np.ndarray
    linewidths: np.ndarray
    fits: list
    accepted: list
    excluded: dict
    reason: str | None = None

    def __iter__(self):
        return iter((self.centers, self.linewidths, self.fits))

    @property
    def empty(self):
        return len(self.accepted) == 0

    def center_fwhm(self):
        return hist_fwhm(self.centers) if self.centers.size >= 10 else math.nan

    def linewidth_fwhm(self):
        return hist_fwhm(self.linewidths) if self.linewidths.size >= 10 else math.nan

    def to_dict(self):
        return {
            "accepted_scans": [int(k) for k in self.accepted],
            "centers_MHz": [float(c) / 1e6 for c in self.centers],
            "linewidths_MHz": [float(w) / 1e6 for w in self.linewidths],
            "center_hist_fwhm_MHz": _nan_to_none(self.center_fwhm() / 1e6),
            "linewidth_hist_fwhm_MHz": _nan_to_none(self.linewidth_fwhm() / 1e6),
            "excluded": {str(k): v for k, v in self.excluded.items()},
            "empty_reason": self.reason,
        }


def _nan_to_none(x):
    return None if not math.isfinite(x) else x


def scan_statistics(scan_map, gating=None):
    """Lorentzian fit per scan; scans rejected by ``gating`` are listed in ``excluded``."""
    if scan_map.n_scans == 0:
        raise ValueError("scan map is empty")
    gating = gating or GatingRules()
    fits = []
    accepted = []
    excluded = {}
    for k in range(scan_map.n_scans):
        try:
            fit = LorentzianFit(weighting="irls").fit(scan_map.detuning_grid, scan_map.scans[k]).result_
        except PeakNotFound as exc:
            fits.append(None)
            excluded[k] = f"no peak: {exc}"
            continue
        fits.append(fit)
        why = _outside_window(scan_map.detuning_grid, fit) or gating.check(fit)
        if why is None:
            accepted.append(k)
        else:
            excluded[k] = why
    centers = np.array([fits[k]["center"] for k in accepted])
    widths = np.array([fits[k]["fwhm"] for k in accepted])
    reason = None
    if not accepted:
        reason = f"no scan passed gating ({len(excluded)} excluded)"
    return ScanStatistics(centers, widths, fits, accepted, excluded, reason)


def _outside_window(grid, fit):
    """A peak must sit inside the scan with background visible on both sides."""
    span = grid[-1] - grid[0]
    if not grid[0] <= fit["center"] <= grid[-1]:
        return f"center {fit['center'] / 1e6:.1f} MHz outside the scan"
    if fit["fwhm"] > 0.5 * span:
        return f"linewidth {fit['fwhm'] / 1e6:.1f} MHz wider than half the scan"
    return None


def _halves(scan_map, k, fit):
    """Observed and expected signal in the first and second half (in scan
    order) of the peak region defined by ``fit``, background removed."""
    f = scan_map.detuning_grid
    lo, hi = fit["center"] - fit["fwhm"], fit["center"] + fit["fwhm"]
    order = [i for i in scan_map.scan_order(k) if lo <= f[i] <= hi]
    half = len(order) // 2
    first, second = order[:half], order[half:]
    counts = scan_map.scans[k]
    shape = fit["amplitude"] / (1.0 + (2.0 * (f - fit["center"]) / fit["fwhm"]) ** 2)
    return (counts[first].sum() - fit["offset"] * len(first), shape[first].sum(),
            counts[second].sum() - fit["offset"] * len(second), shape[second].sum())


def reference_line(scan_map):
    """Lorentzian fit of the spectrum summed over all scans."""
    return LorentzianFit(weighting="irls").fit(scan_map.detuning_grid, scan_map.scans.sum(axis=0)).result_


def terminated_then_complete(scan_map, stats, min_first=0.5, max_second=0.25, reference=None):
    """Scans that show a complete peak right after a scan whose fluorescence stopped
    inside the line.

    ``reference`` (default: fit of the summed spectrum) fixes the line
    position and width. Scan ``k`` is complete when its accepted fit lies
    within a quarter linewidth of the reference center and both halves of its
    peak region hold at least ``min_first`` of the expected signal. Scan
    ``k - 1`` is terminated when the half of the reference region it visited
    first holds at least ``min_first`` of the expected signal and the second
    half at most ``max_second``. Returns the indices ``k``.
    """
    picked = []
    good = set(stats.accepted)
    if not good:
        return picked
    ref = reference if reference is not None else reference_line(scan_map)
    for k in range(1, scan_map.n_scans):
        if k not in good:
            continue
        fit = stats.fits[k]
        if abs(fit["center"] - ref["center"]) > 0.25 * ref["fwhm"]:
            continue
        own1, exp1, own2, exp2 = _halves(scan_map, k, fit)
        if exp1 <= 0 or exp2 <= 0 or own1 < min_first * exp1 or own2 < min_first * exp2:
            continue
        # expected signal of scan k - 1 scaled to the complete scan's amplitude
        scaled = dict(ref.params, amplitude=fit["amplitude"], offset=fit["offset"])
        obs1, exp1, obs2, exp2 = _halves(scan_map, k - 1, scaled)
        if obs1 >= min_first * exp1 and obs2 <= max_second * exp2:
            picked.append(k)
    return picked
