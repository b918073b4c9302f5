"""Invert measured observables into per-emitter coefficients.

Every rate observable is linear in the three charge coefficients
(green ionization, resonant ionization, green recovery) once the lifetime and
saturation power are fixed, and the bright count rate is linear in the
detection efficiency. Calibration is therefore a weighted non-negative
linear solve followed by an analytic forward check of every target.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import nnls
from sklearn.base import BaseEstimator

from ._kvfile import ConfigError, parse_blocks
from .kinetics import (
    EMITTER_FILE_KEYS,
    EmitterParams,
    LaserState,
    build_rates,
    effective_telegraph,
    excited_fraction_qss,
)

__all__ = [
    "CalibrationTarget",
    "TargetCheck",
    "VerificationReport",
    "Calibrator",
    "InconsistentTargets",
    "Underdetermined",
    "MixedEmitterTargets",
    "calibrate",
    "verify",
    "predict_observable",
    "parse_targets",
    "read_targets_file",
    "OBSERVABLES",
    "TargetsFile",
    "calibrate_file",
    "fixture_provenance",
]

OBSERVABLES = ("decay_rate", "decay_slope_vs_res", "recovery_rate", "bright_cps", "linewidth")
# SI value = file value * factor
_VALUE_UNITS = {
    "decay_rate": ("Hz", 1.0),
    "decay_slope_vs_res": ("Hz_per_nW", 1e9),
    "recovery_rate": ("Hz", 1.0),
    "bright_cps": ("cps", 1.0),
    "linewidth": ("MHz", 1e6),
}
_RATE_COEFFS = ("ion_coeff_green", "ion_coeff_res", "rec_coeff_green")
REQUIRED_FROZEN = ("lifetime_excited", "sat_power_resonant")


class CalibrationError(ValueError):
    pass


class InconsistentTargets(CalibrationError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class Underdetermined(CalibrationError):
    pass


class MixedEmitterTargets(CalibrationError):
    pass


@dataclass(frozen=True)
class CalibrationTarget:
    emitter_id: str
    observable: str
    condition: LaserState
    value: float
    tolerance: float
    figure: str = ""
    sweep_res_powers: tuple = ()

    def __post_init__(self):
        if self.observable not in OBSERVABLES:
            raise ValueError(f"unknown observable '{self.observable}'")
        # zero tolerance is accepted and simply cannot be met by a noisy round trip
        if not self.tolerance >= 0:
            raise ValueError("tolerance must be >= 0")
        if self.observable == "decay_slope_vs_res" and len(self.sweep_res_powers) < 2:
            raise ValueError("decay_slope_vs_res needs at least two sweep powers")
        object.__setattr__(self, "emitter_id", str(self.emitter_id))
        object.__setattr__(self, "sweep_res_powers", tuple(float(p) for p in self.sweep_res_powers))

    @property
    def name(self):
        fig = f"{self.figure}:" if self.figure else ""
        return f"{fig}{self.observable}"


def _ols_slope(x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    xm = x.mean()
    return float(np.sum((x - xm) * (y - y.mean())) / np.sum((x - xm) ** 2))


def _relaxation_rate(emitter, laser):
    k_off, k_on, _ = effective_telegraph(build_rates(emitter, laser))
    return k_off + k_on


def predict_observable(emitter, target):
    """Analytic value of ``target``'s observable for ``emitter`` (SI units)."""
    cond = target.condition
    obs = target.observable
    if obs == "decay_rate":
        return _relaxation_rate(emitter, cond)
    if obs == "decay_slope_vs_res":
        powers = target.sweep_res_powers
        rates = [_relaxation_rate(emitter, replace(cond, res_power=p)) for p in powers]
        return _ols_slope(powers, rates)
    if obs == "recovery_rate":
        return build_rates(emitter, cond).k_rec
    if obs == "bright_cps":
        p_e = excited_fraction_qss(build_rates(emitter, cond))
        return (emitter.detect_eff * emitter.gamma_sp * p_e + emitter.bg_dark_cps
                + emitter.bg_green_cps_per_W * cond.green_power)
    s = cond.res_power / emitter.sat_power_resonant
    return emitter.natural_linewidth() * math.sqrt(1.0 + s)


def _rate_row(emitter, target):
    """Sensitivity of a rate observable to (c_g, c_r, c_rec); exact because linear."""
    row = []
    for coeff in _RATE_COEFFS:
        unit = replace(emitter, **{c: float(c == coeff) for c in _RATE_COEFFS})
        row.append(predict_observable(unit, target))
    return np.array(row)


@dataclass
class TargetCheck:
    target: CalibrationTarget
    predicted: float
    passed: bool

    @property
    def margin(self):
        """Relative deviation ``(predicted - value) / value``."""
        if self.target.value == 0:
            return math.inf if self.predicted != 0 else 0.0
        return (self.predicted - self.target.value) / self.target.value


@dataclass
class VerificationReport:
    emitter_id: str
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    @property
    def failures(self):
        return [c for c in self.checks if not c.passed]

    def to_text(self):
        lines = [f"# verification of emitter {self.emitter_id}"]
        for c in self.checks:
            unit, factor = _VALUE_UNITS[c.target.observable]
            status = "PASS" if c.passed else "FAIL"
            lines.append(
                f"{status} {c.target.name} predicted={c.predicted / factor:.6g} {unit} "
                f"target={c.target.value / factor:.6g} ± {c.target.tolerance / factor:.3g} {unit} "
                f"margin={100 * c.margin:+.2f}%"
            )
        lines.append(f"failures = {len(self.failures)}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {
            "emitter_id": self.emitter_id,
            "passed": self.passed,
            "checks": [
                {
                    "name": c.target.name,
                    "observable": c.target.observable,
                    "predicted": c.predicted,
                    "value": c.target.value,
                    "tolerance": c.target.tolerance,
                    "margin": c.margin,
                    "passed": c.passed,
                }
                for c in self.checks
            ],
        }


def _emitter_id(targets):
    ids = sorted({t.emitter_id for t in targets})
    if len(ids) > 1:
        raise MixedEmitterTargets(f"targets mix emitters {', '.join(ids)}; calibrate one emitter at a time")
    return ids[0] if ids else ""


def verify(params, targets):
    report = VerificationReport(_emitter_id(targets))
    for t in targets:
        pred = predict_observable(params, t)
        report.checks.append(TargetCheck(t, pred, abs(pred - t.value) <= t.tolerance))
    return report


def _weights(targets):
    return np.array([1.0 / max(t.tolerance, 1e-12 * abs(t.value), 1e-300) for t in targets])


def calibrate(targets, frozen):
    """Solve for the coefficients not in ``frozen`` (a dict of EmitterParams fields, SI).

    Order: charge coefficients from all rate targets jointly, then detection
    efficiency from bright count targets. Raises ``Underdetermined`` when a
    free coefficient is not pinned by any target, ``InconsistentTargets`` when
    the solution misses a target tolerance.
    """
    targets = list(targets)
    emitter_id = _emitter_id(targets)
    missing = [k for k in REQUIRED_FROZEN if k not in frozen]
    if missing:
        raise Underdetermined(f"frozen values required for: {', '.join(missing)}")
    unknown = set(frozen) - set(EmitterParams.__dataclass_fields__)
    if unknown:
        raise ValueError(f"unknown frozen fields: {sorted(unknown)}")
    bright = [t for t in targets if t.observable == "bright_cps"]
    if bright:
        missing_bg = [k for k in ("bg_dark_cps", "bg_green_cps_per_W") if k not in frozen]
        if missing_bg:
            raise Underdetermined(f"bright_cps targets need frozen {', '.join(missing_bg)}")

    base = {k: v for k, v in frozen.items()}
    for coeff in _RATE_COEFFS:
        base.setdefault(coeff, 0.0)
    base.setdefault("detect_eff", 1.0)
    emitter = EmitterParams(**base)

    free = [c for c in _RATE_COEFFS if c not in frozen]
    rate_targets = [t for t in targets if t.observable in ("decay_rate", "decay_slope_vs_res", "recovery_rate")]
    if free:
        rows = np.array([_rate_row(emitter, t) for t in rate_targets]).reshape(len(rate_targets), 3)
        fixed = np.array([frozen.get(c, 0.0) if c in frozen else 0.0 for c in _RATE_COEFFS])
        idx = [_RATE_COEFFS.index(c) for c in free]
        a = rows[:, idx] if rate_targets else np.zeros((0, len(free)))
        b = np.array([t.value for t in rate_targets]) - (rows @ fixed if rate_targets else 0.0)
        col_norm = np.linalg.norm(a, axis=0) if a.size else np.zeros(len(free))
        unpinned = [c for c, n in zip(free, col_norm) if n == 0]
        if unpinned:
            raise Underdetermined(f"no target constrains {', '.join(unpinned)}; freeze it or add a target")
        w = _weights(rate_targets)
        aw = (a / col_norm) * w[:, None]
        if np.linalg.matrix_rank(aw) < len(free):
            raise Underdetermined(f"targets cannot separate {', '.join(free)}")
        sol, _ = nnls(aw, b * w)
        emitter = replace(emitter, **{c: float(v / n) for c, v, n in zip(free, sol, col_norm)})

    if "detect_eff" not in frozen:
        if not bright:
            raise Underdetermined("detect_eff is free but there is no bright_cps target")
        gains = []
        net = []
        for t in bright:
            p_e = excited_fraction_qss(build_rates(emitter, t.condition))
            gains.append(emitter.gamma_sp * p_e)
            net.append(t.value - emitter.bg_dark_cps - emitter.bg_green_cps_per_W * t.condition.green_power)
        w = _weights(bright) ** 2
        gains = np.array(gains)
        eta = float(np.sum(w * gains * np.array(net)) / np.sum(w * gains ** 2))
        if not 0 < eta <= 1:
            raise InconsistentTargets(f"bright count targets need detect_eff={eta:.3g}, outside (0, 1]")
        emitter = replace(emitter, detect_eff=eta)

    report = verify(emitter, targets)
    if not report.passed:
        names = ", ".join(c.target.name for c in report.failures)
        raise InconsistentTargets(f"emitter {emitter_id}: cannot meet targets {names}", report)
    return emitter


class Calibrator(BaseEstimator):
    """Estimator wrapper: ``Calibrator(frozen).fit(targets).params_``."""

    def __init__(self, frozen=None):
        self.frozen = frozen

    def fit(self, targets, y=None):
        self.params_ = calibrate(targets, dict(self.frozen or {}))
        self.report_ = verify(self.params_, targets)
        self.free_ = [c for c in (*_RATE_COEFFS, "detect_eff") if c not in (self.frozen or {})]
        return self

    def predict(self, targets):
        return np.array([predict_observable(self.params_, t) for t in targets])


# --- targets file ----------------------------------------------------------------------

_TARGET_KEYS = ("figure", "emitter", "observable", "res_power_nW", "green_power_uW",
                "res_detuning_MHz", "value", "tolerance")


@dataclass
class TargetsFile:
    emitter_id: str
    targets: list
    frozen: dict
    provenance: dict
    digest: str


def parse_targets(text):
    """Parse a targets file.

    Blocks: ``[calibration]`` (``emitter``), ``[frozen]`` (emitter-file keys),
    ``[provenance]`` (free text) and one ``[target]`` per measured value.
    A ``decay_slope_vs_res`` target lists its sweep in ``res_power_nW``.
    """
    blocks = parse_blocks(text)
    headers = [b for b in blocks if b.name == "calibration"]
    if len(headers) != 1:
        raise ConfigError("targets file must contain exactly one [calibration] block")
    header = headers[0]
    header.check_keys(("emitter",))
    emitter_id = header.get_str("emitter")
    frozen = {}
    provenance = {}
    targets = []
    for block in blocks:
        if block.name == "calibration":
            continue
        if block.name == "frozen":
            block.check_keys(EMITTER_FILE_KEYS)
            for key in block.entries:
                name, unit = EMITTER_FILE_KEYS[key]
                frozen[name] = block.get_float(key) * unit
        elif block.name == "provenance":
            provenance.update({k: e.value for k, e in block.entries.items()})
        elif block.name == "target":
            block.check_keys(_TARGET_KEYS)
            observable = block.get_str("observable")
            if observable not in OBSERVABLES:
                raise block.error("observable", f"unknown observable '{observable}'")
            factor = _VALUE_UNITS[observable][1]
            powers = [p * 1e-9 for p in block.get_floats("res_power_nW")] if "res_power_nW" in block.entries else [0.0]
            sweep = ()
            if observable == "decay_slope_vs_res":
                if len(powers) < 2:
                    raise block.error("res_power_nW", "slope target needs a comma-separated sweep")
                sweep = tuple(powers)
            elif len(powers) != 1:
                raise block.error("res_power_nW", "only slope targets take a power list")
            cond = LaserState(
                res_power=0.0 if sweep else powers[0],
                res_detuning=block.get_float("res_detuning_MHz", 0.0) * 1e6,
                green_power=block.get_float("green_power_uW", 0.0, minimum=0.0) * 1e-6,
            )
            targets.append(CalibrationTarget(
                emitter_id=block.get_str("emitter", emitter_id),
                observable=observable,
                condition=cond,
                value=block.get_float("value") * factor,
                tolerance=block.get_float("tolerance", minimum=0.0) * factor,
                figure=block.get_str("figure", ""),
                sweep_res_powers=sweep,
            ))
        else:
            raise ConfigError(f"line {block.line}: unknown block [{block.name}]")
    digest = hashlib.sha256(text.encode()).hexdigest()[:16]
    return TargetsFile(emitter_id, targets, frozen, provenance, digest)


def read_targets_file(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return parse_targets(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def fixture_provenance(targets_file, emitter):
    """Provenance entries recorded in a calibrated emitter file."""
    prov = {"emitter_id": targets_file.emitter_id, "targets_digest": targets_file.digest}
    prov.update(targets_file.provenance)
    solved = [name for name in (*_RATE_COEFFS, "detect_eff") if name not in targets_file.frozen]
    prov["solved"] = ", ".join(solved) if solved else "none"
    prov["frozen"] = ", ".join(sorted(targets_file.frozen))
    prov["targets"] = "; ".join(
        f"{t.name} = {t.value / _VALUE_UNITS[t.observable][1]:g} {_VALUE_UNITS[t.observable][0]}"
        for t in targets_file.targets
    )
    return prov


def calibrate_file(targets_file):
    """Calibrate a parsed targets file; returns ``(EmitterParams, provenance)``."""
    emitter = calibrate(targets_file.targets, targets_file.frozen)
    return emitter, fixture_provenance(targets_file, emitter)
