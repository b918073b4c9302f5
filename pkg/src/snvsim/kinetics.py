"""Three-state charge/optical kinetics of a single emitter.

States are ordered (ground, excited, dark). Ground and excited form the
bright charge state; the dark state is the doubly charged configuration that
does not fluoresce at the probe frequency. All quantities are SI.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import expm

from ._kvfile import ConfigError, dump_blocks, format_number, parse_blocks

__all__ = [
    "EmitterParams",
    "SpectralDiffusionParams",
    "LaserState",
    "RateSet",
    "StateVector",
    "TimescaleSeparationViolated",
    "NonUniqueSteadyStateWarning",
    "build_rates",
    "steady_state",
    "propagate",
    "integrate_occupation",
    "effective_telegraph",
    "excited_fraction_qss",
    "expected_count_rate",
    "read_emitter_file",
    "parse_emitter",
    "write_emitter_file",
    "format_emitter",
    "EMITTER_FILE_KEYS",
    "GROUND",
    "DARK",
]


class TimescaleSeparationViolated(ValueError):
    """Optical cycling is not fast enough for the bright/dark reduction."""


class NonUniqueSteadyStateWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SpectralDiffusionParams:
    jump_prob_per_init_pulse: float = 0.0
    jump_sigma: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.jump_prob_per_init_pulse <= 1.0:
            raise ValueError("jump_prob_per_init_pulse must lie in [0, 1]")
        if not self.jump_sigma >= 0.0:
            raise ValueError("jump_sigma must be >= 0")

    @property
    def enabled(self):
        return self.jump_prob_per_init_pulse > 0.0 and self.jump_sigma > 0.0


@dataclass(frozen=True)
class EmitterParams:
    """Physical coefficients of one emitter.

    Parameters
    ----------
    lifetime_excited : float
        Excited-state lifetime in s.
    sat_power_resonant : float
        Resonant power (W) at which the saturation parameter equals 1.
    ion_coeff_green, ion_coeff_res : float
        Excited-state to dark transition rate per watt of green and of
        resonant light (Hz/W).
    rec_coeff_green : float
        Dark to bright recovery rate per watt of green light (Hz/W).
    detect_eff : float
        Probability that a radiative decay produces a detected count.
    bg_dark_cps, bg_green_cps_per_W : float
        Detector background with lasers off, and green-induced background.
    center_frequency : float
        Offset (Hz) of the emitter line from the nominal reference frequency
        that laser detunings are quoted against.
    """

    lifetime_excited: float = 5.2e-9
    sat_power_resonant: float = 100e-9
    ion_coeff_green: float = 0.0
    ion_coeff_res: float = 0.0
    rec_coeff_green: float = 0.0
    detect_eff: float = 1e-3
    bg_dark_cps: float = 0.0
    bg_green_cps_per_W: float = 0.0
    center_frequency: float = 0.0
    spectral_diffusion: SpectralDiffusionParams = field(default_factory=SpectralDiffusionParams)

    def __post_init__(self):
        if not self.lifetime_excited > 0:
            raise ValueError("lifetime_excited must be > 0")
        if not self.sat_power_resonant > 0:
            raise ValueError("sat_power_resonant must be > 0")
        for name in ("ion_coeff_green", "ion_coeff_res", "rec_coeff_green",
                     "bg_dark_cps", "bg_green_cps_per_W"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if not 0 < self.detect_eff <= 1:
            raise ValueError("detect_eff must lie in (0, 1]")
        if not math.isfinite(self.center_frequency):
            raise ValueError("center_frequency must be finite")

    @property
    def gamma_sp(self):
        return 1.0 / self.lifetime_excited

    def natural_linewidth(self):
        """Transform-limited FWHM in Hz."""
        return 1.0 / (2.0 * math.pi * self.lifetime_excited)

    def with_center(self, center_frequency):
        return replace(self, center_frequency=center_frequency)


@dataclass(frozen=True)
class LaserState:
    res_power: float = 0.0
    res_detuning: float = 0.0
    green_power: float = 0.0

    def __post_init__(self):
        if not (self.res_power >= 0 and math.isfinite(self.res_power)):
            raise ValueError(f"res_power must be finite and >= 0, got {self.res_power}")
        if not (self.green_power >= 0 and math.isfinite(self.green_power)):
            raise ValueError(f"green_power must be finite and >= 0, got {self.green_power}")
        if not math.isfinite(self.res_detuning):
            raise ValueError("res_detuning must be finite")


@dataclass(frozen=True)
class RateSet:
    k_pump: float
    k_stim: float
    gamma_sp: float
    k_ion: float
    k_rec: float

    def __post_init__(self):
        for name in ("k_pump", "k_stim", "gamma_sp", "k_ion", "k_rec"):
            value = getattr(self, name)
            if not (value >= 0 and math.isfinite(value)):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")
        if self.k_stim != self.k_pump:
            raise ValueError("k_stim must equal k_pump")

    @classmethod
    def from_rates(cls, k_pump, gamma_sp, k_ion=0.0, k_rec=0.0):
        return cls(k_pump, k_pump, gamma_sp, k_ion, k_rec)

    def generator(self):
        """Column-stochastic generator ``G`` with ``dp/dt = G @ p``."""
        kp, ks, g, ki, kr = self.k_pump, self.k_stim, self.gamma_sp, self.k_ion, self.k_rec
        return np.array([
            [-kp, ks + g, kr],
            [kp, -(ks + g + ki), 0.0],
            [0.0, ki, -kr],
        ])

    def as_array(self):
        return np.array([self.k_pump, self.k_stim, self.gamma_sp, self.k_ion, self.k_rec])

    @property
    def max_rate(self):
        return max(self.k_pump, self.k_stim + self.gamma_sp + self.k_ion, self.k_rec)


@dataclass(frozen=True)
class StateVector:
    p_ground: float
    p_excited: float
    p_dark: float

    def __post_init__(self):
        values = (self.p_ground, self.p_excited, self.p_dark)
        if any(not (0.0 <= v <= 1.0) for v in values):
            raise ValueError(f"probabilities must lie in [0, 1], got {values}")
        if abs(sum(values) - 1.0) > 1e-12:
            raise ValueError(f"probabilities must sum to 1, got {sum(values)!r}")

    @classmethod
    def from_array(cls, p):
        p = np.clip(np.asarray(p, dtype=float), 0.0, None)
        p = p / p.sum()
        return cls(float(p[0]), float(p[1]), float(p[2]))

    def as_array(self):
        return np.array([self.p_ground, self.p_excited, self.p_dark])

    @property
    def p_bright(self):
        return self.p_ground + self.p_excited


GROUND = StateVector(1.0, 0.0, 0.0)
DARK = StateVector(0.0, 0.0, 1.0)


def saturation_parameter(emitter, laser):
    return laser.res_power / emitter.sat_power_resonant


def lorentz_factor(emitter, laser):
    delta = laser.res_detuning - emitter.center_frequency
    return 1.0 / (1.0 + (2.0 * delta / emitter.natural_linewidth()) ** 2)


def build_rates(emitter, laser):
    """Rate constants for the given drive.

    Pumping follows the incoherent two-level form: ``k_pump = (gamma/2) s L``
    with stimulated emission at the same rate, so the excited fraction
    saturates at 1/2 and the line power-broadens as ``sqrt(1 + s)``.
    """
    gamma = emitter.gamma_sp
    k_pump = 0.5 * gamma * saturation_parameter(emitter, laser) * lorentz_factor(emitter, laser)
    k_ion = emitter.ion_coeff_green * laser.green_power + emitter.ion_coeff_res * laser.res_power
    k_rec = emitter.rec_coeff_green * laser.green_power
    return RateSet(k_pump, k_pump, gamma, k_ion, k_rec)


def excited_fraction_qss(rates):
    """Excited fraction of the bright manifold once optical cycling has settled."""
    denom = rates.k_pump + rates.k_stim + rates.gamma_sp
    return rates.k_pump / denom if denom > 0 else 0.0


def steady_state(rates):
    """Stationary occupation of the three-state chain.

    Falls back to ground occupation, with a ``NonUniqueSteadyStateWarning``,
    when the chain has more than one closed class.
    """
    kp, ki, kr = rates.k_pump, rates.k_ion, rates.k_rec
    down = rates.k_stim + rates.gamma_sp + ki
    if kp == 0 and ki == 0 and kr == 0:
        warnings.warn("no drive: steady state is not unique", NonUniqueSteadyStateWarning, stacklevel=2)
        return GROUND
    if kr == 0:
        if ki == 0:
            # dark state is disconnected; by convention it is unoccupied
            pe = kp / (kp + down) if down > 0 else 0.0
            return StateVector.from_array([1.0 - pe, pe, 0.0])
        if kp == 0:
            warnings.warn("ground and dark are both absorbing", NonUniqueSteadyStateWarning, stacklevel=2)
            return GROUND
        return DARK
    ratio_e = kp / down
    ratio_d = ki * ratio_e / kr
    return StateVector.from_array([1.0, ratio_e, ratio_d])


def propagate(rates, p0, t):
    """Exact solution of the master equation after time ``t`` (s)."""
    if t < 0:
        raise ValueError("t must be >= 0")
    if t == 0:
        return p0
    p = expm(rates.generator() * t) @ p0.as_array()
    return StateVector.from_array(p)


def integrate_occupation(rates, p0, t):
    """Time integral of the occupation vector over ``[0, t]``.

    Uses the block-matrix exponential ``exp([[G, 0], [I, 0]] t)``, so it is
    exact up to the matrix exponential itself.
    """
    if t < 0:
        raise ValueError("t must be >= 0")
    big = np.zeros((6, 6))
    big[:3, :3] = rates.generator()
    big[3:, :3] = np.eye(3)
    state = np.concatenate([p0.as_array(), np.zeros(3)])
    out = expm(big * t) @ state
    p_end = StateVector.from_array(out[:3])
    return out[3:], p_end


def effective_telegraph(rates, min_separation=100.0):
    """Reduce the chain to bright/dark switching rates.

    Returns ``(k_off, k_on, p_bright_ss)``. The ensemble bright population
    relaxes at ``k_off + k_on``.
    """
    charge = rates.k_ion + rates.k_rec
    optical = rates.k_pump + rates.gamma_sp
    if charge > 0 and optical < min_separation * charge:
        raise TimescaleSeparationViolated(
            f"optical rate {optical:.3g} Hz is less than {min_separation:g}x "
            f"charge rate {charge:.3g} Hz"
        )
    k_off = excited_fraction_qss(rates) * rates.k_ion
    k_on = rates.k_rec
    total = k_on + k_off
    p_bright = k_on / total if total > 0 else 1.0
    return k_off, k_on, p_bright


def timescale_separation(rates):
    charge = rates.k_ion + rates.k_rec
    if charge == 0:
        return math.inf
    return (rates.k_pump + rates.gamma_sp) / charge


def expected_count_rate(emitter, laser, state):
    return (emitter.detect_eff * emitter.gamma_sp * state.p_excited
            + emitter.bg_dark_cps + emitter.bg_green_cps_per_W * laser.green_power)


def background_rate(emitter, laser):
    return emitter.bg_dark_cps + emitter.bg_green_cps_per_W * laser.green_power


# --- emitter parameter file ---------------------------------------------------------

# key -> (field, SI value of one file unit)
EMITTER_FILE_KEYS = {
    "lifetime_ns": ("lifetime_excited", 1e-9),
    "sat_power_nW": ("sat_power_resonant", 1e-9),
    "ion_coeff_green_Hz_per_uW": ("ion_coeff_green", 1e6),
    "ion_coeff_res_Hz_per_nW": ("ion_coeff_res", 1e9),
    "rec_coeff_green_Hz_per_uW": ("rec_coeff_green", 1e6),
    "detect_eff": ("detect_eff", 1.0),
    "bg_dark_cps": ("bg_dark_cps", 1.0),
    "bg_green_cps_per_uW": ("bg_green_cps_per_W", 1e6),
    "center_frequency_MHz": ("center_frequency", 1e6),
}
_REQUIRED_EMITTER_KEYS = ("lifetime_ns", "sat_power_nW", "ion_coeff_green_Hz_per_uW",
                          "ion_coeff_res_Hz_per_nW", "rec_coeff_green_Hz_per_uW", "detect_eff")
_DIFFUSION_KEYS = {"jump_prob_per_init_pulse": 1.0, "jump_sigma_MHz": 1e6}


def parse_emitter(text):
    """Parse emitter file text; returns ``(EmitterParams, provenance dict)``.

    Schema::

        [emitter]            required; unit-suffixed keys, see EMITTER_FILE_KEYS
        [spectral_diffusion] optional; jump_prob_per_init_pulse, jump_sigma_MHz
        [provenance]         optional; free-form text values
    """
    blocks = parse_blocks(text)
    emitter_blocks = [b for b in blocks if b.name == "emitter"]
    if len(emitter_blocks) != 1:
        raise ConfigError("emitter file must contain exactly one [emitter] block")
    kwargs = {}
    provenance = {}
    for block in blocks:
        if block.name == "emitter":
            block.check_keys(EMITTER_FILE_KEYS)
            for key in _REQUIRED_EMITTER_KEYS:
                block.get_str(key)
            for key, (name, unit) in EMITTER_FILE_KEYS.items():
                if key in block.entries:
                    value = block.get_float(key, minimum=None if key == "center_frequency_MHz" else 0.0)
                    kwargs[name] = value * unit
        elif block.name == "spectral_diffusion":
            block.check_keys(_DIFFUSION_KEYS)
            prob = block.get_float("jump_prob_per_init_pulse", 0.0, minimum=0.0)
            if prob > 1:
                raise block.error("jump_prob_per_init_pulse", "must be <= 1")
            sigma = block.get_float("jump_sigma_MHz", 0.0, minimum=0.0) * 1e6
            kwargs["spectral_diffusion"] = SpectralDiffusionParams(prob, sigma)
        elif block.name == "provenance":
            provenance.update({k: e.value for k, e in block.entries.items()})
        else:
            raise ConfigError(f"line {block.line}: unknown block [{block.name}]")
    block = emitter_blocks[0]
    try:
        emitter = EmitterParams(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"line {block.line}: [emitter] {exc}") from None
    return emitter, provenance


def read_emitter_file(path):
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        return parse_emitter(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def format_emitter(emitter, provenance=None, comments=()):
    items = [(key, format_number(getattr(emitter, name), unit))
             for key, (name, unit) in EMITTER_FILE_KEYS.items()]
    blocks = [("emitter", items)]
    sd = emitter.spectral_diffusion
    if sd.enabled or sd.jump_prob_per_init_pulse > 0:
        blocks.append(("spectral_diffusion", [
            ("jump_prob_per_init_pulse", format_number(sd.jump_prob_per_init_pulse, 1.0)),
            ("jump_sigma_MHz", format_number(sd.jump_sigma, 1e6)),
        ]))
    if provenance:
        blocks.append(("provenance", [(k, str(v)) for k, v in provenance.items()]))
    return dump_blocks(blocks, comments)


def write_emitter_file(path, emitter, provenance=None, comments=()):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_emitter(emitter, provenance, comments))
