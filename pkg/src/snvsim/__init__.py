"""Charge-state kinetics of SnV emitters under resonant and green light.

Modules: ``kinetics`` (rate model and master equation), ``pulses`` (pulse
sequences), ``ssa`` (stochastic simulation), ``ple`` (scan maps),
``analysis`` (fits), ``calibrate`` (coefficients from measured values) and
``cli``.
"""

__version__ = "0.1.0"

from pathlib import Path

from .analysis import (
    ExponentialDecayFit,
    FitResult,
    GatingRules,
    LinearRateFit,
    LorentzianFit,
    PeakNotFound,
    RecoveryStepFit,
    fit_exp_decay,
    fit_linear,
    fit_lorentzian,
    fit_recovery_steps,
    hist_fwhm,
)
from .calibrate import (
    CalibrationTarget,
    Calibrator,
    InconsistentTargets,
    MixedEmitterTargets,
    Underdetermined,
    calibrate,
    verify,
)
from .kinetics import (
    EmitterParams,
    LaserState,
    RateSet,
    SpectralDiffusionParams,
    StateVector,
    build_rates,
    effective_telegraph,
    propagate,
    read_emitter_file,
    steady_state,
)
from .ple import ScanMap, generate_ple, scan_statistics
from .pulses import PulseSegment, PulseSequence, ScanConfig, parse_sequence, serialize_sequence
from .ssa import BinnedTrace, expected_trace, simulate_ensemble, simulate_repetition

DATA_DIR = Path(__file__).parent / "data"
