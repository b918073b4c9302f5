import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad, solve_ivp
from scipy.optimize import brentq

from snvsim.kinetics import (
    DARK,
    GROUND,
    EmitterParams,
    LaserState,
    NonUniqueSteadyStateWarning,
    RateSet,
    SpectralDiffusionParams,
    StateVector,
    TimescaleSeparationViolated,
    build_rates,
    effective_telegraph,
    excited_fraction_qss,
    expected_count_rate,
    format_emitter,
    integrate_occupation,
    parse_emitter,
    propagate,
    steady_state,
)
from snvsim._kvfile import ConfigError

EM = EmitterParams(ion_coeff_green=3e9, ion_coeff_res=8e9, rec_coeff_green=3e6,
                   detect_eff=2e-3, bg_dark_cps=20.0, bg_green_cps_per_W=5e6)


def rk4(rates, p0, t, h):
    g = rates.generator()
    p = p0.as_array().copy()
    n = int(round(t / h))
    for _ in range(n):
        k1 = g @ p
        k2 = g @ (p + 0.5 * h * k1)
        k3 = g @ (p + 0.5 * h * k2)
        k4 = g @ (p + h * k3)
        p = p + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return p


def qss_fraction(s):
    return (s / 2) / (s + 1)


def test_saturated_excited_fraction_is_quarter():
    em = EmitterParams()
    rates = build_rates(em, LaserState(res_power=em.sat_power_resonant))
    assert excited_fraction_qss(rates) == pytest.approx(0.25, abs=1e-15)


def test_no_drive_leaves_only_spontaneous_decay():
    rates = build_rates(EM, LaserState())
    assert (rates.k_pump, rates.k_stim, rates.k_ion, rates.k_rec) == (0.0, 0.0, 0.0, 0.0)
    assert rates.gamma_sp == 1.0 / EM.lifetime_excited


def test_natural_linewidth_for_measured_lifetime():
    assert EmitterParams(lifetime_excited=5.2e-9).natural_linewidth() == pytest.approx(30.6e6, abs=0.1e6)


def test_rates_are_linear_in_power_with_zero_intercept():
    a = build_rates(EM, LaserState(2e-9, 0.0, 10e-6))
    b = build_rates(EM, LaserState(4e-9, 0.0, 20e-6))
    assert b.k_ion == pytest.approx(2 * a.k_ion, rel=1e-14)
    assert b.k_rec == pytest.approx(2 * a.k_rec, rel=1e-14)
    assert build_rates(EM, LaserState(0.0, 0.0, 0.0)).k_ion == 0.0


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        LaserState(res_power=-1e-9)
    with pytest.raises(ValueError):
        LaserState(res_detuning=math.inf)
    with pytest.raises(ValueError):
        EmitterParams(lifetime_excited=0.0)
    with pytest.raises(ValueError):
        EmitterParams(detect_eff=0.0)
    with pytest.raises(ValueError):
        EmitterParams(ion_coeff_green=-1.0)
    with pytest.raises(ValueError):
        RateSet(1.0, 2.0, 1.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        StateVector(0.5, 0.4, 0.0)
    with pytest.raises(ValueError):
        SpectralDiffusionParams(jump_prob_per_init_pulse=1.5)
    assert not SpectralDiffusionParams().enabled


@pytest.mark.parametrize("s", [0.01, 1.0, 10.0])
def test_power_broadening_law_by_root_finding(s):
    em = EmitterParams()
    laser = LaserState(res_power=s * em.sat_power_resonant)
    peak = excited_fraction_qss(build_rates(em, laser))

    def excess(delta):
        return excited_fraction_qss(build_rates(em, LaserState(laser.res_power, delta))) - peak / 2

    half = brentq(excess, 0.0, 100 * em.natural_linewidth() * math.sqrt(1 + s), xtol=1e-6, rtol=1e-14)
    assert 2 * half == pytest.approx(em.natural_linewidth() * math.sqrt(1 + s), rel=1e-3)


def test_excited_fraction_is_monotone_and_bounded():
    em = EmitterParams()
    powers = np.logspace(-12, -3, 60)
    pe = [excited_fraction_qss(build_rates(em, LaserState(p))) for p in powers]
    assert np.all(np.diff(pe) > 0)
    assert max(pe) < 0.5


def test_steady_state_special_cases():
    with pytest.warns(NonUniqueSteadyStateWarning):
        assert steady_state(RateSet.from_rates(0.0, 1e8)) == GROUND
    assert steady_state(RateSet.from_rates(1e6, 1e8, k_ion=10.0)) == DARK
    ss = steady_state(RateSet.from_rates(1e6, 1e8))
    assert ss.p_dark == 0.0
    assert ss.p_excited == pytest.approx(1e6 / (2e6 + 1e8), rel=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.floats(1e2, 1e5), st.floats(1e3, 1e5), st.floats(0.1, 50), st.floats(0.1, 50))
def test_steady_state_is_long_time_limit(kp, g, ki, kr):
    rates = RateSet.from_rates(kp, g, ki, kr)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ss = steady_state(rates).as_array()
    late = propagate(rates, GROUND, 200.0 / min(ki, kr) + 200.0 / g).as_array()
    assert np.allclose(ss, late, atol=1e-9, rtol=0)
    assert abs(ss.sum() - 1) < 1e-12


def test_propagate_at_zero_time_is_identity():
    p0 = StateVector(0.2, 0.3, 0.5)
    assert propagate(build_rates(EM, LaserState(5e-9)), p0, 0.0) is p0


def test_pure_recovery_is_single_exponential():
    rates = RateSet.from_rates(0.0, 1e8, 0.0, 37.0)
    for t in (1e-3, 0.01, 0.1):
        assert propagate(rates, DARK, t).p_dark == pytest.approx(math.exp(-37.0 * t), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.floats(1.0, 1e3), st.floats(1.0, 1e3), st.floats(0.0, 1e3), st.floats(0.0, 1e3))
def test_propagate_matches_fixed_step_rk4(kp, g, ki, kr):
    rates = RateSet.from_rates(kp, g, ki, kr)
    t = 5.0 / rates.max_rate
    p0 = StateVector(0.6, 0.1, 0.3)
    ref = rk4(rates, p0, t, 1e-3 / rates.max_rate)
    out = propagate(rates, p0, t).as_array()
    assert np.allclose(out, ref, atol=1e-6, rtol=0)


def test_propagate_handles_stiff_realistic_rates():
    rates = build_rates(EM, LaserState(5e-9, 0.0, 11.5e-6))
    fun = lambda t, p: rates.generator() @ p  # noqa: E731
    jac = lambda t, p: rates.generator()  # noqa: E731
    sol = solve_ivp(fun, (0, 5e-3), GROUND.as_array(), method="Radau", jac=jac, rtol=1e-11, atol=1e-14)
    out = propagate(rates, GROUND, 5e-3).as_array()
    assert np.allclose(out, sol.y[:, -1], rtol=1e-7, atol=1e-12)


def test_integrate_occupation_matches_quadrature():
    rates = RateSet.from_rates(300.0, 900.0, 40.0, 25.0)
    p0 = StateVector(0.3, 0.2, 0.5)
    t = 0.02
    integral, end = integrate_occupation(rates, p0, t)
    for i in range(3):
        ref, _ = quad(lambda s: propagate(rates, p0, s).as_array()[i], 0, t, epsabs=1e-14, epsrel=1e-12)
        assert integral[i] == pytest.approx(ref, rel=1e-9, abs=1e-15)
    assert np.allclose(end.as_array(), propagate(rates, p0, t).as_array(), atol=1e-14)


def test_effective_telegraph_definitions():
    rates = build_rates(EM, LaserState(5e-9, 0.0, 11.5e-6))
    k_off, k_on, pb = effective_telegraph(rates)
    pe = rates.k_pump / (2 * rates.k_pump + rates.gamma_sp)
    assert k_off == pytest.approx(pe * rates.k_ion, rel=1e-14)
    assert k_on == rates.k_rec
    assert pb == pytest.approx(k_on / (k_on + k_off), rel=1e-14)
    k_off, _, pb = effective_telegraph(build_rates(EM, LaserState(5e-9)).__class__.from_rates(1e6, 1e8))
    assert (k_off, pb) == (0.0, 1.0)


def test_effective_telegraph_requires_separation():
    with pytest.raises(TimescaleSeparationViolated):
        effective_telegraph(RateSet.from_rates(10.0, 100.0, k_ion=5.0, k_rec=5.0))


def test_telegraph_relaxation_is_slow_generator_eigenvalue():
    rates = build_rates(EM, LaserState(5e-9, 0.0, 11.5e-6))
    k_off, k_on, _ = effective_telegraph(rates)
    eig = np.sort(-np.linalg.eigvals(rates.generator()).real)
    # the reduction is first order in charge rate / optical rate (~1e-5 here)
    assert eig[1] == pytest.approx(k_off + k_on, rel=1e-3)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e5, 1e8), st.floats(1e7, 1e9), st.floats(1e-3, 1.0), st.floats(1e-3, 1.0))
def test_telegraph_bright_fraction_matches_steady_state(kp, g, fi, fr):
    rates = RateSet.from_rates(kp, g)
    charge_budget = (kp + g) / 1000.0
    rates = RateSet.from_rates(kp, g, fi * charge_budget / 2, fr * charge_budget / 2)
    _, _, pb = effective_telegraph(rates, min_separation=1000.0)
    ss = steady_state(rates)
    assert pb == pytest.approx(1 - ss.p_dark, rel=0.01)


def test_expected_count_rate_terms():
    off = LaserState()
    assert expected_count_rate(EM, off, GROUND) == EM.bg_dark_cps
    state = StateVector(0.9, 0.1, 0.0)
    a = expected_count_rate(EM, LaserState(green_power=10e-6), state)
    b = expected_count_rate(EM, LaserState(green_power=20e-6), state)
    assert b - a == pytest.approx(EM.bg_green_cps_per_W * 10e-6, rel=1e-12)


def test_count_rate_peak_does_not_depend_on_efficiency():
    deltas = np.linspace(-60e6, 60e6, 121) + 3e6
    em = EM.with_center(3e6)
    for eta in (1e-4, 1e-2, 1.0):
        e = EmitterParams(**{**em.__dict__, "detect_eff": eta})
        rates = [expected_count_rate(e, LaserState(1e-9, d), StateVector.from_array(
            [1 - excited_fraction_qss(build_rates(e, LaserState(1e-9, d))),
             excited_fraction_qss(build_rates(e, LaserState(1e-9, d))), 0.0])) for d in deltas]
        assert deltas[int(np.argmax(rates))] == pytest.approx(3e6)


def test_emitter_file_round_trip_and_errors():
    em = EmitterParams(ion_coeff_green=3.2201e9, ion_coeff_res=7.8e9, rec_coeff_green=3.3e6,
                       center_frequency=-12.5e6, spectral_diffusion=SpectralDiffusionParams(0.3, 4e6))
    text = format_emitter(em, {"source": "test"})
    back, prov = parse_emitter(text)
    assert back == em
    assert prov == {"source": "test"}
    with pytest.raises(ConfigError, match="line 3"):
        parse_emitter("[emitter]\nlifetime_ns = 5.2\nsat_power_nW = -1\n"
                      "ion_coeff_green_Hz_per_uW = 0\nion_coeff_res_Hz_per_nW = 0\n"
                      "rec_coeff_green_Hz_per_uW = 0\ndetect_eff = 0.1\n")
    with pytest.raises(ConfigError, match="unknown key"):
        parse_emitter(text.replace("detect_eff", "detection"))
    with pytest.raises(ConfigError, match="missing"):
        parse_emitter("[emitter]\nlifetime_ns = 5.2\n")


COEFF = st.one_of(st.just(0.0), st.floats(1e-3, 1e10))


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-9, 1e-7), st.floats(1e-9, 1e-6), COEFF, COEFF, COEFF,
       st.floats(1e-6, 1.0), st.floats(-1e9, 1e9).filter(lambda c: c == 0 or abs(c) > 1e-3))
def test_emitter_file_round_trip_property(tau, psat, cg, cr, crec, eta, center):
    em = EmitterParams(lifetime_excited=tau, sat_power_resonant=psat, ion_coeff_green=cg,
                       ion_coeff_res=cr, rec_coeff_green=crec, detect_eff=eta, center_frequency=center)
    back, _ = parse_emitter(format_emitter(em))
    for name in ("lifetime_excited", "sat_power_resonant", "ion_coeff_green", "ion_coeff_res",
                 "rec_coeff_green", "detect_eff", "center_frequency"):
        assert getattr(back, name) == pytest.approx(getattr(em, name), rel=4e-16, abs=0)
    again, _ = parse_emitter(format_emitter(back))
    assert again == back
