import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import brentq
from sklearn.base import clone

from conftest import FIXTURE_IDS, load_emitter
from snvsim import DATA_DIR
from snvsim._kvfile import ConfigError
from snvsim.calibrate import (
    CalibrationTarget,
    Calibrator,
    InconsistentTargets,
    MixedEmitterTargets,
    Underdetermined,
    calibrate,
    calibrate_file,
    parse_targets,
    predict_observable,
    read_targets_file,
    verify,
)
from snvsim.kinetics import LaserState, build_rates, effective_telegraph, excited_fraction_qss, parse_emitter
from snvsim.pulses import nW, uW

BASE = {"lifetime_excited": 5.2e-9, "sat_power_resonant": 100e-9}
FIG_B = LaserState(res_power=5 * nW, green_power=11.5 * uW)


def same_params(a, b):
    fields = ("lifetime_excited", "sat_power_resonant", "ion_coeff_green", "ion_coeff_res",
              "rec_coeff_green", "detect_eff", "bg_dark_cps", "bg_green_cps_per_W", "center_frequency")
    # file text carries 17 significant digits, so allow a few ulps
    return all(getattr(a, f) == pytest.approx(getattr(b, f), rel=1e-14, abs=0) for f in fields)


def targets(fid):
    return read_targets_file(DATA_DIR / f"targets_{fid}.txt")


def solved(fid):
    tf = targets(fid)
    return [c for c in ("ion_coeff_green", "ion_coeff_res", "rec_coeff_green", "detect_eff")
            if c not in tf.frozen]


@pytest.mark.parametrize("fid", FIXTURE_IDS)
def test_shipped_fixture_passes_its_targets(fid):
    report = verify(load_emitter(fid), targets(fid).targets)
    assert report.passed, report.to_text()
    assert "failures = 0" in report.to_text()


@pytest.mark.parametrize("fid", FIXTURE_IDS)
def test_recalibration_reproduces_shipped_fixture(fid):
    emitter, prov = calibrate_file(targets(fid))
    assert same_params(emitter, load_emitter(fid))
    assert prov["targets_digest"] == targets(fid).digest


@pytest.mark.parametrize("fid", FIXTURE_IDS)
def test_fixture_records_provenance(fid):
    text = (DATA_DIR / f"emitter_{fid}.txt").read_text()
    _, prov = parse_emitter(text)
    assert prov["targets_digest"] == targets(fid).digest
    assert "sat_power" in prov and "frozen" in prov


@pytest.mark.parametrize("fid,coeff", [(f, c) for f in FIXTURE_IDS for c in solved(f)])
@pytest.mark.parametrize("factor", [0.8, 1.2])
def test_perturbed_solved_coefficient_is_caught(fid, coeff, factor):
    em = load_emitter(fid)
    bad = replace(em, **{coeff: getattr(em, coeff) * factor})
    assert verify(bad, targets(fid).targets).failures


def test_green_coefficient_perturbation_margin_tracks_linearity(emitter12):
    tf = targets("12")
    fig_b = [t for t in tf.targets if t.condition.green_power > 0][0]
    bad = replace(emitter12, ion_coeff_green=1.2 * emitter12.ion_coeff_green)
    check = [c for c in verify(bad, tf.targets).checks if c.target is fig_b][0]
    rates = build_rates(emitter12, fig_b.condition)
    share = excited_fraction_qss(rates) * emitter12.ion_coeff_green * fig_b.condition.green_power
    base = predict_observable(emitter12, fig_b)
    assert not check.passed
    assert check.margin == pytest.approx((base + 0.2 * share) / fig_b.value - 1, rel=1e-9)
    assert 0.15 < check.margin < 0.25


def test_shorter_lifetime_breaks_linewidth_target(ple_emitter):
    tf = targets("02")
    report = verify(replace(ple_emitter, lifetime_excited=4e-9), tf.targets)
    (fail,) = report.failures
    assert fail.target.observable == "linewidth"
    assert replace(ple_emitter, lifetime_excited=4e-9).natural_linewidth() == pytest.approx(39.79e6, rel=1e-3)
    assert fail.predicted > 39.7e6


def test_single_decay_target_gives_unique_green_coefficient():
    t = CalibrationTarget("12", "decay_rate", FIG_B, 1100.0, 55.0)
    frozen = dict(BASE, ion_coeff_res=0.0, rec_coeff_green=0.0, detect_eff=0.00155)
    em = calibrate([t], frozen)

    def excess(c_g):
        return effective_telegraph(build_rates(replace(em, ion_coeff_green=c_g), FIG_B))[0] - 1100.0

    root = brentq(excess, 1.0, 1e11, xtol=1e-6, rtol=1e-14)
    assert em.ion_coeff_green == pytest.approx(root, rel=1e-9)
    grid = np.geomspace(1.0, 1e11, 200)
    assert np.all(np.diff([excess(c) for c in grid]) > 0)


def test_mixed_emitters_are_rejected():
    a = CalibrationTarget("12", "decay_rate", FIG_B, 1100.0, 55.0)
    b = CalibrationTarget("14", "recovery_rate", LaserState(green_power=30.1 * uW), 100.0, 10.0)
    with pytest.raises(MixedEmitterTargets, match="12, 14"):
        calibrate([a, b], dict(BASE, ion_coeff_res=0.0, detect_eff=0.1))
    with pytest.raises(MixedEmitterTargets):
        verify(load_emitter("12"), [a, b])


def test_zero_tolerance_on_noisy_targets_is_inconsistent():
    # two resonant-only decay measurements whose ratio differs slightly from the model
    conds = [LaserState(res_power=4 * nW), LaserState(res_power=6 * nW)]
    frozen = dict(BASE, ion_coeff_green=0.0, rec_coeff_green=0.0, detect_eff=0.1)
    noisy = [0.6, 1.37]
    loose = [CalibrationTarget("12", "decay_rate", c, v, 0.1 * v) for c, v in zip(conds, noisy)]
    calibrate(loose, frozen)
    strict = [replace(t, tolerance=0.0) for t in loose]
    with pytest.raises(InconsistentTargets) as info:
        calibrate(strict, frozen)
    assert info.value.report.failures


def test_missing_frozen_values_are_underdetermined():
    t = CalibrationTarget("12", "decay_rate", FIG_B, 1100.0, 55.0)
    with pytest.raises(Underdetermined, match="sat_power_resonant"):
        calibrate([t], {"lifetime_excited": 5.2e-9})
    with pytest.raises(Underdetermined, match="rec_coeff_green|ion_coeff_res|separate"):
        calibrate([t], dict(BASE, detect_eff=0.1))
    with pytest.raises(Underdetermined, match="detect_eff"):
        calibrate([t], dict(BASE, ion_coeff_res=0.0, rec_coeff_green=0.0))


def test_out_of_range_detection_efficiency_is_inconsistent():
    t = CalibrationTarget("1", "bright_cps", LaserState(res_power=1 * nW), 1e9, 1e7)
    frozen = dict(BASE, ion_coeff_green=0.0, ion_coeff_res=0.0, rec_coeff_green=0.0,
                  bg_dark_cps=0.0, bg_green_cps_per_W=0.0)
    with pytest.raises(InconsistentTargets, match="detect_eff"):
        calibrate([t], frozen)


@pytest.mark.parametrize("fid", ["12", "14", "13", "01"])
@pytest.mark.parametrize("p_sat", [50e-9, 300e-9, 1e-6])
def test_saturation_power_choice_leaves_observables_invariant(fid, p_sat):
    tf = targets(fid)
    ref = calibrate(tf.targets, tf.frozen)
    frozen = dict(tf.frozen, sat_power_resonant=p_sat)
    for coeff in ("ion_coeff_green", "ion_coeff_res"):
        if coeff in frozen and frozen[coeff] > 0:
            # frozen coefficients borrowed from another emitter move with P_sat too
            frozen[coeff] = getattr(ref, coeff) * p_sat / ref.sat_power_resonant
    other = calibrate(tf.targets, frozen)
    for t in tf.targets:
        assert predict_observable(other, t) == pytest.approx(predict_observable(ref, t), rel=1e-9)
    if "ion_coeff_green" not in tf.frozen:
        assert other.ion_coeff_green != pytest.approx(ref.ion_coeff_green, rel=0.05)


def test_calibrator_estimator_api():
    tf = targets("14")
    est = Calibrator(frozen=tf.frozen).fit(tf.targets)
    assert same_params(est.params_, load_emitter("14"))
    assert est.report_.passed
    assert est.free_ == ["ion_coeff_green", "rec_coeff_green"]
    pred = est.predict(tf.targets)
    assert np.allclose(pred, [t.value for t in tf.targets], rtol=0.05)
    assert clone(est).get_params()["frozen"] == tf.frozen


def test_target_file_units_and_errors():
    text = (DATA_DIR / "targets_14.txt").read_text()
    tf = parse_targets(text)
    slope = [t for t in tf.targets if t.observable == "decay_slope_vs_res"][0]
    assert slope.value == 301 * 1e9
    assert slope.sweep_res_powers == tuple(p * nW for p in (1, 2, 3, 4, 5, 6))
    assert slope.condition.green_power == 20 * uW
    assert tf.frozen["ion_coeff_res"] == 7.8 * 1e9
    with pytest.raises(ConfigError, match="unknown observable"):
        parse_targets(text.replace("observable = recovery_rate", "observable = blink"))
    with pytest.raises(ConfigError, match="sweep"):
        parse_targets(text.replace("res_power_nW = 1, 2, 3, 4, 5, 6", "res_power_nW = 3"))
    with pytest.raises(ConfigError, match="calibration"):
        parse_targets("[target]\nobservable = decay_rate\nvalue = 1\ntolerance = 1\n")
    with pytest.raises(ValueError, match="tolerance"):
        CalibrationTarget("1", "decay_rate", FIG_B, 1.0, -1.0)


def test_verification_report_lists_margins(emitter12):
    tf = targets("12")
    report = verify(replace(emitter12, ion_coeff_res=2 * emitter12.ion_coeff_res), tf.targets)
    text = report.to_text()
    resonant_only = [t for t in tf.targets if t.condition.green_power == 0][0]
    assert f"FAIL {resonant_only.name}" in text
    assert "failures = 1" in text
    data = report.to_dict()
    assert data["passed"] is False
    assert all(math.isfinite(c["margin"]) for c in data["checks"])
