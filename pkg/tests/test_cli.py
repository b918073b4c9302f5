import csv
import json
import shutil
from dataclasses import replace

import numpy as np
import pytest

from conftest import CONFIGS
from snvsim import DATA_DIR
from snvsim.cli import EXIT_CALIBRATION, EXIT_CONFIG, EXIT_OK, OUT_ENV, main
from snvsim.kinetics import write_emitter_file
from snvsim.ple import read_scanmap
from snvsim.ssa import read_trace_csv

EMITTER12 = DATA_DIR / "emitter_12.txt"


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text.replace("@DATA", str(DATA_DIR)))
    return path


def outputs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.iterdir())}


@pytest.mark.parametrize("command,config,extra", [
    ("simulate", "decay_simultaneous.cfg", ["--reps-override", "300"]),
    ("simulate", "stepwise_darkening.cfg", ["--reps-override", "200"]),
    ("sweep", "sweep_res_power.cfg", ["--reps-override", "200"]),
    ("sweep", "sweep_recovery.cfg", ["--reps-override", "100"]),
])
def test_runs_are_byte_identical_across_thread_counts(tmp_path, command, config, extra):
    runs = []
    for threads in ("1", "4"):
        out = tmp_path / threads
        assert main([command, "--config", str(CONFIGS / config), "--out", str(out),
                     "--threads", threads, *extra]) == EXIT_OK
        runs.append(outputs(out))
    assert runs[0] == runs[1]
    assert "manifest.json" in runs[0]


def test_ple_is_byte_identical_on_rerun(tmp_path):
    cfg = write_cfg(tmp_path, "[run]\nemitter = @DATA/emitter_02.txt\nseed = 3\n"
                              "[ple]\nmode = init_then_scan\nn_scans = 3\nstep_MHz = 5\n")
    for name in ("a", "b"):
        assert main(["ple", "--config", str(cfg), "--out", str(tmp_path / name)]) == EXIT_OK
    assert outputs(tmp_path / "a") == outputs(tmp_path / "b")
    back = read_scanmap(tmp_path / "a" / "scans.csv", tmp_path / "a" / "scans.sidecar.json")
    assert back.scans.shape == (3, 101)
    stats = json.loads((tmp_path / "a" / "statistics.json").read_text())
    assert "terminated_then_complete" in stats


def test_calibrate_and_verify_round_trip(tmp_path, capsys):
    targets = DATA_DIR / "targets_14.txt"
    assert main(["calibrate", str(targets), "--out", str(tmp_path / "cal")]) == EXIT_OK
    written = tmp_path / "cal" / "emitter_14.txt"
    assert written.read_bytes() == (DATA_DIR / "emitter_14.txt").read_bytes()
    assert main(["verify", str(written), str(targets)]) == EXIT_OK
    assert "failures = 0" in capsys.readouterr().out


def test_verify_reports_failure_with_exit_code(tmp_path, capsys, emitter12):
    path = tmp_path / "bad.txt"
    write_emitter_file(path, replace(emitter12, ion_coeff_res=2 * emitter12.ion_coeff_res))
    assert main(["verify", str(path), str(DATA_DIR / "targets_12.txt")]) == EXIT_CALIBRATION
    assert "FAIL" in capsys.readouterr().out


def test_inconsistent_targets_exit_with_calibration_code(tmp_path, capsys):
    # more targets than free coefficients, so the measured values cannot all hold exactly
    text = (DATA_DIR / "targets_13.txt").read_text()
    zero = "\n".join("tolerance = 0" if ln.startswith("tolerance") else ln for ln in text.splitlines())
    path = tmp_path / "zero.txt"
    path.write_text(zero + "\n")
    assert main(["calibrate", str(path), "--out", str(tmp_path / "o")]) == EXIT_CALIBRATION
    assert "calibration error" in capsys.readouterr().err


def test_missing_emitter_names_the_path(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "[run]\nemitter = nowhere.txt\nsequence = simultaneous\nseed = 1\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "nowhere.txt" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize("body,needle", [
    ("[run]\nemitter = @DATA/emitter_12.txt\nsequence = simultaneous\n", "seed"),
    ("[run]\nemitter = @DATA/emitter_12.txt\nsequence = warp\nseed = 1\n", "warp"),
    ("[run]\nemitter = @DATA/emitter_12.txt\nsequence = simultaneous\nseed = 1\n[overrides]\nn_pulses = 3\n",
     "n_pulses"),
    ("[run]\nemitter = @DATA/emitter_12.txt\nsequence = simultaneous\nseed = 1\nmethod = magic\n", "method"),
    ("[run]\nemitter = @DATA/emitter_12.txt\nsequence = simultaneous\nseed = 1\n[bogus]\n", "bogus"),
])
def test_bad_configs_exit_with_config_code(tmp_path, capsys, body, needle):
    cfg = write_cfg(tmp_path, body)
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert needle in capsys.readouterr().err


def test_zero_scans_is_a_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "[run]\nemitter = @DATA/emitter_02.txt\nseed = 1\n[ple]\nmode = res_only\nn_scans = 0\n")
    assert main(["ple", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "n_scans" in capsys.readouterr().err


def test_single_value_sweep_is_degenerate_not_an_error(tmp_path):
    cfg = write_cfg(tmp_path, "[run]\nemitter = @DATA/emitter_14.txt\nsequence = simultaneous\nseed = 1\n"
                              "[overrides]\ngreen_power_uW = 20\nduration_ms = 2\nrepetitions = 100\n"
                              "[sweep]\naxis = res_power\nvalues = 3\n")
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    summary = json.loads((tmp_path / "o" / "sweep_fit.json").read_text())
    assert summary["degenerate"] and summary["linear_fit"] is None
    with open(tmp_path / "o" / "sweep.csv") as fh:
        assert len(list(csv.reader(fh))) == 2


def test_output_directory_defaults_to_environment(tmp_path, monkeypatch):
    cfg = write_cfg(tmp_path, "[run]\nemitter = @DATA/emitter_12.txt\nsequence = simultaneous\nseed = 1\n"
                              "[overrides]\nduration_ms = 1\nrepetitions = 20\n")
    monkeypatch.setenv(OUT_ENV, str(tmp_path / "env_out"))
    assert main(["simulate", "--config", str(cfg)]) == EXIT_OK
    manifest = json.loads((tmp_path / "env_out" / "manifest.json").read_text())
    assert manifest["seed"] == 1
    assert set(manifest["outputs"]) >= {"trace.csv", "segments.csv", "sequence.txt"}


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_cfg(tmp_path, "[run]\nemitter = @DATA/emitter_12.txt\nsequence = simultaneous\nseed = 1\n"
                              "[overrides]\nduration_ms = 1\nrepetitions = 50\n")
    for name, seed in (("a", "1"), ("b", "2")):
        main(["simulate", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", seed])
    a = read_trace_csv(tmp_path / "a" / "trace.csv")
    b = read_trace_csv(tmp_path / "b" / "trace.csv")
    assert not np.array_equal(a.counts, b.counts)


def test_fit_command_reads_simulated_trace(tmp_path, capsys):
    shutil.copy(EMITTER12, tmp_path / "em.txt")
    cfg = write_cfg(tmp_path, "[run]\nemitter = em.txt\nsequence = simultaneous\nseed = 4\n"
                              "[overrides]\nres_power_nW = 5\ngreen_power_uW = 11.5\nduration_ms = 2\n"
                              "repetitions = 2000\n")
    assert main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    with open(tmp_path / "o" / "segments.csv") as fh:
        window = next(r for r in csv.DictReader(fh) if r["label"] == "simultaneous")
    assert main(["fit", str(tmp_path / "o" / "trace.csv"), "--model", "exp_decay",
                 "--t-min-ms", str(float(window["t_start_s"]) * 1e3),
                 "--t-max-ms", str(float(window["t_end_s"]) * 1e3),
                 "--out", str(tmp_path / "f")]) == EXIT_OK
    fit = json.loads((tmp_path / "f" / "fit.json").read_text())
    assert 900 < fit["params"]["rate"] < 1300
    assert "rate" in capsys.readouterr().out
    assert main(["fit", str(tmp_path / "missing.csv"), "--model", "linear"]) == EXIT_CONFIG
