from pathlib import Path

import pytest

from snvsim import DATA_DIR
from snvsim.kinetics import read_emitter_file

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
FIXTURE_IDS = ("01", "02", "12", "13", "14")


def load_emitter(fixture_id):
    return read_emitter_file(DATA_DIR / f"emitter_{fixture_id}.txt")[0]


@pytest.fixture(scope="session")
def emitter12():
    return load_emitter("12")


@pytest.fixture(scope="session")
def emitter14():
    return load_emitter("14")


@pytest.fixture(scope="session")
def ple_emitter():
    return load_emitter("02")


ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
