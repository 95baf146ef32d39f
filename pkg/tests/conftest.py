import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cliffordm.data import SynthSpec, synth_generate  # noqa: E402

# (criterion, passed, detail) lines collected by test_acceptance.py
ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_synth(tmp_path_factory):
    """A 60-patient, 32 px synthetic dataset on disk."""
    out = tmp_path_factory.mktemp("synth") / "data"
    synth_generate(SynthSpec(num_patients=60, image_size=32, seed=3), out)
    return out


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
