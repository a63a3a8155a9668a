import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

# acceptance lines collected by test_acceptance.report(); printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def sphere_k5():
    from meshray import Scene, make_icosphere

    s = Scene()
    s.add_geometry(make_icosphere(20 * 4**5, 10.0))
    s.commit()
    return s


@pytest.fixture(scope="session")
def vlp16_rig():
    from meshray import SensorRig, vlp16_preset

    return SensorRig(vlp16_preset())
