import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from saunet3d.phantom import PhantomConfig, generate_dataset  # noqa: E402

# (H, W, D) of the five scanner protocols in the public WMH training data
SCANNER_SHAPES = {
    "3T Philips Achieva": (240, 240, 48),
    "3T Siemens TrioTim": (232, 256, 48),
    "3T GE Signa HDxt": (132, 256, 83),
    "3T Philips Ingenuity": (321, 240, 83),
    "1.5T GE Signa HDxt": (128, 256, 103),
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def two_phantoms():
    return generate_dataset(2, PhantomConfig(), seed=0)


@pytest.fixture
def phantom_dir(tmp_path, two_phantoms):
    from saunet3d.volume_io import save_case, write_index

    d = tmp_path / "data"
    d.mkdir()
    for c in two_phantoms:
        save_case(c, d)
    write_index(d, two_phantoms)
    return d


# -- acceptance reporting -------------------------------------------------------
#
# Tests marked ``@pytest.mark.criterion("name")`` get one PASS/FAIL line each,
# printed as they finish and repeated in the terminal summary.

_criteria: list = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported as PASS/FAIL")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.failed):
        status = "PASS" if rep.passed else "FAIL"
        line = f"{status} {marker.args[0]} ({rep.duration:.1f}s)"
        _criteria.append(line)
        tr = item.config.pluginmanager.get_plugin("terminalreporter")
        if tr is not None:
            tr.write_line(f"[acceptance] {line}")


def pytest_terminal_summary(terminalreporter):
    if _criteria:
        terminalreporter.section("acceptance criteria")
        for line in _criteria:
            terminalreporter.write_line(line)
