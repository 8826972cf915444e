import numpy as np
import pytest

from dualcorenet import make_rng, precision
from dualcorenet.data import extract_rois, synth_dataset
from dualcorenet.model import network_config


@pytest.fixture
def f64():
    with precision("f64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def desk():
    return network_config("desk")


@pytest.fixture(scope="session")
def rois(desk):
    images = synth_dataset(12, make_rng(3, 100))
    return [extract_rois(im, desk.bbox_size, desk.context_size, desk.mask_size) for im in images]


def pytest_terminal_summary(terminalreporter):
    import sys
    lines = [ln for name, mod in list(sys.modules.items()) if name.endswith("test_acceptance")
             for ln in getattr(mod, "LINES", [])]
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in sorted(lines, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(ln)
