import sys

import numpy as np
import pytest
from hypothesis import settings

from bcastnet.audio import DspConfig
from bcastnet.data import build_features, make_micro_dataset, scan_dataset
from bcastnet.tensor import precision, reset_tape

settings.register_profile("default", max_examples=30, deadline=None)
settings.load_profile("default")


@pytest.fixture(autouse=True)
def fresh_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def micro(tmp_path_factory):
    """Bundled synthetic corpus (2 classes x 8 clips of 2 s) with its feature cache."""
    base = tmp_path_factory.mktemp("micro")
    root = make_micro_dataset(base / "audio")
    manifest = scan_dataset(root, "micro")
    cache, _ = build_features(manifest, DspConfig(), base / "cache")
    return manifest, cache


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
