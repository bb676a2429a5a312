import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sdf_surrogate import geometry  # noqa: E402
from sdf_surrogate.geometry import Family, ShapeFamilySpec  # noqa: E402


@pytest.fixture(scope="session")
def plate_spec():
    return ShapeFamilySpec(Family.PLATE_WITH_HOLES, hole_count_choices=(2,), seed=3)


@pytest.fixture(scope="session")
def plate(plate_spec):
    return geometry.sample_shape(plate_spec, 0)


@pytest.fixture(scope="session")
def disk():
    return geometry.shape_from_params(Family.DISK, [0.1, -0.05, 0.5], shape_id=7)


@pytest.fixture(scope="session")
def blob():
    return geometry.sample_shape(ShapeFamilySpec(Family.BLOB_FOURIER, seed=1), 4)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
