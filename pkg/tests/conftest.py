import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from raysurrogate.geometry import GLASS, Surface, empty_box, Scene, box_faces  # noqa: E402


@pytest.fixture(scope="session")
def box():
    return empty_box()


@pytest.fixture(scope="session")
def glass_scene():
    """10x10x3 box with a full-height glass partition at x = 7."""
    walls = box_faces(np.zeros(3), np.array([10.0, 10.0, 3.0]))
    return Scene(np.zeros(3), np.array([10.0, 10.0, 3.0]), walls + [Surface(0, 7.0, (0.0, 0.0), (10.0, 3.0), GLASS)], "glass")


def unit_vectors(n, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    proto = sys.modules.get("protocol")
    if proto is None or not proto.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(proto.VERDICTS):
        terminalreporter.write_line(proto.VERDICTS[n])
