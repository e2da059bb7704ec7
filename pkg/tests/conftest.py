import numpy as np
import pytest

from mbvo import scenes
from mbvo.geometry import Intrinsics, SE3Pose, se3_exp
from mbvo.synthetic import generate_synthetic

KITTI = Intrinsics(721.5, 609.6, 172.9, 1242, 375)


@pytest.fixture
def K():
    return Intrinsics(721.5, 319.5, 239.5, 640, 480)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_pose(rng, rot=0.3, trans=1.0) -> SE3Pose:
    return se3_exp(np.concatenate([rng.normal(0, trans, 3), rng.normal(0, rot, 3)]))


def random_points(rng, n, K, zmin=4.0, zmax=30.0):
    """Points spread over the field of view of ``K``."""
    z = rng.uniform(zmin, zmax, n)
    u = rng.uniform(0, K.width - 1, n)
    v = rng.uniform(0, K.height - 1, n)
    return np.column_stack([(u - K.cu) / K.f * z, (v - K.cv) / K.f * z, z])


_SCENES = {}


def rendered(name, **kw):
    """Noise-free rendering of a preset, cached for the session."""
    key = (name, tuple(sorted(kw.items())))
    if key not in _SCENES:
        _SCENES[key] = generate_synthetic(scenes.PRESETS[name](**kw))
    return _SCENES[key]


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
