"""Ready-made synthetic scenes.

Cars are 1.8 m wide, 1.6 m tall and 4.2 m long, standing on a ground plane
1.5 m below the camera. Buildings line both sides of the road.
"""

from __future__ import annotations

import math

import numpy as np

from .dataio import NoiseSpec
from .geometry import Intrinsics, SE3Pose, so3_exp
from .synthetic import Box, ObjectScript, SyntheticSceneSpec

GROUND = 1.5
CAR = (1.8, 1.6, 4.2)
VGA = Intrinsics(721.5, 319.5, 239.5, 640, 480)


def kmh_to_step(kmh: float, frame_period: float = 0.1) -> float:
    return kmh / 3.6 * frame_period


def car(name, x, z, speed=0.0, yaw_rate_deg=0.0, heading_deg=0.0, visible=None):
    """A car whose centre sits at (x, z) on the road, driving along its own +z."""
    pose = SE3Pose(so3_exp([0.0, math.radians(heading_deg), 0.0]), [x, GROUND - CAR[1] / 2, z])
    twist = np.array([0.0, 0.0, speed, 0.0, math.radians(yaw_rate_deg), 0.0])
    return ObjectScript(name, CAR, pose, twist, visible)


def street(length=90.0, setback=7.0):
    """Alternating building blocks on both sides of the road."""
    boxes = []
    z = -6.0
    i = 0
    while z < length:
        depth = 10.0 + 4.0 * (i % 3)
        for side, height in ((-1, 7.0 + 3 * (i % 2)), (1, 9.0 - 2 * (i % 2))):
            width = 8.0
            x = side * (setback + width / 2 + (i % 2))
            boxes.append(Box((width, height, depth), SE3Pose.from_translation(
                [x, GROUND - height / 2, z + depth / 2])))
        z += depth + 2.0
        i += 1
    return boxes


def traffic_scene(n_frames=10, K: Intrinsics = VGA, noise: NoiseSpec | None = None, seed=0):
    """Camera driving forward with three cars: a near one in the left lane, a
    mid-range one in the right lane and a small far one straight ahead."""
    objects = [
        car("near", -2.6, 9.0, speed=0.85),
        car("mid", 2.8, 17.0, speed=0.9),
        car("far", 0.3, 33.0, speed=0.85),
    ]
    return SyntheticSceneSpec(K, n_frames, np.array([0.0, 0.0, 0.8, 0.0, 0.0, 0.0]), objects, street(),
                              noise=noise, seed=seed)


def turning_scene(n_frames=10, K: Intrinsics = VGA):
    """Camera driving forward while yawing; one car turns, one drives
    straight and one crosses the road far ahead."""
    objects = [
        car("turning", -2.0, 12.0, speed=0.8, yaw_rate_deg=1.5),
        car("straight", 3.0, 18.0, speed=0.8, heading_deg=3.0),
        car("crossing", -3.0, 32.0, speed=0.4, heading_deg=90.0),
    ]
    cam = np.array([0.0, 0.0, 0.7, 0.0, 0.012, 0.0])
    return SyntheticSceneSpec(K, n_frames, cam, objects, street())


def classification_scene(n_frames=6, K: Intrinsics = VGA, noise: NoiseSpec | None = None, seed=0):
    """Two moving cars and two parked ones, camera driving forward."""
    objects = [
        car("moving-ahead", -0.3, 13.0, speed=0.8),
        car("moving-right", 2.6, 19.0, speed=1.0),
        car("parked-right", 2.8, 10.0),
        car("parked-left", -3.4, 11.0),
    ]
    return SyntheticSceneSpec(K, n_frames, np.array([0.0, 0.0, 0.5, 0.0, 0.0, 0.0]), objects, street(),
                              noise=noise, seed=seed)


def tracking_scene(n_frames=10, K: Intrinsics = VGA, hidden=(4, 5)):
    """Three moving cars; the middle one is hidden during ``hidden`` frames."""
    visible = [k not in hidden for k in range(n_frames)]
    objects = [
        car("left", -2.6, 10.0, speed=0.8),
        car("occluded", 2.8, 15.0, speed=0.9, visible=visible),
        car("ahead", 0.2, 22.0, speed=0.75),
    ]
    return SyntheticSceneSpec(K, n_frames, np.array([0.0, 0.0, 0.6, 0.0, 0.0, 0.0]), objects, street())


def velocity_scene(n_frames=10, K: Intrinsics = VGA, kmh=30.0, noise: NoiseSpec | None = None, seed=0):
    """One car at a constant ``kmh`` next to a slower camera."""
    step = kmh_to_step(kmh)
    objects = [car("target", -2.6, 10.0, speed=step)]
    return SyntheticSceneSpec(K, n_frames, np.array([0.0, 0.0, 0.6, 0.0, 0.0, 0.0]), objects, street(),
                              noise=noise, seed=seed)


def static_scene(n_frames=3, K: Intrinsics = VGA):
    """Parked cars and a stationary camera."""
    objects = [car("parked", 2.8, 10.0), car("parked2", -3.0, 14.0)]
    return SyntheticSceneSpec(K, n_frames, np.zeros(6), objects, street())


PRESETS = {
    "traffic": traffic_scene,
    "turning": turning_scene,
    "classification": classification_scene,
    "tracking": tracking_scene,
    "velocity": velocity_scene,
    "static": static_scene,
}
