"""Analytic synthetic dynamic scenes with exact depth, flow, masks and poses.

The world frame is the first camera frame (x right, y down, z forward). The
scene is a ground plane ``y = ground_height`` plus oriented boxes: static
boxes stand in for buildings, scripted boxes are the moving objects. Each
pixel's depth comes from an exact ray intersection, and the flow of a pixel
is the projection into the next frame of the surface point it sees, moved by
that surface's scripted motion. Flow is therefore exact wherever the point
stays in front of the camera, even when it becomes occluded.

An object's pose evolves by body-fixed twists, ``L_k = L_{k-1} exp(xi_k)``;
the camera pose likewise by ``W_k = W_{k-1} exp(xi_k)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import GroundTruth, NoiseSpec, apply_noise, write_sequence
from .geometry import Intrinsics, SE3Pose, se3_exp, so3_exp
from .pipeline import Frame

_NEAR = 1e-3


class SceneError(ValueError):
    pass


@dataclass
class Box:
    """Axis-aligned box in its own frame, ``extent`` = full (x, y, z) lengths."""

    extent: tuple
    pose: SE3Pose


@dataclass
class ObjectScript:
    name: str
    extent: tuple
    initial_pose: SE3Pose
    motion: np.ndarray
    visible: list | None = None


@dataclass
class SyntheticSceneSpec:
    intrinsics: Intrinsics
    n_frames: int
    camera_motion: np.ndarray
    objects: list = field(default_factory=list)
    static_boxes: list = field(default_factory=list)
    ground_height: float | None = 1.5
    frame_period: float = 0.1
    seed: int = 0
    noise: NoiseSpec | None = None

    def camera_twists(self) -> np.ndarray:
        return _twists(self.camera_motion, self.n_frames)

    def object_twists(self, i: int) -> np.ndarray:
        return _twists(self.objects[i].motion, self.n_frames)

    def visible(self, i: int, k: int) -> bool:
        vis = self.objects[i].visible
        return True if vis is None else bool(vis[k])

    def to_dict(self) -> dict:
        K = self.intrinsics
        d = {
            "intrinsics": {"f": K.f, "cu": K.cu, "cv": K.cv, "width": K.width, "height": K.height},
            "n_frames": self.n_frames,
            "frame_period": self.frame_period,
            "seed": self.seed,
            "ground_height": self.ground_height,
            "camera_motion": np.asarray(self.camera_motion, dtype=float).tolist(),
            "static_boxes": [{"extent": list(b.extent), "pose": _pose_dict(b.pose)} for b in self.static_boxes],
            "objects": [
                {"name": o.name, "extent": list(o.extent), "initial_pose": _pose_dict(o.initial_pose),
                 "motion": np.asarray(o.motion, dtype=float).tolist(),
                 "visible": None if o.visible is None else [bool(v) for v in o.visible]}
                for o in self.objects
            ],
        }
        if self.noise is not None:
            n = self.noise
            d["noise"] = {"disparity_accuracy": n.disparity_accuracy, "baseline": n.baseline,
                          "flow_sigma": list(n.flow_sigma),
                          "object_flow_sigma": None if n.object_flow_sigma is None else list(n.object_flow_sigma)}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSceneSpec":
        try:
            K = Intrinsics(**d["intrinsics"])
            noise = NoiseSpec(**d["noise"]) if d.get("noise") else None
            return cls(
                intrinsics=K,
                n_frames=int(d["n_frames"]),
                camera_motion=np.asarray(d["camera_motion"], dtype=float),
                objects=[ObjectScript(o.get("name", f"object{i + 1}"), tuple(o["extent"]),
                                      _pose_from_dict(o["initial_pose"]), np.asarray(o["motion"], dtype=float),
                                      o.get("visible"))
                         for i, o in enumerate(d.get("objects", []))],
                static_boxes=[Box(tuple(b["extent"]), _pose_from_dict(b["pose"])) for b in d.get("static_boxes", [])],
                ground_height=d.get("ground_height", 1.5),
                frame_period=float(d.get("frame_period", 0.1)),
                seed=int(d.get("seed", 0)),
                noise=noise,
            )
        except (KeyError, TypeError) as exc:
            raise SceneError(f"invalid scene description: {exc!r}") from exc

    @classmethod
    def load(cls, path) -> "SyntheticSceneSpec":
        path = Path(path)
        try:
            return cls.from_dict(json.loads(path.read_text()))
        except OSError as exc:
            raise SceneError(f"{path}: {exc.strerror or exc}") from exc
        except json.JSONDecodeError as exc:
            raise SceneError(f"{path}: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")


def _pose_dict(p: SE3Pose) -> dict:
    return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}


def _pose_from_dict(d) -> SE3Pose:
    if "rotvec" in d:
        return SE3Pose(so3_exp(d["rotvec"]), d["translation"])
    return SE3Pose(d.get("rotation", np.eye(3)), d["translation"])


def _twists(motion, n_frames) -> np.ndarray:
    m = np.asarray(motion, dtype=float)
    if m.ndim == 1:
        m = np.tile(m, (max(n_frames - 1, 0), 1))
    if m.shape != (max(n_frames - 1, 0), 6):
        raise SceneError(f"motion script must be a twist or {n_frames - 1} twists, got shape {m.shape}")
    return m


def scripted_poses(spec: SyntheticSceneSpec):
    """World poses of the camera and of every object, per frame."""
    cams = [SE3Pose.identity()]
    for xi in spec.camera_twists():
        cams.append(cams[-1] @ se3_exp(xi))
    objs = []
    for i, o in enumerate(spec.objects):
        poses = [o.initial_pose]
        for xi in spec.object_twists(i):
            poses.append(poses[-1] @ se3_exp(xi))
        objs.append(poses)
    return cams, objs


def _pixel_rays(K: Intrinsics) -> np.ndarray:
    vv, uu = np.mgrid[0:K.height, 0:K.width]
    return np.stack([(uu - K.cu) / K.f, (vv - K.cv) / K.f, np.ones(uu.shape)], axis=-1).reshape(-1, 3)


def _box_corners(extent) -> np.ndarray:
    e = np.asarray(extent, dtype=float) / 2
    return np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * e


def _intersect_box(rays, extent, box_in_cam: SE3Pose) -> np.ndarray:
    """Depth of the first entry of each ray (from the camera centre) into the box; inf on miss."""
    inv = box_in_cam.inverse()
    o = inv.translation
    d = rays @ inv.rotation.T
    half = np.asarray(extent, dtype=float) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    # a zero direction component leaves only the slab test on the origin
    outside = (d == 0) & (np.abs(o) > half)
    hit = (tmax >= tmin) & (tmin > _NEAR) & ~outside.any(axis=1)
    return np.where(hit, tmin, np.inf)


def _intersect_ground(rays, height, cam: SE3Pose) -> np.ndarray:
    dy = rays @ cam.rotation[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (height - cam.translation[1]) / dy
    return np.where((t > _NEAR) & np.isfinite(t), t, np.inf)


def _footprint(corners_cam, K: Intrinsics):
    """Flat indices of the pixels a box can cover, or None when it straddles the image plane."""
    z = corners_cam[:, 2]
    if np.any(z <= _NEAR):
        return None
    u = K.f * corners_cam[:, 0] / z + K.cu
    v = K.f * corners_cam[:, 1] / z + K.cv
    u0, u1 = max(int(np.floor(u.min())), 0), min(int(np.ceil(u.max())), K.width - 1)
    v0, v1 = max(int(np.floor(v.min())), 0), min(int(np.ceil(v.max())), K.height - 1)
    if u0 > u1 or v0 > v1:
        return np.zeros(0, dtype=np.intp)
    vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    return (vv * K.width + uu).reshape(-1)


def _render(spec, rays, cam: SE3Pose, obj_poses, k):
    """Depth and surface id per pixel; surface ids: -1 none, 0 ground,
    1..S static boxes, S+1.. objects (in script order)."""
    depth = np.full(len(rays), np.inf)
    surf = np.full(len(rays), -1, dtype=np.int64)
    cam_inv = cam.inverse()

    def take(z, sid, idx=None):
        if idx is None:
            closer = z < depth
            depth[closer] = z[closer]
            surf[closer] = sid
            return
        closer = z < depth[idx]
        depth[idx[closer]] = z[closer]
        surf[idx[closer]] = sid

    def take_box(extent, in_cam, sid):
        idx = _footprint(in_cam.apply(_box_corners(extent)), spec.intrinsics)
        if idx is None:
            take(_intersect_box(rays, extent, in_cam), sid)
        elif len(idx):
            take(_intersect_box(rays[idx], extent, in_cam), sid, idx)

    if spec.ground_height is not None:
        take(_intersect_ground(rays, spec.ground_height, cam), 0)
    S = len(spec.static_boxes)
    for j, box in enumerate(spec.static_boxes):
        take_box(box.extent, cam_inv @ box.pose, 1 + j)
    for i, o in enumerate(spec.objects):
        if not spec.visible(i, k):
            continue
        in_cam = cam_inv @ obj_poses[i][k]
        corners = in_cam.apply(_box_corners(o.extent))
        if np.any(corners[:, 2] <= _NEAR):
            raise SceneError(f"object {o.name!r} reaches behind the camera at frame {k} while visible")
        take_box(o.extent, in_cam, 1 + S + i)
    depth[~np.isfinite(depth)] = 0.0
    return depth, surf


def generate_synthetic(spec: SyntheticSceneSpec, out_dir=None, apply_spec_noise=True):
    """Render the scripted scene.

    Returns ``(frames, ground_truth)``, or ``(manifest_path, frames,
    ground_truth)`` when ``out_dir`` is given. Frames carry the exact flow as
    ``flow_gt``; if the scene description carries noise it is applied (seeded by
    ``spec.seed``) unless ``apply_spec_noise`` is false.
    """
    K = spec.intrinsics
    h, w = K.height, K.width
    rays = _pixel_rays(K)
    cams, objs = scripted_poses(spec)
    S = len(spec.static_boxes)
    n_obj = len(spec.objects)

    renders = [_render(spec, rays, cams[k], objs, k) for k in range(spec.n_frames)]
    frames, instances = [], {}
    for k, (depth, surf) in enumerate(renders):
        mask = np.zeros(len(rays), dtype=np.uint16)
        instances[k] = {}
        next_id = 1
        for i in range(n_obj):
            sel = surf == 1 + S + i
            if sel.any():
                mask[sel] = next_id
                instances[k][next_id] = i + 1
                next_id += 1
        flow = None
        if k > 0:
            flow = _flow(rays, *renders[k - 1], cams[k - 1], cams[k], objs, k, S, n_obj, K)
        frames.append(Frame(k, depth.reshape(h, w), mask.reshape(h, w), K, flow,
                            spec.frame_period, flow_gt=flow))
    gt = GroundTruth({k: c for k, c in enumerate(cams)},
                     {i + 1: {k: p for k, p in enumerate(objs[i])} for i in range(n_obj)},
                     instances)
    if apply_spec_noise and spec.noise is not None:
        frames = apply_noise(frames, spec.noise, spec.seed)
    if out_dir is not None:
        return write_sequence(out_dir, frames, gt), frames, gt
    return frames, gt


def _flow(rays, depth_prev, surf_prev, cam_prev, cam_curr, objs, k, S, n_obj, K):
    m = rays * depth_prev[:, None]
    q = np.full_like(m, np.nan)
    T_inv = cam_curr.inverse() @ cam_prev
    static = (surf_prev >= 0) & (surf_prev <= S)
    q[static] = T_inv.apply(m[static])
    for i in range(n_obj):
        sel = surf_prev == 1 + S + i
        if sel.any():
            X = cam_curr.inverse() @ objs[i][k] @ objs[i][k - 1].inverse() @ cam_prev
            q[sel] = X.apply(m[sel])
    z = q[:, 2]
    with np.errstate(invalid="ignore", divide="ignore"):
        ok = z > _NEAR
        u = np.where(ok, K.f * q[:, 0] / z + K.cu, np.nan)
        v = np.where(ok, K.f * q[:, 1] / z + K.cv, np.nan)
    vv, uu = np.divmod(np.arange(len(rays)), K.width)
    flow = np.stack([u - uu, v - vv], axis=-1)
    return flow.reshape(K.height, K.width, 2)
