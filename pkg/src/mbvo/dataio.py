"""Sequence files, ground truth records and the depth/flow noise models.

Raster container (little-endian)::

    bytes 0-3    magic b"MBVO"
    bytes 4-15   u32 width, u32 height, u32 channels
    payload      row-major, channels interleaved
                 depth: 1 x float32 (meters, 0 = invalid)
                 flow:  2 x float32 (du, dv in pixels, NaN = invalid)
                 mask:  1 x uint16  (instance id, 0 = background)

Pose files hold one line per frame: the frame index followed by the 12
entries of the row-major 3x4 matrix ``[R | t]``.

Manifest (plain text, ``#`` starts a comment)::

    MBVO-MANIFEST 1
    f 721.5                      # or: fx ... / fy ... (must agree to 0.1%)
    cu 319.5
    cv 239.5
    width 640
    height 480
    frame_period 0.1
    gt_camera gt/camera.txt      # optional, camera-to-world pose per frame
    gt_object 1 gt/object_1.txt  # optional, object-to-world pose per frame
    gt_instances gt/instances.txt  # optional, "frame instance object" lines
    frames
    0 depth/000000.bin - mask/000000.bin
    1 depth/000001.bin flow/000001.bin mask/000001.bin flow_gt/000001.bin

Frame rows are ``index depth flow mask [flow_gt]`` with ``-`` for an absent
raster and paths relative to the manifest. Frame 0 must not carry flow.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .geometry import GeometryError, Intrinsics, SE3Pose
from .pipeline import Frame

MAGIC = b"MBVO"
MANIFEST_MAGIC = "MBVO-MANIFEST"
MANIFEST_VERSION = 1
_HEADER = struct.Struct("<4sIII")
_DTYPES = {"depth": ("<f4", 1), "flow": ("<f4", 2), "flow_gt": ("<f4", 2), "mask": ("<u2", 1)}


class DataError(ValueError):
    pass


class ManifestError(DataError):
    pass


class RasterError(DataError):
    pass


def write_raster(path, array, kind: str) -> None:
    dtype, channels = _DTYPES[kind]
    a = np.asarray(array)
    if channels == 1 and a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3 or a.shape[2] != channels:
        raise RasterError(f"{path}: {kind} raster must have {channels} channel(s), got shape {a.shape}")
    h, w, c = a.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, w, h, c))
        fh.write(np.ascontiguousarray(a, dtype=dtype).tobytes())


def read_raster(path, kind: str, shape=None) -> np.ndarray:
    """Decode a raster; ``shape=(height, width)`` enforces the expected size."""
    dtype, channels = _DTYPES[kind]
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise RasterError(f"{path}: cannot read raster ({exc.strerror})") from exc
    if len(data) < _HEADER.size:
        raise RasterError(f"{path}: truncated header")
    magic, w, h, c = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise RasterError(f"{path}: bad magic {magic!r}")
    if c != channels:
        raise RasterError(f"{path}: expected {channels} channel(s) for {kind}, found {c}")
    if shape is not None and (h, w) != tuple(shape):
        raise RasterError(f"{path}: raster is {w}x{h}, manifest says {shape[1]}x{shape[0]}")
    expected = w * h * c * np.dtype(dtype).itemsize
    if len(data) - _HEADER.size != expected:
        raise RasterError(f"{path}: payload is {len(data) - _HEADER.size} bytes, expected {expected}")
    a = np.frombuffer(data, dtype=dtype, offset=_HEADER.size).reshape(h, w, c)
    return a[..., 0] if channels == 1 else a


def _pose_from_row(values, where) -> SE3Pose:
    M = np.asarray(values, dtype=float).reshape(3, 4)
    try:
        return SE3Pose.from_matrix(M)
    except GeometryError:
        try:
            return SE3Pose.from_matrix(M, normalize=True)
        except GeometryError as exc:
            raise DataError(f"{where}: invalid pose ({exc})") from exc


def write_poses(path, poses: dict) -> None:
    """``poses`` maps frame index -> SE3Pose."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for k in sorted(poses):
            vals = poses[k].matrix3x4().ravel()
            fh.write(f"{k} " + " ".join(repr(float(x)) for x in vals) + "\n")


def read_poses(path) -> dict:
    path = Path(path)
    out = {}
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"{path}: cannot read pose file ({exc.strerror})") from exc
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 13:
            raise DataError(f"{path}:{n}: expected 13 fields, got {len(parts)}")
        try:
            k = int(parts[0])
            vals = [float(x) for x in parts[1:]]
        except ValueError as exc:
            raise DataError(f"{path}:{n}: {exc}") from exc
        out[k] = _pose_from_row(vals, f"{path}:{n}")
    return out


@dataclass
class GroundTruth:
    """Camera-to-world poses, object-to-world poses and instance identities."""

    camera_poses: dict
    object_poses: dict = field(default_factory=dict)
    instances: dict = field(default_factory=dict)

    def camera_motion(self, k: int) -> SE3Pose:
        return self.camera_poses[k - 1].inverse() @ self.camera_poses[k]

    def object_motion(self, obj: int, k: int) -> SE3Pose:
        """Object motion between k-1 and k expressed in camera k-1 coordinates."""
        L = self.object_poses[obj]
        W = self.camera_poses[k - 1]
        return W.inverse() @ L[k] @ L[k - 1].inverse() @ W

    def object_global_motion(self, obj: int, k: int) -> SE3Pose:
        L = self.object_poses[obj]
        return L[k] @ L[k - 1].inverse()

    def object_of(self, k: int, instance_id: int) -> int | None:
        return self.instances.get(k, {}).get(instance_id)

    def is_dynamic(self, obj: int, k: int, tol: float = 1e-9) -> bool:
        H = self.object_global_motion(obj, k)
        return bool(np.linalg.norm(H.translation) > tol or H.rotation_angle() > tol)


@dataclass
class Manifest:
    path: Path
    intrinsics: Intrinsics
    frame_period: float
    entries: list
    gt_camera: Path | None = None
    gt_objects: dict = field(default_factory=dict)
    gt_instances: Path | None = None

    @property
    def root(self) -> Path:
        return self.path.parent

    @property
    def has_ground_truth(self) -> bool:
        return self.gt_camera is not None


def read_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ManifestError(f"{path}: cannot read manifest ({exc.strerror or exc})") from exc
    lines = [(n, l.split("#", 1)[0].strip()) for n, l in enumerate(text.splitlines(), 1)]
    lines = [(n, l) for n, l in lines if l]
    if not lines or lines[0][1].split()[:1] != [MANIFEST_MAGIC]:
        raise ManifestError(f"{path}: missing '{MANIFEST_MAGIC}' header")
    head = lines[0][1].split()
    if len(head) != 2 or head[1] != str(MANIFEST_VERSION):
        raise ManifestError(f"{path}: unsupported manifest version {' '.join(head[1:])!r}")
    keys, objects, rows = {}, {}, []
    in_frames = False
    root = path.parent
    for n, line in lines[1:]:
        parts = line.split()
        if in_frames:
            if len(parts) not in (4, 5):
                raise ManifestError(f"{path}:{n}: frame row needs 4 or 5 fields")
            try:
                idx = int(parts[0])
            except ValueError:
                raise ManifestError(f"{path}:{n}: bad frame index {parts[0]!r}") from None
            cols = [None if p == "-" else root / p for p in parts[1:]] + [None] * (5 - len(parts))
            rows.append((n, idx, *cols))
        elif parts[0] == "frames":
            in_frames = True
        elif parts[0] == "gt_object":
            if len(parts) != 3:
                raise ManifestError(f"{path}:{n}: gt_object needs an id and a path")
            objects[int(parts[1])] = root / parts[2]
        elif len(parts) == 2:
            keys[parts[0]] = parts[1]
        else:
            raise ManifestError(f"{path}:{n}: cannot parse {line!r}")
    try:
        if "f" in keys:
            K = Intrinsics(float(keys["f"]), float(keys["cu"]), float(keys["cv"]),
                           int(keys["width"]), int(keys["height"]))
        else:
            K = Intrinsics.from_fx_fy(float(keys["fx"]), float(keys["fy"]), float(keys["cu"]),
                                      float(keys["cv"]), int(keys["width"]), int(keys["height"]))
        period = float(keys.get("frame_period", 0.1))
    except KeyError as exc:
        raise ManifestError(f"{path}: missing key {exc.args[0]!r}") from None
    except (ValueError, GeometryError) as exc:
        raise ManifestError(f"{path}: {exc}") from None
    if not period > 0:
        raise ManifestError(f"{path}: frame_period must be positive")
    entries = []
    for i, (n, idx, depth, flow, mask, flow_gt) in enumerate(rows):
        if depth is None or mask is None:
            raise ManifestError(f"{path}:{n}: depth and mask are required")
        if i == 0 and (flow is not None or flow_gt is not None):
            raise ManifestError(f"{path}:{n}: the first frame cannot carry flow (flow maps k-1 to k)")
        if i > 0 and idx != entries[-1]["index"] + 1:
            raise ManifestError(f"{path}:{n}: frame {idx} does not follow {entries[-1]['index']}")
        entries.append({"index": idx, "depth": depth, "flow": flow, "mask": mask, "flow_gt": flow_gt})
    gt_cam = root / keys["gt_camera"] if "gt_camera" in keys else None
    gt_inst = root / keys["gt_instances"] if "gt_instances" in keys else None
    return Manifest(path, K, period, entries, gt_cam, objects, gt_inst)


def validate_manifest(man: Manifest) -> None:
    """Check that every referenced file exists and every raster header matches."""
    shape = (man.intrinsics.height, man.intrinsics.width)
    for e in man.entries:
        for kind in ("depth", "flow", "mask", "flow_gt"):
            p = e[kind]
            if p is None:
                continue
            if not p.is_file():
                raise ManifestError(f"{p}: missing file referenced by {man.path}")
            with open(p, "rb") as fh:
                head = fh.read(_HEADER.size)
            if len(head) < _HEADER.size:
                raise RasterError(f"{p}: truncated header")
            magic, w, h, _ = _HEADER.unpack(head)
            if magic != MAGIC:
                raise RasterError(f"{p}: bad magic {magic!r}")
            if (h, w) != shape:
                raise RasterError(f"{p}: raster is {w}x{h}, manifest says {shape[1]}x{shape[0]}")
    for p in [man.gt_camera, man.gt_instances, *man.gt_objects.values()]:
        if p is not None and not p.is_file():
            raise ManifestError(f"{p}: missing file referenced by {man.path}")


def load_sequence(path) -> Iterator[Frame]:
    """Validate a manifest and yield its frames in index order."""
    man = path if isinstance(path, Manifest) else read_manifest(path)
    validate_manifest(man)
    return _frames(man)


def _frames(man: Manifest):
    K = man.intrinsics
    shape = (K.height, K.width)
    for e in man.entries:
        flow = read_raster(e["flow"], "flow", shape).astype(float) if e["flow"] else None
        flow_gt = read_raster(e["flow_gt"], "flow_gt", shape).astype(float) if e["flow_gt"] else None
        yield Frame(e["index"], read_raster(e["depth"], "depth", shape).astype(float),
                    read_raster(e["mask"], "mask", shape), K, flow, man.frame_period, flow_gt)


def load_ground_truth(man: Manifest) -> GroundTruth | None:
    if man.gt_camera is None:
        return None
    cams = read_poses(man.gt_camera)
    objs = {oid: read_poses(p) for oid, p in man.gt_objects.items()}
    inst = {}
    if man.gt_instances is not None:
        for n, line in enumerate(man.gt_instances.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                k, iid, oid = (int(x) for x in line.split())
            except ValueError:
                raise DataError(f"{man.gt_instances}:{n}: expected 'frame instance object'") from None
            inst.setdefault(k, {})[iid] = oid
    return GroundTruth(cams, objs, inst)


def write_sequence(out_dir, frames, gt: GroundTruth | None = None, name="manifest.txt") -> Path:
    """Write frames (and optional ground truth) as rasters plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames = list(frames)
    if not frames:
        raise DataError("no frames to write")
    K = frames[0].intrinsics
    lines = [f"{MANIFEST_MAGIC} {MANIFEST_VERSION}",
             f"f {K.f!r}", f"cu {K.cu!r}", f"cv {K.cv!r}",
             f"width {K.width}", f"height {K.height}",
             f"frame_period {frames[0].frame_period!r}"]
    if gt is not None:
        write_poses(out / "gt" / "camera.txt", gt.camera_poses)
        lines.append("gt_camera gt/camera.txt")
        for oid in sorted(gt.object_poses):
            rel = f"gt/object_{oid}.txt"
            write_poses(out / rel, gt.object_poses[oid])
            lines.append(f"gt_object {oid} {rel}")
        with open(out / "gt" / "instances.txt", "w") as fh:
            for k in sorted(gt.instances):
                for iid in sorted(gt.instances[k]):
                    fh.write(f"{k} {iid} {gt.instances[k][iid]}\n")
        lines.append("gt_instances gt/instances.txt")
    lines.append("frames")
    for fr in frames:
        stem = f"{fr.index:06d}.bin"
        cols = []
        for kind, data in (("depth", fr.depth), ("flow", fr.flow), ("mask", fr.mask), ("flow_gt", fr.flow_gt)):
            if data is None:
                cols.append("-")
                continue
            write_raster(out / kind / stem, data, kind)
            cols.append(f"{kind}/{stem}")
        if cols[-1] == "-":
            cols.pop()
        lines.append(f"{fr.index} " + " ".join(cols))
    path = out / name
    path.write_text("\n".join(lines) + "\n")
    return path


@dataclass(frozen=True)
class NoiseSpec:
    """Stereo-style depth noise and per-axis Gaussian flow noise.

    ``flow_sigma`` applies to background pixels and ``object_flow_sigma`` to
    pixels inside instance masks (defaults to ``flow_sigma``).
    """

    disparity_accuracy: float = 0.0
    baseline: float = 0.5
    flow_sigma: tuple = (0.0, 0.0)
    object_flow_sigma: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "flow_sigma", _pair(self.flow_sigma))
        if self.object_flow_sigma is not None:
            object.__setattr__(self, "object_flow_sigma", _pair(self.object_flow_sigma))
        if self.disparity_accuracy < 0 or not self.baseline > 0:
            raise ValueError("need disparity_accuracy >= 0 and baseline > 0")
        if min(self.flow_sigma) < 0 or (self.object_flow_sigma and min(self.object_flow_sigma) < 0):
            raise ValueError("flow sigma must be non-negative")


def _pair(s):
    if np.ndim(s) == 0:
        return (float(s), float(s))
    a, b = s
    return (float(a), float(b))


def sigma_for_epe(target_epe: float) -> float:
    """Per-axis sigma whose isotropic Gaussian flow noise has mean EPE ``target_epe``."""
    return target_epe / math.sqrt(math.pi / 2)


def depth_sigma(z, f: float, baseline: float, disparity_accuracy: float):
    return np.asarray(z, dtype=float) ** 2 / (f * baseline) * disparity_accuracy


def apply_depth_noise(frame: Frame, noise: NoiseSpec, seed) -> Frame:
    """Perturb every valid depth with N(0, (z^2 / (f b) * dd)^2); non-positive results become invalid."""
    if noise.disparity_accuracy == 0:
        return frame
    rng = np.random.default_rng(seed)
    z = frame.depth
    valid = z > 0
    sigma = depth_sigma(z[valid], frame.intrinsics.f, noise.baseline, noise.disparity_accuracy)
    out = z.copy()
    noisy = z[valid] + rng.standard_normal(sigma.shape) * sigma
    out[valid] = np.where(noisy > 0, noisy, 0.0)
    return replace(frame, depth=out)


def apply_flow_noise(frame: Frame, noise: NoiseSpec, seed, region_mask=None) -> Frame:
    """Add per-axis Gaussian noise to the flow of ``frame``.

    ``region_mask`` is the instance mask of the frame the flow starts from
    (frame k-1); it selects ``object_flow_sigma`` for object pixels. The
    clean flow is kept as ``flow_gt`` when none is present.
    """
    if frame.flow is None:
        return frame
    sig_bg = np.asarray(noise.flow_sigma)
    sig_obj = np.asarray(noise.object_flow_sigma if noise.object_flow_sigma is not None else noise.flow_sigma)
    if not sig_bg.any() and not sig_obj.any():
        return frame
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(frame.flow.shape)
    if region_mask is None:
        sigma = np.broadcast_to(sig_bg, frame.flow.shape)
    else:
        obj = (np.asarray(region_mask) > 0)[..., None]
        sigma = np.where(obj, sig_obj, sig_bg)
    flow = frame.flow + eps * sigma
    gt = frame.flow_gt if frame.flow_gt is not None else frame.flow
    return replace(frame, flow=flow, flow_gt=gt)


def apply_noise(frames, noise: NoiseSpec, seed: int) -> list[Frame]:
    """Noise a whole sequence; streams are derived from ``(seed, frame, channel)``."""
    frames = list(frames)
    out = []
    for i, fr in enumerate(frames):
        noisy = apply_depth_noise(fr, noise, [seed, fr.index, 0])
        prev_mask = frames[i - 1].mask if i > 0 else None
        noisy = apply_flow_noise(noisy, noise, [seed, fr.index, 1], prev_mask)
        out.append(noisy)
    return out
