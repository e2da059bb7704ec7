import numpy as np
import pytest

from conftest import random_pose, rendered
from mbvo.dataio import (
    DataError,
    ManifestError,
    NoiseSpec,
    RasterError,
    apply_depth_noise,
    apply_flow_noise,
    apply_noise,
    depth_sigma,
    load_ground_truth,
    load_sequence,
    read_manifest,
    read_poses,
    read_raster,
    sigma_for_epe,
    write_poses,
    write_raster,
    write_sequence,
)
from mbvo.geometry import Intrinsics
from mbvo.pipeline import Frame

K = Intrinsics(721.5, 319.5, 239.5, 640, 480)
TINY = Intrinsics(10.0, 2.0, 1.5, 4, 3)


def test_raster_roundtrip(tmp_path, rng):
    d = rng.uniform(1, 50, (3, 4)).astype(np.float32)
    f = rng.normal(size=(3, 4, 2)).astype(np.float32)
    f[0, 0] = np.nan
    m = rng.integers(0, 5, (3, 4)).astype(np.uint16)
    for name, arr, kind in (("d", d, "depth"), ("f", f, "flow"), ("m", m, "mask")):
        write_raster(tmp_path / name, arr, kind)
        back = read_raster(tmp_path / name, kind, (3, 4))
        assert np.array_equal(back, arr, equal_nan=True)


def test_raster_errors(tmp_path):
    write_raster(tmp_path / "d", np.ones((3, 4)), "depth")
    with pytest.raises(RasterError, match="manifest says"):
        read_raster(tmp_path / "d", "depth", (4, 4))
    with pytest.raises(RasterError):
        read_raster(tmp_path / "d", "flow")
    (tmp_path / "junk").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(RasterError, match="magic"):
        read_raster(tmp_path / "junk", "depth")
    with pytest.raises(RasterError):
        write_raster(tmp_path / "x", np.ones((3, 4, 3)), "flow")


def test_pose_roundtrip(tmp_path, rng):
    poses = {k: random_pose(rng) for k in range(5)}
    write_poses(tmp_path / "p.txt", poses)
    back = read_poses(tmp_path / "p.txt")
    assert all(back[k].allclose(poses[k], atol=1e-15) for k in poses)


def test_bad_pose_line(tmp_path):
    (tmp_path / "p.txt").write_text("0 1 0 0\n")
    with pytest.raises(DataError, match="13 fields"):
        read_poses(tmp_path / "p.txt")


def _manifest(tmp_path, rows):
    text = "MBVO-MANIFEST 1\nf 10\ncu 2\ncv 1.5\nwidth 4\nheight 3\nframes\n" + "".join(r + "\n" for r in rows)
    p = tmp_path / "manifest.txt"
    p.write_text(text)
    return p


def test_empty_manifest(tmp_path):
    assert list(load_sequence(_manifest(tmp_path, []))) == []


def test_flow_on_first_frame_rejected(tmp_path):
    with pytest.raises(ManifestError, match="first frame"):
        read_manifest(_manifest(tmp_path, ["0 d.bin f.bin m.bin"]))


def test_missing_file_named(tmp_path):
    p = _manifest(tmp_path, ["0 d.bin - m.bin"])
    with pytest.raises(ManifestError, match="d.bin"):
        list(load_sequence(p))


def test_missing_manifest(tmp_path):
    with pytest.raises(ManifestError, match="nope.txt"):
        read_manifest(tmp_path / "nope.txt")


def test_manifest_header_and_gaps(tmp_path):
    (tmp_path / "m.txt").write_text("hello\n")
    with pytest.raises(ManifestError):
        read_manifest(tmp_path / "m.txt")
    with pytest.raises(ManifestError, match="does not follow"):
        read_manifest(_manifest(tmp_path, ["0 d - m", "2 d f m"]))


def test_dimension_mismatch(tmp_path):
    write_raster(tmp_path / "d.bin", np.ones((3, 5)), "depth")
    write_raster(tmp_path / "m.bin", np.zeros((3, 4)), "mask")
    with pytest.raises(RasterError):
        list(load_sequence(_manifest(tmp_path, ["0 d.bin - m.bin"])))


def test_sequence_roundtrip(tmp_path):
    frames, gt = rendered("traffic")
    path = write_sequence(tmp_path, frames[:3], gt)
    back = list(load_sequence(path))
    assert len(back) == 3 and back[0].flow is None
    for a, b in zip(frames, back):
        assert np.allclose(a.depth, b.depth, rtol=1e-7)
        assert np.array_equal(a.mask, b.mask)
        if a.flow is not None:
            assert np.allclose(a.flow, b.flow, rtol=1e-6, atol=1e-4, equal_nan=True)
    gt2 = load_ground_truth(read_manifest(path))
    assert gt2.camera_motion(2).allclose(gt.camera_motion(2), atol=1e-12)
    assert gt2.instances == {k: v for k, v in gt.instances.items()}
    assert gt2.object_motion(1, 2).allclose(gt.object_motion(1, 2), atol=1e-12)


class TestNoise:
    def _plane(self, z):
        return Frame(1, np.full((480, 640), z), np.zeros((480, 640)), K, flow=np.zeros((480, 640, 2)))

    def test_depth_sigma_oracle(self):
        assert depth_sigma(10.0, 721.5, 0.5, 0.2) == pytest.approx(0.05544005544005544, rel=1e-12)

    def test_depth_noise_statistics(self):
        fr = self._plane(10.0)
        noisy = apply_depth_noise(fr, NoiseSpec(disparity_accuracy=0.2), 1)
        assert np.std(noisy.depth - 10.0) == pytest.approx(0.05544005544005544, rel=0.02)
        # quadratic growth with depth
        s20 = np.std(apply_depth_noise(self._plane(20.0), NoiseSpec(disparity_accuracy=0.2), 2).depth - 20)
        assert s20 / np.std(noisy.depth - 10.0) == pytest.approx(4.0, rel=0.03)

    def test_zero_noise_is_identity(self):
        fr = self._plane(10.0)
        assert apply_depth_noise(fr, NoiseSpec(), 0) is fr
        assert apply_flow_noise(fr, NoiseSpec(), 0) is fr

    def test_flow_noise_epe(self):
        fr = self._plane(10.0)
        noisy = apply_flow_noise(fr, NoiseSpec(flow_sigma=0.09), 3)
        e = np.hypot(noisy.flow[..., 0], noisy.flow[..., 1]).mean()
        assert e == pytest.approx(0.11279827235839501, rel=0.02)
        assert sigma_for_epe(0.11279827235839501) == pytest.approx(0.09)
        assert np.array_equal(noisy.flow_gt, fr.flow)

    def test_seeded(self):
        frames, _ = rendered("traffic")
        spec = NoiseSpec(disparity_accuracy=0.2, flow_sigma=0.3)
        a = apply_noise(frames[:3], spec, 5)
        b = apply_noise(frames[:3], spec, 5)
        c = apply_noise(frames[:3], spec, 6)
        assert all(np.array_equal(x.depth, y.depth) for x, y in zip(a, b))
        assert not np.array_equal(a[1].depth, c[1].depth)
        assert np.array_equal(a[2].flow_gt, frames[2].flow, equal_nan=True)

    def test_object_scoped_flow_noise(self):
        fr = self._plane(10.0)
        mask = np.zeros((480, 640), np.uint16)
        mask[100:200, 100:200] = 1
        noisy = apply_flow_noise(fr, NoiseSpec(flow_sigma=0.0, object_flow_sigma=0.5), 4, mask)
        assert np.all(noisy.flow[mask == 0] == 0)
        assert np.std(noisy.flow[mask == 1]) == pytest.approx(0.5, rel=0.05)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            NoiseSpec(disparity_accuracy=-0.1)
        with pytest.raises(ValueError):
            NoiseSpec(flow_sigma=-1)
