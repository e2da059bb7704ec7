import numpy as np
import pytest

from conftest import rendered
from mbvo import scenes
from mbvo.geometry import backproject, project
from mbvo.synthetic import SceneError, SyntheticSceneSpec, generate_synthetic


def test_static_scene_has_zero_flow():
    frames, _ = rendered("static")
    for a, b in zip(frames, frames[1:]):
        assert np.array_equal(a.depth, b.depth)
        valid = np.isfinite(b.flow).all(axis=2)
        # sky pixels carry no depth and therefore no flow
        assert np.array_equal(valid, a.depth > 0)
        assert np.abs(b.flow[valid]).max() < 1e-9


def test_pure_translation_parallax():
    spec = SyntheticSceneSpec(scenes.VGA, 2, np.array([0.1, 0.0, 0.6, 0.0, 0.0, 0.0]),
                              static_boxes=scenes.street())
    (f0, f1), gt = generate_synthetic(spec)
    T = gt.camera_motion(1)
    vv, uu = np.nonzero(f0.depth > 0)
    p = np.column_stack([uu, vv]).astype(float)
    m = backproject(p, f0.depth[vv, uu], scenes.VGA)
    q = T.inverse().apply(m)
    front = q[:, 2] > 1e-3
    expected = project(q[front], scenes.VGA) - p[front]
    assert np.abs(f1.flow[vv, uu][front] - expected).max() < 1e-6


def test_object_points_follow_script():
    frames, gt = rendered("turning")
    k = 3
    prev, curr = frames[k - 1], frames[k]
    W = gt.camera_poses
    for iid, obj in gt.instances[k - 1].items():
        vv, uu = np.nonzero(prev.mask == iid)
        p = np.column_stack([uu, vv]).astype(float)
        m_world = W[k - 1].apply(backproject(p, prev.depth[vv, uu], scenes.VGA))
        # body coordinates are fixed: L_k^-1 m_k == L_{k-1}^-1 m_{k-1}
        H = gt.object_global_motion(obj, k)
        m_next = H.apply(m_world)
        L = gt.object_poses[obj]
        assert np.abs(L[k].inverse().apply(m_next) - L[k - 1].inverse().apply(m_world)).max() < 1e-9
        pred = project(W[k].inverse().apply(m_next), scenes.VGA) - p
        assert np.abs(curr.flow[vv, uu] - pred).max() < 1e-6


def test_masks_and_instances_agree():
    frames, gt = rendered("traffic")
    for fr in frames:
        assert set(fr.instance_ids()) == set(gt.instances[fr.index])


def test_spec_json_roundtrip(tmp_path):
    spec = scenes.PRESETS["tracking"]()
    spec.save(tmp_path / "s.json")
    back = SyntheticSceneSpec.load(tmp_path / "s.json")
    assert back.to_dict() == spec.to_dict()


def test_bad_motion_script():
    spec = SyntheticSceneSpec(scenes.VGA, 4, np.zeros((2, 6)))
    with pytest.raises(SceneError):
        generate_synthetic(spec)


def test_occlusion_gap():
    frames, gt = rendered("tracking")
    hidden = [k for k in gt.instances if 2 not in gt.instances[k].values()]
    assert hidden == [4, 5]
