import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pose, rendered
from mbvo.dynamics import (
    ObjectTrack,
    Status,
    TrackLabelSet,
    classify_object,
    compute_scene_flow,
    dynamic_fraction,
    label_votes,
    propagate_labels,
    update_track,
)
from mbvo.geometry import SE3Pose, so3_exp
from mbvo.pipeline import object_scene_flow, sample_depth, sample_object_points


class TestSceneFlow:
    def test_static_point(self, rng):
        T = random_pose(rng)
        m_prev = rng.normal(size=(10, 3)) + [0, 0, 10]
        m_curr = T.inverse().apply(m_prev)
        assert np.abs(compute_scene_flow(m_prev, m_curr, T)).max() < 1e-12

    def test_translating_object(self):
        f = compute_scene_flow((1, 0, 10), (1, 0, 9), SE3Pose.identity())
        assert np.linalg.norm(f) == pytest.approx(1.0)

    def test_matches_scripted_displacement(self):
        frames, gt = rendered("traffic")
        k = 2
        prev, curr = frames[k - 1], frames[k]
        T = gt.camera_motion(k)
        for iid in prev.instance_ids():
            H = gt.object_motion(gt.object_of(k - 1, iid), k)
            corrs, _ = sample_object_points(prev, curr, iid)
            m = corrs.m_prev
            disp = np.linalg.norm(H.apply(m) - m, axis=1)
            # exact frame-k coordinates of the same surface points
            m_curr = T.inverse().apply(H.apply(m))
            flows = compute_scene_flow(m, m_curr, T)
            assert np.abs(np.linalg.norm(flows, axis=1) - disp).max() < 1e-9

    def test_measured_depth_scene_flow(self):
        frames, gt = rendered("traffic")
        k = 2
        prev, curr = frames[k - 1], frames[k]
        T = gt.camera_motion(k)
        good = total = 0
        for iid in prev.instance_ids():
            H = gt.object_motion(gt.object_of(k - 1, iid), k)
            corrs, _ = sample_object_points(prev, curr, iid)
            flows = object_scene_flow(corrs, curr, T)
            _, ok = sample_depth(curr, corrs.observed)
            m = corrs.m_prev[ok]
            d = np.abs(np.linalg.norm(flows, axis=1) - np.linalg.norm(H.apply(m) - m, axis=1))
            # interpolation straddling two faces of a box is not exact
            good += int((d < 1e-9).sum())
            total += len(d)
        assert total > 500 and good >= 0.97 * total


class TestClassify:
    def test_examples(self):
        assert classify_object(np.zeros((50, 3))) is Status.STATIC
        assert classify_object(np.tile([1.0, 0, 0], (50, 1)), 0.1) is Status.DYNAMIC

    def test_proportion_is_strict(self):
        flows = np.zeros((10, 3))
        flows[:3, 0] = 1.0
        assert dynamic_fraction(flows) == pytest.approx(0.3)
        assert classify_object(flows, 0.12, 0.3) is Status.STATIC
        flows[3, 0] = 1.0
        assert classify_object(flows, 0.12, 0.3) is Status.DYNAMIC

    def test_empty(self):
        with pytest.raises(ValueError):
            classify_object(np.zeros((0, 3)))

    @settings(max_examples=50)
    @given(seed=st.integers(0, 2**32 - 1), scale=st.floats(1.0, 10.0))
    def test_monotone_in_magnitude(self, seed, scale):
        flows = np.random.default_rng(seed).normal(0, 0.1, (40, 3))
        if classify_object(flows) is Status.DYNAMIC:
            assert classify_object(flows * scale) is Status.DYNAMIC


def block_mask(shape, boxes):
    m = np.zeros(shape, np.uint16)
    for iid, (v0, v1, u0, u1) in boxes.items():
        m[v0:v1, u0:u1] = iid
    return m


class TestLabels:
    shape = (40, 60)

    def test_preserved_under_identity(self):
        mask = block_mask(self.shape, {1: (5, 15, 5, 20)})
        first = propagate_labels(None, None, mask, None)
        assert first.active == {1: 1} and first.next_label == 2
        second = propagate_labels(mask, first, mask, np.zeros(self.shape + (2,)))
        assert second.active == {1: 1} and second.next_label == 2

    def test_new_object_at_boundary(self):
        prev = block_mask(self.shape, {1: (5, 15, 5, 20)})
        labels = propagate_labels(None, None, prev, None)
        curr = block_mask(self.shape, {1: (5, 15, 5, 20), 2: (10, 20, 50, 60)})
        out = propagate_labels(prev, labels, curr, np.zeros(self.shape + (2,)))
        assert out.active == {1: 1, 2: 2}
        # only background pixels land on the newcomer
        assert label_votes(prev, labels, curr, np.zeros(self.shape + (2,)))[2] == {0: 100}

    def test_static_instance_keeps_zero(self):
        mask = block_mask(self.shape, {1: (5, 15, 5, 20), 2: (20, 30, 30, 40)})
        out = propagate_labels(None, None, mask, None, dynamic={1: True, 2: False})
        assert out.active == {1: 1, 2: 0}

    def test_follows_flow(self):
        prev = block_mask(self.shape, {1: (5, 15, 5, 15)})
        labels = propagate_labels(None, None, prev, None)
        curr = block_mask(self.shape, {4: (5, 15, 25, 35)})
        flow = np.zeros(self.shape + (2,))
        flow[..., 0] = 20
        assert propagate_labels(prev, labels, curr, flow).active == {4: 1}
        # without the flow the moved object looks new
        assert propagate_labels(prev, labels, curr, np.zeros_like(flow)).active == {4: 2}

    def test_out_of_image_casts_no_vote(self):
        prev = block_mask(self.shape, {1: (5, 15, 50, 60)})
        labels = propagate_labels(None, None, prev, None)
        flow = np.zeros(self.shape + (2,))
        flow[..., 0] = 100
        votes = label_votes(prev, labels, prev, flow)
        assert votes == {1: {}}

    def test_collision_goes_to_majority(self):
        prev = block_mask(self.shape, {1: (5, 25, 5, 25)})
        labels = propagate_labels(None, None, prev, None)
        # the object splits into a large and a small part
        curr = block_mask(self.shape, {1: (5, 10, 5, 25), 2: (10, 25, 5, 25)})
        out = propagate_labels(prev, labels, curr, np.zeros(self.shape + (2,)))
        assert out.active == {1: 2, 2: 1}
        assert len(set(out.active.values())) == 2

    def test_labels_never_reissued(self):
        labels = TrackLabelSet()
        seen = set()
        mask = block_mask(self.shape, {1: (0, 5, 0, 5)})
        empty = np.zeros(self.shape, np.uint16)
        for _ in range(5):
            labels = propagate_labels(empty, labels, mask, np.zeros(self.shape + (2,)))
            assert labels.active[1] not in seen
            seen.add(labels.active[1])

    @settings(max_examples=30, deadline=None)
    @given(perm=st.permutations([1, 2, 3]))
    def test_instance_id_permutation(self, perm):
        boxes = {1: (2, 12, 2, 12), 2: (2, 12, 20, 30), 3: (20, 30, 2, 30)}
        prev = block_mask(self.shape, boxes)
        labels = propagate_labels(None, None, prev, None)
        flow = np.zeros(self.shape + (2,))
        flow[..., 1] = 3
        base = propagate_labels(prev, labels, prev, flow)
        lut = np.array([0] + list(perm), np.uint16)
        out = propagate_labels(prev, labels, lut[prev], flow)
        assert {perm[i - 1]: lab for i, lab in base.active.items()} == out.active


class TestTrack:
    def test_first_and_identity(self):
        t = update_track(ObjectTrack(3), SE3Pose.identity(), (0, 0, 10), 0.05, frame=1)
        assert len(t) == 1 and t.velocities == [0.0] and t.status is Status.STATIC

    def test_constant_velocity(self):
        H = SE3Pose(so3_exp([0, 0.02, 0]), np.array([0.1, 0.0, 0.8]))
        c = np.array([-2.0, 0.7, 12.0])
        t = ObjectTrack(1)
        for k in range(1, 20):
            t = update_track(t, H, c, 0.04, frame=k)
            c = H.apply(c)
        v = np.array(t.velocities)
        assert np.ptp(v) < 1e-9 and t.status is Status.DYNAMIC

    def test_rejects_bad_input(self):
        t = update_track(ObjectTrack(1), SE3Pose.identity(), (0, 0, 5), 0.1, frame=2)
        with pytest.raises(ValueError):
            update_track(t, SE3Pose.identity(), (0, 0, 5), 0.1, frame=2)
        with pytest.raises(ValueError):
            update_track(t, SE3Pose.identity(), (0, 0, -5), 0.1, frame=3)
