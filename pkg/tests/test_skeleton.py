import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvkc.geometry import Camera, EulerPose, euler_to_rotation, project_points
from mvkc.skeleton import (
    DenseKeypoints,
    EmptyBatchError,
    Keypoint2D,
    PruneConfig,
    SchemaError,
    densify,
    densify_template,
    has_required,
    make_pairs,
    prune,
)


def brute_force_prune(dense, depths, cfg):
    """All-pairs occlusion test, one point at a time."""
    keep = []
    for i in range(len(dense)):
        if not dense.visible[i]:
            continue
        occluded = False
        for j in range(len(dense)):
            if j == i or not dense.visible[j]:
                continue
            dx = dense.xy[i, 0] - dense.xy[j, 0]
            dy = dense.xy[i, 1] - dense.xy[j, 1]
            if dx * dx + dy * dy <= cfg.occlusion_radius ** 2 and depths[j] < depths[i] - cfg.depth_margin:
                occluded = True
                break
        if not occluded:
            keep.append(int(dense.ids[i]))
    return keep


class TestDensify:
    def test_single_edge(self):
        sparse = [Keypoint2D("a", 0, 0), Keypoint2D("b", 10, 0)]
        d = densify(sparse, [("a", "b")], 4)
        np.testing.assert_allclose(d.xy[2:], [[2, 0], [4, 0], [6, 0], [8, 0]])
        assert list(d.ids) == list(range(6))

    def test_zero_samples_is_identity(self):
        sparse = [Keypoint2D("a", 1, 2), Keypoint2D("b", 3, 4, False)]
        d = densify(sparse, [("a", "b")], 0)
        np.testing.assert_array_equal(d.xy, [[1, 2], [3, 4]])
        assert list(d.visible) == [True, False]

    def test_chair_count(self, chair):
        sparse = [Keypoint2D(k.name, *k.position[:2]) for k in chair.keypoints]
        assert len(densify(sparse, chair.skeleton, 3)) == 10 + 39 == 49
        assert chair.dense_size(3) == 49

    def test_visibility_needs_both_ends(self):
        sparse = [Keypoint2D("a", 0, 0), Keypoint2D("b", 4, 0, False), Keypoint2D("c", 0, 4)]
        d = densify(sparse, [("a", "b"), ("a", "c")], 1)
        assert list(d.visible) == [True, False, True, False, True]

    def test_unknown_endpoint(self):
        with pytest.raises(SchemaError):
            densify([Keypoint2D("a", 0, 0)], [("a", "zz")], 2)

    def test_self_loop(self):
        with pytest.raises(SchemaError):
            densify([Keypoint2D("a", 0, 0)], [("a", "a")], 2)

    @settings(max_examples=50, deadline=None)
    @given(st.permutations(range(10)), st.integers(0, 4))
    def test_order_stable(self, perm, s):
        from mvkc.synth import CHAIR
        sparse = [Keypoint2D(k.name, k.position[0] * 10, k.position[1] * 7) for k in CHAIR.keypoints]
        shuffled = [sparse[i] for i in perm]
        a = densify(sparse, CHAIR.skeleton, s, order=CHAIR.names)
        b = densify(shuffled, CHAIR.skeleton, s, order=CHAIR.names)
        np.testing.assert_array_equal(a.xy, b.xy)
        np.testing.assert_array_equal(a.ids, b.ids)

    def test_template_matches_2d_scheme(self, chair):
        pts = densify_template(chair, 2)
        sparse = [Keypoint2D(k.name, k.position[0], k.position[1]) for k in chair.keypoints]
        np.testing.assert_allclose(densify(sparse, chair.skeleton, 2).xy, pts[:, :2])


class TestPrune:
    def test_same_pixel_keeps_nearer(self):
        d = DenseKeypoints([0, 1], [[5, 5], [5, 5]], [True, True])
        out = prune(d, [5.0, 9.0], PruneConfig(depth_margin=0.1))
        assert list(out.ids) == [0]

    def test_far_apart_unchanged(self):
        d = DenseKeypoints([0, 1, 2], [[0, 0], [10, 0], [0, 10]], [True] * 3)
        out = prune(d, [1.0, 2.0, 3.0])
        np.testing.assert_array_equal(out.xy, d.xy)

    def test_drops_invisible(self):
        d = DenseKeypoints([0, 1], [[0, 0], [50, 50]], [True, False])
        assert list(prune(d, [1.0, 1.0]).ids) == [0]

    def test_length_mismatch(self):
        d = DenseKeypoints([0, 1], [[0, 0], [1, 1]], [True, True])
        with pytest.raises(ValueError):
            prune(d, [1.0])

    def test_chair_side_view_matches_brute_force(self, chair):
        # distant long-focal camera: near-orthographic side view
        cam = Camera(focal=700.0, cx=63.5, cy=63.5, distance=20.0, height=128, width=128)
        pts = densify_template(chair, 3)
        xy, depth, vis = project_points(pts, euler_to_rotation(EulerPose(90, 0, 0)), cam)
        dense = DenseKeypoints(np.arange(len(pts)), xy, vis)
        cfg = PruneConfig()
        out = prune(dense, depth, cfg)
        kept = out.ids.tolist()
        assert kept == brute_force_prune(dense, depth, cfg)

        def leg_ids(side):
            ids = set()
            for corner in ("back", "front"):
                top, foot = f"seat_{corner}_{side}", f"leg_{corner}_{side}"
                ids.add(chair.names.index(foot))
                e = chair.skeleton.index((top, foot))
                ids.update(10 + 3 * e + j for j in range(3))
            return ids

        # the model's left side is the far side at azimuth 90
        assert leg_ids("left").isdisjoint(kept)
        assert leg_ids("right") <= set(kept)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_random_matches_brute_force_and_keeps_nearest(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(2, 40))
        dense = DenseKeypoints(np.arange(n), rng.uniform(0, 20, (n, 2)), rng.random(n) < 0.9)
        depth = rng.uniform(1, 5, n)
        cfg = PruneConfig(occlusion_radius=3.0)
        out = prune(dense, depth, cfg)
        assert list(out.ids) == brute_force_prune(dense, depth, cfg)
        vis = np.flatnonzero(dense.visible)
        if len(vis):
            assert vis[np.argmin(depth[vis])] in out.ids


def _grid_points(n, offset=0.0):
    ids = np.arange(n)
    xy = np.stack([10 + 7 * (ids % 5), 10 + 7 * (ids // 5)], axis=1) + offset
    return DenseKeypoints(ids, xy, np.ones(n, bool))


class TestPairs:
    def test_positives_only(self):
        d = _grid_points(6)
        b = make_pairs(d, d, 0, 0, (64, 64))
        assert len(b) == 6 and b.labels.sum() == 6

    def test_counting(self):
        d1 = _grid_points(8)
        d2 = _grid_points(8, 1.5)
        d2.visible[[1, 3, 5]] = False
        b = make_pairs(d1, d2, 3, 0, (64, 64))
        assert len(b) == 20 and b.labels.sum() == 5

    def test_properties(self):
        d1, d2 = _grid_points(10), _grid_points(10, 2.0)
        b = make_pairs(d1, d2, 4, 7, (64, 64), negative_radius=8.0)
        truth = {int(i): p for i, p in zip(d2.ids, d2.xy)}
        for x2, s, i in zip(b.xy2, b.labels, b.ids):
            dist = np.hypot(*(x2 - truth[int(i)]))
            if s == 1:
                assert dist == 0
            else:
                assert dist >= 8.0
                assert 0 <= x2[0] <= 63 and 0 <= x2[1] <= 63

    def test_positive_ids_agree(self):
        d1, d2 = _grid_points(10), _grid_points(10, 2.0)
        d2 = d2.subset(np.array([True, False] * 5))
        b = make_pairs(d1, d2, 1, 3, (64, 64))
        pos1 = {int(i): tuple(p) for i, p in zip(d1.ids, d1.xy)}
        pos2 = {int(i): tuple(p) for i, p in zip(d2.ids, d2.xy)}
        for x1, x2, s, i in zip(b.xy1, b.xy2, b.labels, b.ids):
            if s:
                assert tuple(x1) == pos1[int(i)] and tuple(x2) == pos2[int(i)]

    def test_seed_42_chair_deterministic(self, chair, camera):
        pts = densify_template(chair, 3)
        views = []
        for az in (30.0, 75.0):
            xy, depth, vis = project_points(pts, euler_to_rotation(EulerPose(az, 10, 0)), camera)
            views.append(prune(DenseKeypoints(np.arange(len(pts)), xy, vis), depth))
        a = make_pairs(*views, 3, 42, camera.shape)
        b = make_pairs(*views, 3, 42, camera.shape)
        for f in ("xy1", "xy2", "labels", "ids"):
            assert getattr(a, f).tobytes() == getattr(b, f).tobytes()

    def test_no_common_ids(self):
        d1 = _grid_points(4)
        d2 = _grid_points(4)
        d2.visible[:] = False
        with pytest.raises(EmptyBatchError):
            make_pairs(d1, d2, 1, 0, (64, 64))


def test_required_visible():
    sparse = [Keypoint2D("seat", 0, 0, True), Keypoint2D("back", 1, 1, False)]
    assert has_required(sparse, ["seat"])
    assert not has_required(sparse, ["seat", "back"])
    assert not has_required(sparse, ["missing"])
