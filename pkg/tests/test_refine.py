from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import N_TRIALS, simple_view

from mvfuse.errors import NoCorrespondences, ValidationFailure
from mvfuse.geometry import RigidTransform, pose_difference
from mvfuse.heatmap import Heatmap, KeypointField
from mvfuse.refine import DepthImage, ScoredCloud, backproject, filter_cloud, icp, score_cloud
from mvfuse.shapes import builtin_model


def test_depth_image_validation():
    with pytest.raises(ValidationFailure):
        DepthImage(0, np.ones((4, 4)), np.ones((4, 5), bool))
    with pytest.raises(ValidationFailure):
        DepthImage(0, -np.ones((2, 2)), np.ones((2, 2), bool))
    d = DepthImage(0, np.array([[0.0, np.nan], [1.0, 2.0]]), np.ones((2, 2), bool))
    assert (d.width, d.height) == (2, 2)


def test_backproject_empty_mask():
    v = simple_view(size=(8, 8), c=4)
    cloud = backproject(v, DepthImage(0, np.ones((8, 8)), np.zeros((8, 8), bool)))
    assert len(cloud) == 0


def test_backproject_optical_axis():
    v = simple_view(size=(9, 9), c=4)
    mask = np.zeros((9, 9), bool)
    mask[4, 4] = True
    cloud = backproject(v, DepthImage(0, np.ones((9, 9)), mask))
    assert len(cloud) == 1
    assert np.allclose(cloud.points[0], [0, 0, 1.0], atol=1e-15)
    assert np.array_equal(cloud.pixels[0], [0, 4, 4])


def test_backproject_view_mismatch():
    v = simple_view(view_id=3, size=(4, 4))
    with pytest.raises(ValueError):
        backproject(v, DepthImage(1, np.ones((4, 4)), np.ones((4, 4), bool)))


def test_backproject_round_trip_on_simulated_depth(noiseless_multi):
    for det in noiseless_multi.detections:
        cloud = backproject(det.view, det.depth)
        pix, z = det.view.project_points(cloud.points)
        assert np.max(np.abs(pix - cloud.pixels[:, 1:])) < 1e-6
        assert np.max(np.abs(z - det.depth.depth[cloud.pixels[:, 2], cloud.pixels[:, 1]])) < 1e-9


def _peak_field(view, n_kp=2, size=128):
    maps = []
    for k in range(n_kp):
        vals = np.zeros((size, size))
        vals[64, 64 + k] = 1.0
        maps.append(Heatmap(view.view_id, k, vals))
    return KeypointField([view], [maps])


def test_score_cloud_peaks_and_outside():
    v = simple_view()
    field = _peak_field(v)
    votes = v.backproject_pixels([[64, 64], [65, 64], [500, 64]], [1.0, 1.0, 1.0])
    cloud = ScoredCloud(np.zeros((3, 3)), np.ones(3))
    scored = score_cloud(cloud, [0, 1, 0], votes, field)
    assert np.allclose(scored.scores, [1, 1, 0])
    with pytest.raises(ValueError):
        score_cloud(cloud, [0, 1], votes, field)


def test_simulated_outliers_score_lower(noisy_scene):
    s = noisy_scene
    good, bad = [], []
    for j in range(len(s.ground_truth_poses)):
        field = s.instance_field(j)
        for det in s.instance_detections(j):
            cloud = backproject(det.view, det.depth)
            px = det.votes.pixels
            lut = {(int(u), int(v)): i for i, (u, v) in enumerate(px)}
            idx = np.array([lut[(u, v)] for _, u, v in cloud.pixels])
            scored = score_cloud(cloud, det.votes.keypoint_ids[idx], det.votes.positions[idx], field,
                                 floored=True)
            out = det.outliers[cloud.pixels[:, 2], cloud.pixels[:, 1]]
            good.append(scored.scores[~out])
            bad.append(scored.scores[out])
    good, bad = np.concatenate(good), np.concatenate(bad)
    assert len(bad) > 0
    assert np.median(bad) < np.median(good)
    # the bottom fifth of a filtered cloud should be dominated by outliers
    cut = np.quantile(np.concatenate([good, bad]), 0.2)
    assert np.mean(bad <= cut) > 2 * np.mean(good <= cut)


def test_floored_score_is_positive_and_rank_preserving(noiseless_scene):
    s = noiseless_scene
    field = s.instance_field(0)
    det = s.instance_detections(0)[0]
    pos, kids = det.votes.positions[:200], det.votes.keypoint_ids[:200]
    cloud = ScoredCloud(pos.copy(), np.zeros(len(pos)))
    plain = score_cloud(cloud, kids, pos, field).scores
    floored = score_cloud(cloud, kids, pos, field, floored=True).scores
    assert np.all(floored > 0) and np.all(floored <= 1)
    # flooring only raises factors, and leaves products of unfloored factors alone
    assert np.all(floored >= plain * (1 - 1e-9))
    f = field.factors(pos, kids)
    untouched = np.all(f >= 1e-6, axis=1)
    assert np.allclose(floored[untouched], plain[untouched], rtol=1e-9, atol=0)


def test_filter_cloud_examples(rng):
    c = ScoredCloud(rng.random((10, 3)), rng.random(10))
    same = filter_cloud(c, 1.0)
    assert np.array_equal(same.points, c.points) and np.array_equal(same.scores, c.scores)
    uniform = ScoredCloud(np.arange(30.0).reshape(10, 3), np.full(10, 0.5))
    half = filter_cloud(uniform, 0.5)
    assert np.array_equal(half.points, uniform.points[:5])
    with pytest.raises(ValueError):
        filter_cloud(c, 0.0)
    with pytest.raises(ValueError):
        filter_cloud(ScoredCloud(np.zeros((0, 3)), np.zeros(0)), 0.5)


def test_filter_cloud_threshold_property(rng):
    for _ in range(N_TRIALS):
        n = int(rng.integers(1, 60))
        scores = rng.choice(rng.random(max(1, n // 3)), n) if rng.random() < 0.5 else rng.random(n)
        c = ScoredCloud(rng.random((n, 3)), scores, np.arange(3 * n).reshape(n, 3))
        q = float(rng.uniform(0.01, 1.0))
        out = filter_cloud(c, q)
        assert len(out) == min(n, math.ceil(round(q * n, 9)))
        kept_rows = set(out.pixels[:, 0].tolist())
        kept = np.array([r in kept_rows for r in c.pixels[:, 0]])
        lo = out.scores.min()
        assert np.all(out.scores >= lo)
        assert not np.any(c.scores[~kept] > lo)
        # input order preserved
        assert np.all(np.diff(out.pixels[:, 0]) > 0)


def test_filter_removes_labelled_outliers(rng):
    n = 2000
    outlier = rng.random(n) < 0.1
    scores = np.where(outlier, rng.uniform(0.0, 0.2, n), rng.uniform(0.15, 1.0, n))
    c = ScoredCloud(rng.random((n, 3)), scores, np.stack([np.arange(n)] * 3, axis=1))
    out = filter_cloud(c, 0.8)
    kept = np.zeros(n, bool)
    kept[out.pixels[:, 0]] = True
    assert (outlier & ~kept).sum() >= 0.9 * outlier.sum()


@pytest.fixture(scope="module")
def bracket():
    return builtin_model("l_bracket")[1]


def test_icp_fixed_point(bracket, rng):
    gt = RigidTransform.from_rotvec([0.3, -0.2, 1.0], [0.01, 0.02, 0.4])
    idx = rng.choice(len(bracket.surface_points), 3000, replace=False)
    scene = ScoredCloud(gt.apply(bracket.surface_points[idx]), np.ones(3000))
    res = icp(bracket.surface_points, scene, gt)
    assert res.rms_error < 1e-9
    ang, tr = pose_difference(res.pose, gt)
    assert ang < 1e-9 and tr < 1e-9
    assert res.inlier_fraction == 1.0


def test_icp_converges_from_perturbation(bracket, rng):
    idx = rng.choice(len(bracket.surface_points), 4000, replace=False)
    for trial in range(5):
        gt = RigidTransform.from_rotvec(rng.normal(0, 1, 3), rng.normal(0, 0.05, 3))
        scene = ScoredCloud(gt.apply(bracket.surface_points[idx]), np.ones(len(idx)))
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        d = RigidTransform.from_rotvec(axis * math.radians(5))
        shift = rng.normal(size=3)
        shift *= 0.002 / np.linalg.norm(shift)
        init = RigidTransform(gt.rotation @ d.rotation, gt.translation + shift)
        res = icp(bracket.surface_points, scene, init, max_iterations=100, convergence_tol=1e-12)
        ang, tr = pose_difference(res.pose, gt)
        assert tr < 1e-5 and math.degrees(ang) < 0.01


def test_icp_no_overlap(bracket):
    gt = RigidTransform.identity()
    scene = ScoredCloud(bracket.surface_points[:500], np.ones(500))
    far = RigidTransform(np.eye(3), [10 * bracket.diameter, 0, 0])
    with pytest.raises(NoCorrespondences):
        icp(bracket.surface_points, scene, far)
    with pytest.raises(ValueError):
        icp(bracket.surface_points, ScoredCloud(np.zeros((2, 3)), np.ones(2)), gt)


def test_icp_monotonicity(bracket, rng):
    model = bracket.surface_points[rng.choice(len(bracket.surface_points), 1500, replace=False)]
    for _ in range(N_TRIALS):
        gt = RigidTransform.from_rotvec(rng.normal(0, 1, 3), rng.normal(0, 0.05, 3))
        pts = gt.apply(model[rng.choice(len(model), 150, replace=False)])
        pts += rng.normal(0, rng.uniform(0, 0.0005), pts.shape)
        init = RigidTransform(RigidTransform.from_rotvec(rng.normal(0, 0.1, 3)).rotation @ gt.rotation,
                              gt.translation + rng.normal(0, 0.003, 3))
        res = icp(model, ScoredCloud(pts, np.ones(len(pts))), init, max_iterations=15,
                  correspondence_cutoff=float(rng.uniform(0.003, 0.01)))
        for (r0, n0), (r1, n1) in zip(res.history, res.history[1:]):
            if n1 == n0:
                assert r1 <= r0 + 1e-12
            else:
                assert n1 > n0 or r1 < r0
