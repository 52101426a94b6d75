from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest

from mvfuse.fusion import ObjectCluster
from mvfuse.geometry import pose_difference
from mvfuse.pipeline import EstimateConfig, _merge_fragments, estimate, from_synthetic, select_views
from mvfuse.score import Verdict, evaluate_scene


def test_select_views():
    cams = [SimpleNamespace(view_id=i) for i in range(8)]
    assert select_views(cams, None) == list(range(8))
    assert select_views(cams, 8) == list(range(8))
    assert select_views(cams, 12) == list(range(8))
    assert select_views(cams, 2) == [0, 4]
    assert select_views(cams, 4) == [0, 2, 4, 6]
    assert select_views(cams, 3) == [0, 2, 5]
    with pytest.raises(ValueError):
        select_views(cams, 0)


def _fake_det(view_id, center):
    votes = SimpleNamespace(positions=np.tile(center, (5, 1)), keypoint_ids=np.zeros(5, dtype=int))
    return SimpleNamespace(view=SimpleNamespace(view_id=view_id), votes=votes)


def _cluster(i, center):
    return ObjectCluster(i, np.asarray(center, dtype=float), {0: []}, 0.0)


def test_merge_fragments_joins_split_instance():
    a = np.array([0.0, 0.0, 0.0])
    clusters = [_cluster(0, a), _cluster(1, a + [0.0025, 0, 0]), _cluster(2, a + [0.05, 0, 0])]
    attached = {0: [_fake_det(0, a), _fake_det(2, a)],
                1: [_fake_det(1, a + [0.0005, 0, 0])],
                2: [_fake_det(0, a + [0.05, 0, 0]), _fake_det(1, a + [0.05, 0, 0])]}
    merged = _merge_fragments(clusters, attached, 0.002)
    assert len(merged) == 2
    (c0, g0), (c2, g2) = merged
    assert c0.cluster_id == 0 and [d.view.view_id for d in g0] == [0, 1, 2]
    assert c2.cluster_id == 2 and len(g2) == 2


def test_merge_fragments_keeps_clusters_sharing_a_camera():
    a = np.zeros(3)
    clusters = [_cluster(0, a), _cluster(1, a)]
    attached = {0: [_fake_det(0, a)], 1: [_fake_det(0, a + [0.0005, 0, 0])]}
    assert len(_merge_fragments(clusters, attached, 0.002)) == 2


def test_merge_fragments_drops_empty_clusters():
    clusters = [_cluster(0, np.zeros(3)), _cluster(1, np.ones(3))]
    merged = _merge_fragments(clusters, {1: [_fake_det(3, np.ones(3))]}, 0.002)
    assert [c.cluster_id for c, _ in merged] == [1]


def test_noiseless_multi_instance_recovery(noiseless_multi):
    s = noiseless_multi
    res = estimate(from_synthetic(s))
    assert len(res.detections) == len(s.ground_truth_poses)
    recs, summ = evaluate_scene(res.detections, s.ground_truth_poses, s.model)
    assert summ.n_false_positive == 0
    assert all(r.verdict is Verdict.CORRECT for r in recs)
    for r in recs:
        gt = s.ground_truth_poses[r.matched_gt]
        angle, dist = pose_difference(r.detection.pose, gt)
        assert dist < 1e-4 and np.degrees(angle) < 0.05
    confs = [d.confidence for d in res.detections]
    assert confs == sorted(confs)


def test_estimate_is_deterministic(noisy_scene):
    scene = from_synthetic(noisy_scene)
    cfg = EstimateConfig(seed=5)
    a, b = estimate(scene, cfg), estimate(scene, cfg)
    assert [d.confidence for d in a.detections] == [d.confidence for d in b.detections]
    assert all(np.array_equal(x.pose.matrix(), y.pose.matrix()) for x, y in zip(a.detections, b.detections))


def test_no_refine_keeps_hypotheses(noisy_scene):
    res = estimate(from_synthetic(noisy_scene), EstimateConfig(refine=False))
    assert res.detections == []
    assert all(r.hypotheses for r in res.clusters if not r.skipped)
    for r in res.clusters:
        us = [h.keypoint_uncertainty for h in r.hypotheses]
        assert us == sorted(us) and len(us) <= 5


def test_view_subset_uses_only_selected_cameras(noisy_scene):
    scene = from_synthetic(noisy_scene)
    res = estimate(scene, EstimateConfig(views=2, refine=False))
    allowed = set(select_views(scene.cameras, 2))
    by_id = {d.detection_id: d.view.view_id for d in scene.detections}
    for r in res.clusters:
        assert {by_id[i] for i in r.detection_ids} <= allowed
        assert r.n_views <= 2
