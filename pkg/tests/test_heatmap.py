from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import N_TRIALS, random_pose, simple_view
from hypothesis import given
from hypothesis import strategies as st

from mvfuse.errors import GridTooLarge, ValidationFailure
from mvfuse.geometry import CameraView, RigidTransform, look_at
from mvfuse.heatmap import (P_FLOOR, U_MAX, Heatmap, KeypointField, densify_candidates, grid_nodes, lookup,
                            lookup_many, multiview_probability, multiview_uncertainty, view_factors)


def hm(values, view_id=0, kid=0):
    return Heatmap(view_id, kid, np.asarray(values, dtype=float))


def const_map(value, view_id=0, kid=0, size=16):
    return hm(np.full((size, size), value), view_id, kid)


def point_at_pixel(view, u, v, depth=1.0):
    return view.backproject_pixels([[u, v]], [depth])[0]


def test_heatmap_validation():
    with pytest.raises(ValidationFailure):
        hm([[0.5, 1.2]])
    with pytest.raises(ValidationFailure):
        hm([0.5, 0.2])
    with pytest.raises(ValidationFailure):
        hm([[np.nan]])
    h = hm([[0.1, 0.2], [0.3, 0.4]])
    assert (h.width, h.height) == (2, 2)
    with pytest.raises(ValueError):
        h.values[0, 0] = 1.0


def test_lookup_at_node():
    v = np.zeros((5, 5))
    v[2, 3] = 0.8
    assert lookup(hm(v), (3, 2)) == pytest.approx(0.8)


def test_lookup_outside_is_zero():
    h = const_map(1.0)
    assert lookup(h, (-5, 10)) == 0.0
    assert lookup(h, (16.0, 3)) == 0.0
    assert lookup(h, (-0.5, 3)) == 1.0
    assert lookup(h, (15.5, 15.5)) == 1.0


def test_lookup_midpoint():
    v = np.zeros((4, 4))
    v[1, 1], v[1, 2] = 0.2, 0.6
    assert lookup(hm(v), (1.5, 1)) == pytest.approx(0.4)


def test_lookup_many_handles_nan():
    out = lookup_many(const_map(0.5), [[1, 1], [np.nan, 2], [100, 1]])
    assert np.array_equal(out, [0.5, 0.0, 0.0])


def test_lookup_continuity(rng):
    vals = rng.random((20, 20))
    h = hm(vals)
    for _ in range(N_TRIALS):
        # straddle an interior grid line in u, v or both
        u = float(rng.integers(1, 18)) + rng.choice([0.0, rng.random()])
        v = float(rng.integers(1, 18)) + rng.choice([0.0, rng.random()])
        eps = 1e-7
        a = lookup(h, (u - eps / 2, v - eps / 2))
        b = lookup(h, (u + eps / 2, v + eps / 2))
        assert abs(a - b) < 1e-6
        assert abs(lookup(h, (u, v - 1e-12)) - lookup(h, (u, v + 1e-12))) < 1e-9


def _two_views():
    v0 = simple_view(0)
    v1 = CameraView(1, 500, 500, 64, 64, RigidTransform([[1, 0, 0], [0, 1, 0], [0, 0, 1]], [0.01, 0, 0]))
    return v0, v1


def test_single_view_probability():
    v = simple_view()
    vals = np.zeros((128, 128))
    vals[64, 64] = 0.9
    p = point_at_pixel(v, 64, 64)
    assert multiview_probability(p, [v], [hm(vals)]) == pytest.approx(0.9)


def test_two_view_product_and_uncertainty():
    v0, v1 = _two_views()
    p = np.array([0.0, 0.0, 1.0])
    maps = [const_map(0.9, 0, size=128), const_map(0.5, 1, size=128)]
    assert multiview_probability(p, [v0, v1], maps) == pytest.approx(0.45)
    assert multiview_uncertainty(p, [v0, v1], maps) == pytest.approx(-math.log(0.45))
    assert multiview_uncertainty(p, [v0, v1], [const_map(1.0, 0, size=128), const_map(1.0, 1, size=128)]) == 0.0


def test_outside_one_view_gives_zero():
    views = [simple_view(i) for i in range(8)]
    maps = [const_map(1.0, i, size=128) for i in range(8)]
    views[5] = simple_view(5, origin=(1000, 0))
    p = np.array([0.0, 0.0, 1.0])
    assert multiview_probability(p, views, maps) == 0.0
    assert multiview_uncertainty(p, views, maps) == pytest.approx(U_MAX)


def test_floor_rule():
    v0, v1 = _two_views()
    maps = [const_map(0.0, 0, size=128), const_map(1.0, 1, size=128)]
    assert multiview_uncertainty(np.array([0, 0, 1.0]), [v0, v1], maps) == pytest.approx(-math.log(P_FLOOR))
    assert U_MAX == pytest.approx(13.8155, abs=1e-4)


def _random_setup(rng, n_views=4, size=24):
    views, maps = [], []
    for i in range(n_views):
        eye = rng.normal(0, 0.2, 3) + [0, 0, 1.0]
        views.append(CameraView(i, 300, 300, size / 2, size / 2, look_at(eye, [0, 0, 0]), (0, 0), (size, size)))
        maps.append(hm(rng.uniform(0.05, 1.0, (size, size)), i))
    return views, maps


def test_product_sum_consistency(rng):
    for _ in range(N_TRIALS // 10):
        views, maps = _random_setup(rng)
        pts = rng.normal(0, 0.005, (10, 3))
        f = view_factors(pts, views, maps)
        ok = np.all(f > P_FLOOR, axis=1)
        p = multiview_probability(pts, views, maps)
        u = multiview_uncertainty(pts, views, maps)
        assert np.allclose(np.exp(-u[ok]), p[ok], rtol=1e-12, atol=0)


def test_monotonicity_under_value_decrease(rng):
    for _ in range(N_TRIALS):
        views, maps = _random_setup(rng, n_views=3, size=8)
        p = rng.normal(0, 0.003, 3)
        before = multiview_uncertainty(p, views, maps)
        i = int(rng.integers(0, 3))
        vals = maps[i].values.copy()
        r, c = rng.integers(0, 8, 2)
        vals[r, c] *= rng.random()
        maps2 = list(maps)
        maps2[i] = hm(vals, i)
        assert multiview_uncertainty(p, views, maps2) >= before - 1e-15


def test_view_permutation_invariance(rng):
    for _ in range(N_TRIALS // 10):
        views, maps = _random_setup(rng, n_views=6)
        pts = rng.normal(0, 0.004, (20, 3))
        perm = rng.permutation(6)
        a = multiview_uncertainty(pts, views, maps)
        b = multiview_uncertainty(pts, [views[i] for i in perm], [maps[i] for i in perm])
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)
        pa = multiview_probability(pts, views, maps)
        pb = multiview_probability(pts, [views[i] for i in perm], [maps[i] for i in perm])
        assert np.allclose(pa, pb, rtol=1e-12, atol=0)


def test_keypoint_field_matches_free_functions(rng):
    views, _ = _random_setup(rng, n_views=3)
    maps = [[hm(rng.random((24, 24)), v.view_id, k) for k in range(4)] for v in views]
    field = KeypointField(views, maps)
    pts = rng.normal(0, 0.004, (30, 3))
    kids = rng.integers(0, 4, 30)
    u = field.uncertainty(pts, kids)
    for j in range(30):
        ref = multiview_uncertainty(pts[j], views, [maps[i][kids[j]] for i in range(3)])
        assert u[j] == pytest.approx(ref, rel=1e-12, abs=1e-12)
    kw = rng.normal(0, 0.004, (5, 4, 3))
    batch = field.pose_uncertainty(kw)
    assert batch.shape == (5,)
    assert batch[2] == pytest.approx(field.pose_uncertainty(kw[2]))


def test_keypoint_field_mixed_patch_sizes(rng):
    a = CameraView(0, 300, 300, 8, 8, RigidTransform.identity(), (0, 0), (16, 16))
    b = CameraView(1, 300, 300, 12, 12, RigidTransform.identity(), (0, 0), (24, 24))
    maps = [[hm(rng.random((16, 16)), 0, 0)], [hm(rng.random((24, 24)), 1, 0)]]
    field = KeypointField([a, b], maps)
    pts = rng.normal(0, 0.01, (10, 3)) + [0, 0, 1]
    ref = multiview_uncertainty(pts, [a, b], [maps[0][0], maps[1][0]])
    assert np.allclose(field.uncertainty(pts, 0), ref)


def test_keypoint_field_rejects_misaligned_maps(rng):
    v = simple_view(0)
    with pytest.raises(ValueError):
        KeypointField([v], [[hm(np.ones((4, 4)), 0, 1)]])
    with pytest.raises(ValueError):
        KeypointField([v], [[hm(np.ones((4, 4)), 3, 0)]])


def test_grid_nodes_count_and_order():
    nodes = grid_nodes([0, 0, 0], 1.0, 1.0)
    assert len(nodes) == 27
    assert np.array_equal(nodes[0], [-1, -1, -1]) and np.array_equal(nodes[1], [-1, -1, 0])
    keys = [tuple(n) for n in nodes]
    assert keys == sorted(keys)


def test_grid_too_large():
    with pytest.raises(GridTooLarge):
        grid_nodes([0, 0, 0], 0.1, 1e-5)
    with pytest.raises(ValueError):
        grid_nodes([0, 0, 0], 0.1, 0.2)


def test_densify_27_and_sorted(rng):
    views, maps = _random_setup(rng)
    cands = densify_candidates(np.zeros(3), 0.001, 0.001, views, maps)
    assert len(cands) == 27
    u = [c.uncertainty for c in cands]
    assert u == sorted(u)


def test_densify_finds_noiseless_keypoint(noiseless_scene):
    # bilinear lookups of a sampled peak put the argmin up to ~0.16 mm from the
    # true point, so the grid step must be coarser than that
    s = noiseless_scene
    step = 0.0005
    for k in range(s.model.n_keypoints):
        views, maps = s.instance_views(0, k)
        truth = s.ground_truth_poses[0].apply(s.model.origin_keypoints[k])
        start = truth + np.array([step, -step, 0.0])
        best = densify_candidates(start, 2 * step, step, views, maps)[0]
        assert np.linalg.norm(best.position - truth) <= step / 2
        assert best.uncertainty < 0.5


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=8))
def test_uncertainty_is_finite_and_bounded(values):
    views = [simple_view(i) for i in range(len(values))]
    maps = [const_map(v, i, size=128) for i, v in enumerate(values)]
    u = multiview_uncertainty(np.array([0, 0, 1.0]), views, maps)
    assert 0.0 <= u <= len(values) * U_MAX + 1e-9
