from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import N_TRIALS, random_pose
from scipy.spatial.distance import pdist

from mvfuse.errors import ValidationFailure
from mvfuse.geometry import RigidTransform, rigid_align
from mvfuse.io_formats import write_json, write_ply
from mvfuse.object_model import KeypointModel, keypoints_in_world, load_model, max_pairwise_distance, save_model
from mvfuse.shapes import builtin_model


def cube_surface(n=600, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 3)) - 0.5
    axis = rng.integers(0, 3, n)
    pts[np.arange(n), axis] = np.where(rng.random(n) < 0.5, -0.5, 0.5)
    corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    return np.vstack([corners, pts])


def cube_keypoints():
    corners = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    return np.vstack([[0, 0, 0], corners, [0, 0, 0.5]])


def write_cube(tmp_path, diameter=None):
    kp, surf = cube_keypoints(), cube_surface()
    write_ply(tmp_path / "kp.ply", {"x": kp[:, 0], "y": kp[:, 1], "z": kp[:, 2]})
    write_ply(tmp_path / "surf.ply", {"x": surf[:, 0], "y": surf[:, 1], "z": surf[:, 2]})
    doc = {"schema_version": 1, "object_id": "cube", "keypoints": "kp.ply", "surface": "surf.ply"}
    if diameter is not None:
        doc["diameter"] = diameter
    write_json(tmp_path / "model.json", doc)
    return tmp_path / "model.json"


def test_unit_cube_loads(tmp_path):
    m = load_model(write_cube(tmp_path, math.sqrt(3)))
    assert m.object_id == "cube" and m.n_keypoints == 10
    assert m.diameter == pytest.approx(math.sqrt(3), abs=1e-12)
    # diameter computed when absent
    assert load_model(write_cube(tmp_path)).diameter == pytest.approx(math.sqrt(3), abs=1e-12)


def test_wrong_diameter_rejected(tmp_path):
    with pytest.raises(ValidationFailure):
        load_model(write_cube(tmp_path, 2.0))


def test_collinear_keypoints_rejected():
    kp = np.array([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0.0]])
    surf = cube_surface()
    with pytest.raises(ValidationFailure):
        KeypointModel("x", kp, surf, max_pairwise_distance(surf))


def test_model_validation_errors():
    surf = cube_surface()
    d = max_pairwise_distance(surf)
    with pytest.raises(ValidationFailure):
        KeypointModel("x", cube_keypoints()[:2], surf, d)
    with pytest.raises(ValidationFailure):
        KeypointModel("x", cube_keypoints(), surf[:100], max_pairwise_distance(surf[:100]))
    shifted = cube_keypoints().copy()
    shifted[0] = [0.4, 0.4, 0.4]
    with pytest.raises(ValidationFailure):
        KeypointModel("x", shifted, surf, d)


def test_load_model_missing_pieces(tmp_path):
    with pytest.raises(ValidationFailure):
        load_model({"object_id": "x"})
    with pytest.raises(ValidationFailure):
        load_model({"object_id": "x", "keypoints": str(tmp_path / "nope.ply"), "surface": "nope.ply"})


def test_save_load_round_trip(tmp_path):
    _, m = builtin_model("l_bracket")
    back = load_model(save_model(m, tmp_path / "m"))
    assert np.array_equal(back.origin_keypoints, m.origin_keypoints)
    assert np.array_equal(back.surface_points, m.surface_points)
    assert back.diameter == m.diameter and back.object_id == m.object_id


def test_max_pairwise_distance_matches_bruteforce(rng):
    for _ in range(20):
        pts = rng.normal(size=(int(rng.integers(2, 400)), 3)) * rng.uniform(0.1, 3, 3)
        assert max_pairwise_distance(pts) == pytest.approx(pdist(pts).max(), rel=1e-12)
    flat = rng.normal(size=(50, 3))
    flat[:, 2] = 0
    assert max_pairwise_distance(flat) == pytest.approx(pdist(flat).max(), rel=1e-12)


def test_keypoints_in_world_examples(rng):
    _, m = builtin_model("cuboid")
    assert np.array_equal(keypoints_in_world(m, RigidTransform.identity()), m.origin_keypoints)
    t = np.array([0.1, -0.2, 0.3])
    assert np.allclose(keypoints_in_world(m, RigidTransform(np.eye(3), t)), m.origin_keypoints + t, atol=1e-15)
    pose = random_pose(rng)
    back = rigid_align(m.origin_keypoints, keypoints_in_world(m, pose))
    assert np.allclose(back.rotation, pose.rotation, atol=1e-9)
    assert np.allclose(back.translation, pose.translation, atol=1e-9)


def test_world_round_trip_and_rigidity(rng):
    _, m = builtin_model("flanged_cylinder")
    ref = pdist(m.origin_keypoints)
    for _ in range(N_TRIALS):
        pose = random_pose(rng, 1.0)
        w = keypoints_in_world(m, pose)
        assert np.max(np.abs(pose.inverse().apply(w) - m.origin_keypoints)) < 1e-12
        assert np.max(np.abs(pdist(w) - ref)) < 1e-12
