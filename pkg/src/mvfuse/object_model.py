"""Object-frame keypoints, surface samples and diameter."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.distance import pdist

from .errors import ValidationFailure
from .geometry import RigidTransform

MIN_SURFACE_POINTS = 500
DIAMETER_TOL = 1e-6


def max_pairwise_distance(points) -> float:
    """Largest distance between any two points.

    Exact: only convex-hull vertices far enough from the centroid to beat a
    lower bound can be part of the farthest pair.
    """
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    try:
        cand = pts[ConvexHull(pts).vertices]
    except (QhullError, ValueError):
        cand = pts
    r = np.linalg.norm(cand - cand.mean(axis=0), axis=1)
    far = cand[np.argmax(r)]
    lower = float(np.linalg.norm(cand - far, axis=1).max())
    # |p - q| <= r_p + r_max, so points with r_p < lower - r_max cannot improve
    cand = cand[r >= lower - r.max() - 1e-12]
    if len(cand) <= 4000:
        return max(lower, float(pdist(cand).max())) if len(cand) > 1 else lower
    best = lower
    for i in range(0, len(cand), 2000):
        block = cand[i : i + 2000]
        d = np.linalg.norm(block[:, None, :] - cand[None, :, :], axis=-1)
        best = max(best, float(d.max()))
    return best


@dataclass(frozen=True, eq=False)
class KeypointModel:
    """Keypoints (K, 3) with index 0 the center keypoint, surface samples (N, 3)."""

    object_id: str
    origin_keypoints: np.ndarray
    surface_points: np.ndarray
    diameter: float

    def __post_init__(self):
        for name in ("origin_keypoints", "surface_points"):
            a = np.array(getattr(self, name), dtype=float)
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        object.__setattr__(self, "diameter", float(self.diameter))
        self.validate()

    @property
    def n_keypoints(self) -> int:
        return len(self.origin_keypoints)

    def validate(self) -> None:
        kp, surf = self.origin_keypoints, self.surface_points
        if kp.ndim != 2 or kp.shape[1] != 3 or surf.ndim != 2 or surf.shape[1] != 3:
            raise ValidationFailure("keypoints and surface points must be (N, 3) arrays")
        if not (np.all(np.isfinite(kp)) and np.all(np.isfinite(surf))):
            raise ValidationFailure("non-finite coordinates")
        if len(kp) < 3:
            raise ValidationFailure(f"need at least 3 keypoints, got {len(kp)}")
        s = np.linalg.svd(kp - kp.mean(axis=0), compute_uv=False)
        if not s[1] > 1e-9 * s[0]:
            raise ValidationFailure("origin keypoints are collinear")
        if len(surf) < MIN_SURFACE_POINTS:
            raise ValidationFailure(f"need at least {MIN_SURFACE_POINTS} surface points, got {len(surf)}")
        if not self.diameter > 0:
            raise ValidationFailure("diameter must be positive")
        actual = max_pairwise_distance(surf)
        if abs(actual - self.diameter) > DIAMETER_TOL:
            raise ValidationFailure(
                f"declared diameter {self.diameter:.9g} m != max pairwise surface distance {actual:.9g} m"
            )
        off = np.linalg.norm(kp[0] - surf.mean(axis=0))
        if off > 0.1 * self.diameter:
            raise ValidationFailure(f"center keypoint is {off:.3g} m from the surface centroid (> 10% diameter)")


def keypoints_in_world(m: KeypointModel, pose: RigidTransform) -> np.ndarray:
    return pose.apply(m.origin_keypoints)


def load_model(manifest) -> KeypointModel:
    """Load a model from a manifest path or an already-parsed dict.

    Manifest keys: ``object_id``, ``diameter``, ``keypoints`` and ``surface``
    (PLY paths relative to the manifest). A missing ``diameter`` is
    computed from the surface.
    """
    from .io_formats import read_ply, read_json

    if isinstance(manifest, dict):
        data, base = manifest, Path(".")
    else:
        path = Path(manifest)
        data, base = read_json(path), path.parent
    try:
        kp = read_ply(base / data["keypoints"])
        surf = read_ply(base / data["surface"])
    except KeyError as exc:
        raise ValidationFailure(f"model manifest missing key {exc}") from None
    except FileNotFoundError as exc:
        raise ValidationFailure(f"model file not found: {exc.filename}") from None
    keypoints = np.stack([kp["x"], kp["y"], kp["z"]], axis=1)
    surface = np.stack([surf["x"], surf["y"], surf["z"]], axis=1)
    diameter = data.get("diameter")
    if diameter is None:
        diameter = max_pairwise_distance(surface)
    return KeypointModel(str(data.get("object_id", "object")), keypoints, surface, float(diameter))


def save_model(model: KeypointModel, directory) -> Path:
    """Write keypoints, surface and manifest into ``directory``; return the manifest path."""
    from .io_formats import write_json, write_ply

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_ply(d / "keypoints.ply", {"x": model.origin_keypoints[:, 0], "y": model.origin_keypoints[:, 1],
                                     "z": model.origin_keypoints[:, 2]})
    write_ply(d / "surface.ply", {"x": model.surface_points[:, 0], "y": model.surface_points[:, 1],
                                  "z": model.surface_points[:, 2]})
    manifest = {
        "schema_version": 1,
        "object_id": model.object_id,
        "diameter": model.diameter,
        "keypoints": "keypoints.ply",
        "surface": "surface.ply",
    }
    path = d / "model.json"
    write_json(path, manifest)
    return path

