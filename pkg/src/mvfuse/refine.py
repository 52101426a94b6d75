"""Masked-depth point clouds, keypoint-score filtering and ICP refinement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import NoCorrespondences, ValidationFailure
from .geometry import CameraView, RigidTransform, rigid_align
from .heatmap import KeypointField

MAX_DEPTH = 100.0


@dataclass(frozen=True, eq=False)
class DepthImage:
    """Depth grid in meters (0 or NaN = missing) plus the object mask."""

    view_id: int
    depth: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        d = np.array(self.depth, dtype=float)
        m = np.array(self.mask, dtype=bool)
        if d.ndim != 2 or d.shape != m.shape:
            raise ValidationFailure(f"depth {d.shape} and mask {m.shape} must be equal 2D grids")
        valid = np.isfinite(d) & (d != 0)
        if np.any(valid & ((d <= 0) | (d >= MAX_DEPTH))):
            raise ValidationFailure(f"view {self.view_id}: depths must lie in (0, {MAX_DEPTH}) m")
        d.flags.writeable = False
        m.flags.writeable = False
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "mask", m)

    @property
    def width(self) -> int:
        return self.depth.shape[1]

    @property
    def height(self) -> int:
        return self.depth.shape[0]


@dataclass(frozen=True, eq=False)
class ScoredCloud:
    points: np.ndarray
    scores: np.ndarray
    # optional (N, 3) int rows of (view_id, u, v) for the source pixel
    pixels: Optional[np.ndarray] = None

    def __post_init__(self):
        p = np.array(self.points, dtype=float).reshape(-1, 3)
        s = np.array(self.scores, dtype=float).reshape(-1)
        if len(p) != len(s):
            raise ValidationFailure("points and scores must have the same length")
        if np.any((s < 0) | (s > 1)):
            raise ValidationFailure("scores must lie in [0, 1]")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "scores", s)
        if self.pixels is not None:
            object.__setattr__(self, "pixels", np.asarray(self.pixels, dtype=np.int64).reshape(-1, 3))

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> ScoredCloud:
        return ScoredCloud(self.points[idx], self.scores[idx], None if self.pixels is None else self.pixels[idx])

    @staticmethod
    def concatenate(clouds) -> ScoredCloud:
        clouds = list(clouds)
        if not clouds:
            return ScoredCloud(np.zeros((0, 3)), np.zeros(0))
        pix = None
        if all(c.pixels is not None for c in clouds):
            pix = np.concatenate([c.pixels for c in clouds])
        return ScoredCloud(np.concatenate([c.points for c in clouds]),
                           np.concatenate([c.scores for c in clouds]), pix)


@dataclass(frozen=True)
class IcpResult:
    pose: RigidTransform
    rms_error: float
    inlier_fraction: float
    iterations_used: int
    # per-iteration (rms, inlier count), evaluated before each pose update
    history: tuple = field(default=(), repr=False)


def backproject(view: CameraView, d: DepthImage) -> ScoredCloud:
    """World points of every masked pixel with valid depth (scores all 1)."""
    if d.view_id != view.view_id:
        raise ValueError(f"depth view {d.view_id} does not match camera view {view.view_id}")
    z = d.depth
    valid = d.mask & np.isfinite(z) & (z > 0)
    rows, cols = np.nonzero(valid)
    depths = z[rows, cols]
    pts = view.backproject_pixels(np.stack([cols, rows], axis=1), depths)
    pix = np.stack([np.full(len(rows), view.view_id), cols, rows], axis=1)
    return ScoredCloud(pts, np.ones(len(pts)), pix)


def score_cloud(cloud: ScoredCloud, keypoint_ids, vote_positions, field_: KeypointField,
                floored: bool = False) -> ScoredCloud:
    """Score each point by the fused probability of the keypoint candidate it voted for.

    With ``floored`` the score is exp(-uncertainty), i.e. the product with
    every per-view factor floored at P_FLOOR. One view with a suppressed
    peak then costs a factor 1e-6 instead of zeroing the point, so points
    stay ranked by the remaining views.
    """
    kids = np.asarray(keypoint_ids, dtype=np.intp)
    votes = np.asarray(vote_positions, dtype=float).reshape(-1, 3)
    if len(kids) != len(cloud) or len(votes) != len(cloud):
        raise ValueError("vote targets must align with cloud points")
    if not len(cloud):
        scores = np.zeros(0)
    elif floored:
        scores = np.exp(-field_.uncertainty(votes, kids))
    else:
        scores = field_.probability(votes, kids)
    return ScoredCloud(cloud.points, np.clip(scores, 0.0, 1.0), cloud.pixels)


def filter_cloud(cloud: ScoredCloud, keep_quantile: float = 0.8) -> ScoredCloud:
    """Keep the ceil(q N) highest-scoring points, preserving input order."""
    if not 0 < keep_quantile <= 1:
        raise ValueError("keep_quantile must lie in (0, 1]")
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot filter an empty cloud")
    n_keep = min(n, math.ceil(round(keep_quantile * n, 9)))
    order = np.argsort(-cloud.scores, kind="stable")
    return cloud.subset(np.sort(order[:n_keep]))


def icp(model_surface, scene: ScoredCloud, init: RigidTransform, max_iterations: int = 50,
        correspondence_cutoff: float = 0.01, convergence_tol: float = 1e-6,
        model_tree: Optional[cKDTree] = None) -> IcpResult:
    """Point-to-point ICP registering the model surface to the scene cloud.

    Each scene point is paired with its nearest model point under the
    current pose; pairs farther than ``correspondence_cutoff`` are dropped.
    The scene only covers surfaces the cameras saw, so pairing in this
    direction never drags hidden model faces onto visible scene points.
    """
    surface = np.asarray(model_surface, dtype=float)
    pts = np.asarray(scene.points, dtype=float)
    if len(surface) < 3 or len(pts) < 3:
        raise ValueError("ICP needs at least 3 model and 3 scene points")
    tree = model_tree if model_tree is not None else cKDTree(surface)
    pose = init
    history = []
    prev = None
    used = 0

    def match(p):
        local = p.inverse().apply(pts)
        dist, idx = tree.query(local, distance_upper_bound=correspondence_cutoff)
        ok = np.isfinite(dist)
        if not ok.any():
            raise NoCorrespondences(
                f"no scene point within {correspondence_cutoff:.4g} m of the model surface"
            )
        return dist, idx, ok

    for it in range(max_iterations):
        dist, idx, ok = match(pose)
        rms = float(np.sqrt(np.mean(dist[ok] ** 2)))
        history.append((rms, int(ok.sum())))
        if prev is not None and abs(prev - rms) < convergence_tol:
            return IcpResult(pose, rms, float(ok.mean()), it, tuple(history))
        pose = rigid_align(surface[idx[ok]], pts[ok])
        prev = rms
        used = it + 1
    dist, idx, ok = match(pose)
    rms = float(np.sqrt(np.mean(dist[ok] ** 2)))
    history.append((rms, int(ok.sum())))
    return IcpResult(pose, rms, float(ok.mean()), used, tuple(history))
