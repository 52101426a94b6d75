"""Instance clustering on center-keypoint candidates and RANSAC pose retrieval."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize
from scipy.spatial.transform import Rotation

from .errors import InsufficientKeypoints
from .geometry import RigidTransform, rigid_align_batch, rotation_angle
from .heatmap import KeypointCandidate, KeypointField
from .object_model import KeypointModel

CLUSTER_RADIUS = 0.002
DUP_ANGLE = math.radians(1.0)
DUP_TRANSLATION = 0.0005


@dataclass
class ObjectCluster:
    cluster_id: int
    center: np.ndarray
    members: dict[int, list[KeypointCandidate]] = field(default_factory=dict)
    center_uncertainty: float = 0.0

    def keypoint_ids(self) -> list[int]:
        return sorted(k for k, v in self.members.items() if v)


@dataclass(frozen=True)
class PoseHypothesis:
    pose: RigidTransform
    keypoint_uncertainty: float
    cluster_id: int = -1
    icp_error: Optional[float] = None
    confidence: Optional[float] = None


def cluster_instances(center_candidates, radius: float = CLUSTER_RADIUS) -> list[ObjectCluster]:
    """Greedy lowest-uncertainty-first clustering of center-keypoint candidates.

    The best unassigned candidate seeds a cluster and absorbs every
    unassigned candidate within ``radius``. Ties in uncertainty fall back
    to input order.
    """
    cands = list(center_candidates)
    if not cands:
        return []
    pos = np.array([c.position for c in cands], dtype=float)
    unc = np.array([c.uncertainty for c in cands], dtype=float)
    order = np.argsort(unc, kind="stable")
    assigned = np.zeros(len(cands), dtype=bool)
    clusters = []
    r2 = radius * radius
    for i in order:
        if assigned[i]:
            continue
        d2 = np.sum((pos - pos[i]) ** 2, axis=1)
        take = (~assigned) & (d2 <= r2)
        assigned |= take
        idx = np.flatnonzero(take)
        idx = idx[np.argsort(unc[idx], kind="stable")]
        clusters.append(
            ObjectCluster(len(clusters), pos[i].copy(), {0: [cands[j] for j in idx]}, float(unc[i]))
        )
    return clusters


def _same_pose(a: RigidTransform, b: RigidTransform) -> bool:
    return bool(rotation_angle(a.rotation.T @ b.rotation) < DUP_ANGLE
                and np.linalg.norm(a.translation - b.translation) < DUP_TRANSLATION)


def _distinct(rots, trans, order, top_n):
    kept = []
    for i in order:
        dup = False
        for j in kept:
            if (rotation_angle(rots[i].T @ rots[j]) < DUP_ANGLE
                    and np.linalg.norm(trans[i] - trans[j]) < DUP_TRANSLATION):
                dup = True
                break
        if not dup:
            kept.append(i)
            if len(kept) == top_n:
                break
    return kept


def ransac_pose(cluster: ObjectCluster, model: KeypointModel, field_: KeypointField,
                iterations: int = 500, top_n: int = 5, seed=0, polish: bool = False) -> list[PoseHypothesis]:
    """Sample 3-keypoint pose candidates and keep the ``top_n`` distinct lowest-uncertainty poses.

    Each iteration draws three distinct keypoint ids uniformly, one candidate
    per id with probability proportional to exp(-uncertainty), aligns the
    model keypoints to them, and scores the pose by the summed multi-view
    uncertainty of all transformed model keypoints. Degenerate samples
    consume their iteration. With ``polish`` the best pose is then refined
    by :func:`polish_pose`; any other hypothesis it lands on is dropped.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    ids = cluster.keypoint_ids()
    if len(ids) < 3:
        raise InsufficientKeypoints(
            f"cluster {cluster.cluster_id}: candidates for {len(ids)} keypoint id(s), need 3"
        )
    rng = np.random.default_rng(seed)
    positions, weights = {}, {}
    for k in ids:
        m = cluster.members[k]
        positions[k] = np.array([c.position for c in m], dtype=float)
        u = np.array([c.uncertainty for c in m], dtype=float)
        w = np.exp(-(u - u.min()))
        weights[k] = w / w.sum()

    ids_arr = np.array(ids)
    pick = np.argsort(rng.random((iterations, len(ids))), axis=1)[:, :3]
    chosen = ids_arr[pick]
    targets = np.empty((iterations, 3, 3))
    for k in ids:
        mask = chosen == k
        n = int(mask.sum())
        if n:
            draw = rng.choice(len(positions[k]), size=n, p=weights[k])
            targets[mask] = positions[k][draw]
    sources = model.origin_keypoints[chosen]
    rots, trans, ok = rigid_align_batch(sources, targets)
    rots, trans = rots[ok], trans[ok]
    if len(rots) == 0:
        return []
    kw = np.einsum("bij,kj->bki", rots, model.origin_keypoints) + trans[:, None, :]
    scores = field_.pose_uncertainty(kw)
    order = np.argsort(scores, kind="stable")
    kept = _distinct(rots, trans, order, top_n)
    out = []
    for i in kept:
        pose = RigidTransform(rots[i], trans[i])
        # rescore on the stored pose so the reported value is reproducible
        u = field_.pose_uncertainty(pose.apply(model.origin_keypoints))
        out.append(PoseHypothesis(pose, u, cluster.cluster_id))
    out.sort(key=lambda h: h.keypoint_uncertainty)
    if polish and out:
        pose, u = polish_pose(out[0].pose, model, field_)
        rest = [h for h in out[1:] if not _same_pose(h.pose, pose)]
        out = [PoseHypothesis(pose, u, cluster.cluster_id)] + rest
    return out


def pose_uncertainty(pose: RigidTransform, model: KeypointModel, field_: KeypointField) -> float:
    """Summed keypoint uncertainty of a pose."""
    return field_.pose_uncertainty(pose.apply(model.origin_keypoints))


def polish_pose(pose: RigidTransform, model: KeypointModel, field_: KeypointField,
                max_evals: int = 1500) -> tuple[RigidTransform, float]:
    """Continuous local descent on the summed keypoint uncertainty.

    RANSAC poses come from three discrete candidates, so they are only as
    precise as the candidate spacing. A derivative-free search over a small
    rotation-vector / translation increment removes that quantization. The
    input pose is returned unchanged unless the search strictly improves it.
    """
    ko = model.origin_keypoints
    r0, t0 = pose.rotation, pose.translation
    # parameters scaled so that one unit is ~0.1 rad / 1 mm
    rs, ts = 0.1, 0.001

    def cost(x):
        r = Rotation.from_rotvec(x[:3] * rs).as_matrix() @ r0
        return float(field_.pose_uncertainty(ko @ r.T + t0 + x[3:] * ts))

    u0 = cost(np.zeros(6))
    res = minimize(cost, np.zeros(6), method="Powell",
                   options={"xtol": 1e-3, "ftol": 1e-7, "maxfev": max_evals})
    if not res.fun < u0:
        return pose, u0
    r = Rotation.from_rotvec(res.x[:3] * rs).as_matrix() @ r0
    out = RigidTransform(r, t0 + res.x[3:] * ts).orthonormalized()
    u = pose_uncertainty(out, model, field_)
    return (out, u) if u < u0 else (pose, u0)
