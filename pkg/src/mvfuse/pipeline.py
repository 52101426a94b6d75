"""End-to-end estimation: cluster, RANSAC, filtered ICP, confidence."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import InsufficientKeypoints, NoCorrespondences
from .fusion import CLUSTER_RADIUS, ObjectCluster, PoseHypothesis, cluster_instances, ransac_pose
from .geometry import CameraView, RigidTransform
from .heatmap import P_FLOOR, KeypointCandidate, KeypointField, grid_nodes
from .object_model import KeypointModel
from .refine import DepthImage, ScoredCloud, backproject, filter_cloud, icp, score_cloud
from .score import Detection, confidence
from .simulate import SyntheticScene, Votes

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DetectionInput:
    """One 2D instance detection: its patch view, heatmaps, masked depth and votes."""

    detection_id: int
    view: CameraView
    heatmaps: list
    depth: DepthImage
    votes: Votes


@dataclass(eq=False)
class SceneInput:
    scene_id: str
    model: KeypointModel
    cameras: list
    detections: list
    ground_truth_poses: Optional[list] = None
    visibility: Optional[np.ndarray] = None


@dataclass(frozen=True)
class EstimateConfig:
    seed: int = 0
    views: Optional[int] = None
    ransac_iters: int = 500
    keep_quantile: float = 0.8
    conf_weights: tuple[float, float] = (1.0, 1.0)
    icp_cutoff: float = 0.01
    top_n: int = 5
    polish: bool = True
    cluster_radius: float = CLUSTER_RADIUS
    densify: bool = True
    densify_radius: float = 0.0015
    densify_step: float = 0.00025
    densify_keep: int = 64
    # coarse pass: every hypothesis, on a subsample, to rank them
    max_icp_points: int = 8000
    icp_iterations: int = 50
    icp_tol: float = 1e-6
    # fine pass: the winner only, on the full filtered cloud. Point-to-point ICP
    # against sampled surfaces stalls at a fixed point whose error shrinks with
    # scene density, and slides slowly, hence the tighter tolerance.
    fine_icp: bool = True
    fine_icp_points: int = 40000
    fine_icp_iterations: int = 100
    fine_icp_tol: float = 1e-9
    refine: bool = True


@dataclass(eq=False)
class ClusterResult:
    cluster: ObjectCluster
    detection_ids: list
    n_views: int
    hypotheses: list = field(default_factory=list)
    refined: list = field(default_factory=list)
    detection: Optional[Detection] = None
    skipped: Optional[str] = None


@dataclass(eq=False)
class EstimateResult:
    detections: list
    clusters: list


def from_synthetic(scene: SyntheticScene) -> SceneInput:
    """Strip the simulator's labels, keeping only what an estimator would see."""
    dets = [DetectionInput(i, d.view, d.heatmaps, d.depth, d.votes) for i, d in enumerate(scene.detections)]
    return SceneInput(scene.scene_id, scene.model, list(scene.cameras), dets,
                      list(scene.ground_truth_poses), np.asarray(scene.visibility))


def select_views(cameras, n: Optional[int]) -> list[int]:
    """View ids of ``n`` cameras spread evenly through the camera list."""
    ids = [c.view_id for c in cameras]
    if n is None or n >= len(ids):
        return ids
    if n < 1:
        raise ValueError("need at least one view")
    return [ids[(i * len(ids)) // n] for i in range(n)]


def _seed(config: EstimateConfig, *keys) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([config.seed, *keys]))


def _center_candidates(dets) -> tuple[list[KeypointCandidate], np.ndarray]:
    """Center-keypoint votes scored against every detection of each camera.

    Before association the owning detection in other cameras is unknown, so
    each camera contributes its best heatmap value over its detections.
    Also returns the index into ``dets`` each candidate came from.
    """
    pos, src, owner = [], [], []
    for i, d in enumerate(dets):
        sel = d.votes.keypoint_ids == 0
        pos.append(d.votes.positions[sel])
        src.append(np.full(int(sel.sum()), d.view.view_id))
        owner.append(np.full(int(sel.sum()), i))
    if not pos:
        return [], np.zeros(0, dtype=int)
    pos = np.concatenate(pos)
    src = np.concatenate(src)
    by_cam: dict[int, list] = {}
    for d in dets:
        by_cam.setdefault(d.view.view_id, []).append(d)
    factors = np.zeros((len(pos), len(by_cam)))
    for i, (_, group) in enumerate(sorted(by_cam.items())):
        f = KeypointField([d.view for d in group], [[d.heatmaps[0]] for d in group]).factors(pos, 0)
        factors[:, i] = f.max(axis=1)
    u = np.sum(-np.log(np.maximum(factors, P_FLOOR)), axis=1)
    p = np.prod(factors, axis=1)
    cands = [KeypointCandidate(0, pos[i], int(src[i]), float(p[i]), float(u[i])) for i in range(len(pos))]
    return cands, np.concatenate(owner)


def _associate(clusters, cands, owner, dets) -> dict[int, list]:
    """Attach each detection to the cluster holding most of its center votes.

    A camera contributes at most one detection per cluster (the one with
    the most votes there); ties go to the earlier cluster.
    """
    if not clusters:
        return {}
    where = {}
    for j, cl in enumerate(clusters):
        for c in cl.members.get(0, []):
            where[id(c)] = j
    counts = np.zeros((len(dets), len(clusters)), dtype=int)
    for c, i in zip(cands, owner):
        counts[i, where[id(c)]] += 1
    best: dict[tuple[int, int], tuple[int, int]] = {}
    for i, d in enumerate(dets):
        if counts[i].sum() == 0:
            continue
        j = int(np.argmax(counts[i]))
        key = (j, d.view.view_id)
        if key not in best or counts[i, j] > best[key][0]:
            best[key] = (int(counts[i, j]), i)
    out: dict[int, list] = {}
    for (j, _), (_, i) in sorted(best.items()):
        out.setdefault(j, []).append(dets[i])
    return out


def _vote_center(d) -> np.ndarray:
    return np.median(d.votes.positions[d.votes.keypoint_ids == 0], axis=0)


def _merge_fragments(clusters, attached, radius: float) -> list[tuple[ObjectCluster, list]]:
    """Fold clusters that are pieces of one instance into the earliest piece.

    A cluster seed can sit ~1 mm off the true center, so one instance may
    leave a second seed just outside the radius. Two clusters merge when the
    medians of their detections' center votes are within ``radius`` and no
    camera contributes to both.
    """
    out: list[list] = []
    for j, cl in enumerate(clusters):
        group = attached.get(j)
        if not group:
            continue
        center = np.median([_vote_center(d) for d in group], axis=0)
        cams = {d.view.view_id for d in group}
        for entry in out:
            if np.linalg.norm(entry[2] - center) < radius and not cams & entry[3]:
                base = entry[0]
                members = {k: list(v) for k, v in base.members.items()}
                for k, v in cl.members.items():
                    members.setdefault(k, []).extend(v)
                entry[0] = ObjectCluster(base.cluster_id, base.center, members, base.center_uncertainty)
                entry[1] = entry[1] + group
                entry[2] = np.median([_vote_center(d) for d in entry[1]], axis=0)
                entry[3] = entry[3] | cams
                break
        else:
            out.append([cl, list(group), center, cams])
    return [(e[0], sorted(e[1], key=lambda d: d.view.view_id)) for e in out]


def _members(cluster, dets, field_: KeypointField, config: EstimateConfig) -> dict[int, list]:
    members: dict[int, list] = {}
    center = cluster.members.get(0, [])
    if center:
        pos = np.array([c.position for c in center])
        f = field_.factors(pos, 0)
        u = np.sum(-np.log(np.maximum(f, P_FLOOR)), axis=1)
        p = np.prod(f, axis=1)
        members[0] = [KeypointCandidate(0, pos[i], c.source_view, float(p[i]), float(u[i]))
                      for i, c in enumerate(center)]
    k_total = field_.n_keypoints
    for k in range(1, k_total):
        pos, src = [], []
        for d in dets:
            sel = d.votes.keypoint_ids == k
            pos.append(d.votes.positions[sel])
            src.append(np.full(int(sel.sum()), d.view.view_id))
        pos = np.concatenate(pos) if pos else np.zeros((0, 3))
        if len(pos) == 0:
            continue
        src = np.concatenate(src)
        f = field_.factors(pos, k)
        u = np.sum(-np.log(np.maximum(f, P_FLOOR)), axis=1)
        p = np.prod(f, axis=1)
        members[k] = [KeypointCandidate(k, pos[i], int(src[i]), float(p[i]), float(u[i])) for i in range(len(pos))]
    if config.densify:
        for k, cands in list(members.items()):
            if not cands:
                continue
            seed = min(cands, key=lambda c: c.uncertainty).position
            nodes = grid_nodes(seed, config.densify_radius, config.densify_step)
            f = field_.factors(nodes, k)
            u = np.sum(-np.log(np.maximum(f, P_FLOOR)), axis=1)
            p = np.prod(f, axis=1)
            best = np.argsort(u, kind="stable")[: config.densify_keep]
            cands.extend(KeypointCandidate(k, nodes[i], -1, float(p[i]), float(u[i])) for i in best)
    return members


def _scene_cloud(dets, field_: KeypointField) -> ScoredCloud:
    clouds = []
    for d in dets:
        cloud = backproject(d.view, d.depth)
        if len(cloud) == 0:
            continue
        w, h = d.view.patch_size
        kid_grid = np.full((h, w), -1, dtype=np.intp)
        pos_grid = np.zeros((h, w, 3))
        px = d.votes.pixels
        kid_grid[px[:, 1], px[:, 0]] = d.votes.keypoint_ids
        pos_grid[px[:, 1], px[:, 0]] = d.votes.positions
        u, v = cloud.pixels[:, 1], cloud.pixels[:, 2]
        kids = kid_grid[v, u]
        has_vote = kids >= 0
        scored = score_cloud(cloud.subset(has_vote), kids[has_vote], pos_grid[v, u][has_vote], field_,
                             floored=True)
        clouds.append(scored)
    return ScoredCloud.concatenate(clouds)


def _subsample(cloud: ScoredCloud, n: int, rng: np.random.Generator) -> ScoredCloud:
    if len(cloud) <= n:
        return cloud
    return cloud.subset(np.sort(rng.choice(len(cloud), n, replace=False)))


def _refine_one(h: PoseHypothesis, model: KeypointModel, cloud: ScoredCloud, field_: KeypointField,
                config: EstimateConfig, tree: cKDTree) -> Optional[PoseHypothesis]:
    try:
        res = icp(model.surface_points, cloud, h.pose, max_iterations=config.icp_iterations,
                  correspondence_cutoff=config.icp_cutoff, convergence_tol=config.icp_tol, model_tree=tree)
    except NoCorrespondences:
        log.debug("cluster %d: ICP found no correspondences", h.cluster_id)
        return None
    u = field_.pose_uncertainty(res.pose.apply(model.origin_keypoints))
    c = confidence(u, res.rms_error, model, field_.n_views, config.conf_weights)
    return PoseHypothesis(res.pose, u, h.cluster_id, res.rms_error, c)


def refine_hypotheses(hyps, model: KeypointModel, cloud: ScoredCloud, field_: KeypointField,
                      config: EstimateConfig, tree: Optional[cKDTree] = None) -> list[PoseHypothesis]:
    """ICP-refine every hypothesis and attach ICP error and confidence."""
    tree = tree if tree is not None else cKDTree(model.surface_points)
    out = [r for r in (_refine_one(h, model, cloud, field_, config, tree) for h in hyps) if r is not None]
    if not out and hyps:
        # nothing overlapped the scene: keep the RANSAC pose at the worst admissible ICP error
        h = hyps[0]
        c = confidence(h.keypoint_uncertainty, config.icp_cutoff, model, field_.n_views, config.conf_weights)
        out.append(PoseHypothesis(h.pose, h.keypoint_uncertainty, h.cluster_id, config.icp_cutoff, c))
    out.sort(key=lambda h: h.confidence)
    return out


def estimate(scene: SceneInput, config: EstimateConfig = EstimateConfig()) -> EstimateResult:
    model = scene.model
    chosen = set(select_views(scene.cameras, config.views))
    dets = [d for d in scene.detections if d.view.view_id in chosen]
    cands, owner = _center_candidates(dets)
    clusters = cluster_instances(cands, config.cluster_radius)
    attached = _associate(clusters, cands, owner, dets)
    tree = cKDTree(model.surface_points)
    results = []
    for cl, group in _merge_fragments(clusters, attached, config.cluster_radius):
        field_ = KeypointField([d.view for d in group], [d.heatmaps for d in group])
        cl = ObjectCluster(cl.cluster_id, cl.center, _members(cl, group, field_, config), cl.center_uncertainty)
        res = ClusterResult(cl, [d.detection_id for d in group], len(group))
        results.append(res)
        try:
            res.hypotheses = ransac_pose(cl, model, field_, config.ransac_iters, config.top_n,
                                         seed=_seed(config, cl.cluster_id), polish=config.polish)
        except InsufficientKeypoints as exc:
            res.skipped = str(exc)
            continue
        if not config.refine or not res.hypotheses:
            continue
        cloud = _scene_cloud(group, field_)
        if len(cloud) < 3:
            res.skipped = "empty scene cloud"
            continue
        cloud = filter_cloud(cloud, config.keep_quantile)
        coarse = _subsample(cloud, config.max_icp_points, _seed(config, cl.cluster_id, 1))
        res.refined = refine_hypotheses(res.hypotheses, model, coarse, field_, config, tree)
        best = res.refined[0]
        if config.fine_icp:
            fine = _subsample(cloud, config.fine_icp_points, _seed(config, cl.cluster_id, 2))
            fine_cfg = replace(config, icp_iterations=config.fine_icp_iterations, icp_tol=config.fine_icp_tol)
            polished = _refine_one(best, model, fine, field_, fine_cfg, tree)
            if polished is not None:
                best = res.refined[0] = polished
        res.detection = Detection(best, best.confidence, model.object_id, scene.scene_id)
    if results and all(r.skipped and r.skipped.startswith("cluster") for r in results):
        raise InsufficientKeypoints("; ".join(r.skipped for r in results))
    detections = sorted((r.detection for r in results if r.detection is not None), key=lambda d: d.confidence)
    return EstimateResult(detections, results)
