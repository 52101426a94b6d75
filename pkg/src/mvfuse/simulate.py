"""Synthetic bin scenes with exact ground truth.

Stands in for both the learned front end (heatmaps, masks, per-pixel
keypoint votes) and the capture rig (calibrated views on a cone above the
bin, masked depth). Depth is ray-cast against analytic solids, so with all
noise switched off every back-projected pixel lies exactly on the object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import PlacementFailure, ValidationFailure
from .geometry import CameraView, RigidTransform, look_at
from .heatmap import Heatmap, KeypointField, grid_nodes, multiview_uncertainty
from .object_model import KeypointModel
from .refine import DepthImage
from .shapes import Solid, builtin_model

MAX_PLACEMENT_ATTEMPTS = 10_000
VISIBILITY_SAMPLES = 1500


@dataclass(frozen=True)
class SceneConfig:
    shape: str = "l_bracket"
    scale: float = 0.04
    instance_count: int = 3
    bin_extent: tuple[float, float, float] = (0.16, 0.16, 0.04)
    view_count: int = 8
    cone_half_angle: float = 25.0
    camera_distance: float = 0.45
    heatmap_sigma: float = 3.0
    heatmap_noise: float = 0.0
    depth_noise: float = 0.0
    outlier_fraction: float = 0.0
    occlusion_dropout: float = 0.0
    # vote spread in units of heatmap_sigma mapped to meters at the keypoint depth
    vote_noise: float = 1.0
    rng_seed: int = 0
    focal: float = 900.0
    image_size: tuple[int, int] = (1280, 960)
    patch_size: int = 128
    min_separation: float = 0.5
    decoy_shape: str = "cuboid"
    decoy_count: int = 0

    def __post_init__(self):
        if self.instance_count < 1 or self.view_count < 1:
            raise ValidationFailure("instance_count and view_count must be >= 1")
        for name in ("heatmap_noise", "depth_noise", "outlier_fraction", "occlusion_dropout", "vote_noise"):
            if getattr(self, name) < 0:
                raise ValidationFailure(f"{name} must be >= 0")
        if self.outlier_fraction > 1 or self.occlusion_dropout > 1:
            raise ValidationFailure("fractions must lie in [0, 1]")
        if self.heatmap_sigma <= 0 or self.camera_distance <= 0 or self.decoy_count < 0:
            raise ValidationFailure("heatmap_sigma and camera_distance must be positive")

    @classmethod
    def noiseless(cls, **kw) -> SceneConfig:
        base = dict(heatmap_noise=0.0, depth_noise=0.0, outlier_fraction=0.0, occlusion_dropout=0.0, vote_noise=0.0)
        base.update(kw)
        return cls(**base)

    @classmethod
    def benchmark(cls, **kw) -> SceneConfig:
        """The noisy benchmark setting: 3 instances, 8 views, realistic corruption."""
        base = dict(instance_count=3, view_count=8, heatmap_sigma=3.0, heatmap_noise=0.05,
                    depth_noise=0.0005, outlier_fraction=0.1, occlusion_dropout=0.15)
        base.update(kw)
        return cls(**base)


@dataclass(frozen=True, eq=False)
class Votes:
    """Per-pixel keypoint votes: patch pixels (M, 2) as (u, v), keypoint ids, world positions."""

    pixels: np.ndarray
    keypoint_ids: np.ndarray
    positions: np.ndarray

    def __len__(self):
        return len(self.keypoint_ids)


@dataclass(frozen=True, eq=False)
class SimDetection:
    camera_index: int
    object_index: int
    is_decoy: bool
    view: CameraView
    heatmaps: list
    depth: DepthImage
    outliers: np.ndarray
    votes: Votes


@dataclass(eq=False)
class SyntheticScene:
    config: SceneConfig
    model: KeypointModel
    solid: Solid
    ground_truth_poses: list
    visibility: np.ndarray
    cameras: list
    detections: list
    decoy_model: Optional[KeypointModel] = None
    decoy_solid: Optional[Solid] = None
    decoy_poses: list = field(default_factory=list)
    scene_id: str = ""

    def instance_detections(self, instance: int) -> list[SimDetection]:
        return [d for d in self.detections if d.object_index == instance and not d.is_decoy]

    def instance_field(self, instance: int) -> KeypointField:
        dets = self.instance_detections(instance)
        return KeypointField([d.view for d in dets], [d.heatmaps for d in dets])

    def instance_views(self, instance: int, keypoint_id: int):
        dets = self.instance_detections(instance)
        return [d.view for d in dets], [d.heatmaps[keypoint_id] for d in dets]


def camera_ring(config: SceneConfig) -> list[CameraView]:
    """Views evenly spaced in azimuth on a cone above the bin, all aimed at its center."""
    target = np.array([0.0, 0.0, config.bin_extent[2] / 2])
    a = math.radians(config.cone_half_angle)
    w, h = config.image_size
    views = []
    for i in range(config.view_count):
        phi = 2 * math.pi * i / config.view_count
        eye = target + config.camera_distance * np.array([math.sin(a) * math.cos(phi),
                                                          math.sin(a) * math.sin(phi), math.cos(a)])
        views.append(CameraView(i, config.focal, config.focal, w / 2 - 0.5, h / 2 - 0.5,
                                look_at(eye, target), (0, 0), (w, h)))
    return views


def _place(config: SceneConfig, diameters, rng) -> list[RigidTransform]:
    ext = np.asarray(config.bin_extent, dtype=float)
    lo = np.array([-ext[0] / 2, -ext[1] / 2, 0.0])
    poses, centers = [], []
    attempts = 0
    for dia in diameters:
        while True:
            if attempts >= MAX_PLACEMENT_ATTEMPTS:
                raise PlacementFailure(
                    f"placed {len(poses)} of {len(diameters)} objects in {MAX_PLACEMENT_ATTEMPTS} attempts"
                )
            attempts += 1
            c = lo + rng.random(3) * ext
            rot = Rotation.random(random_state=rng).as_matrix()
            if all(np.linalg.norm(c - c2) > config.min_separation * max(dia, d2) for c2, d2 in centers):
                centers.append((c, dia))
                poses.append(RigidTransform(rot, c))
                break
    return poses


def _cast(objects, origin, dirs_world) -> tuple[np.ndarray, np.ndarray]:
    """Nearest hit parameter and object index for rays from ``origin``."""
    best = np.full(len(dirs_world), np.inf)
    which = np.full(len(dirs_world), -1)
    for j, (solid, pose) in enumerate(objects):
        inv = pose.inverse()
        o = inv.apply(origin)
        d = dirs_world @ inv.rotation.T
        t = solid.ray_entry(o[None, :], d)
        closer = t < best
        best[closer] = t[closer]
        which[closer] = j
    return best, which


def _pixel_rays(view: CameraView) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w, h = view.patch_size
    vv, uu = np.mgrid[0:h, 0:w]
    uf = uu.ravel() + view.patch_origin[0]
    vf = vv.ravel() + view.patch_origin[1]
    d_cam = np.stack([(uf - view.cx) / view.fx, (vf - view.cy) / view.fy, np.ones(uf.size)], axis=1)
    return d_cam @ view.camera_to_world.rotation.T, vv.ravel(), uu.ravel()


def _visibility(objects, surface_samples, cameras, n_targets, image_size) -> np.ndarray:
    w, h = image_size
    vis = np.zeros(n_targets)
    for j in range(n_targets):
        solid, pose = objects[j]
        pts = pose.apply(surface_samples)
        seen_all = np.zeros(len(pts), dtype=bool)
        seen_self = np.zeros(len(pts), dtype=bool)
        for cam in cameras:
            pix, z = cam.project_points(pts)
            inb = (z > 0) & (pix[:, 0] >= -0.5) & (pix[:, 0] <= w - 0.5) & (pix[:, 1] >= -0.5) & (pix[:, 1] <= h - 0.5)
            if not inb.any():
                continue
            d = (pts[inb] - cam.center) / z[inb, None]
            t_all, _ = _cast(objects, cam.center, d)
            t_self, _ = _cast([objects[j]], cam.center, d)
            zi = z[inb]
            seen_all[inb] |= t_all > zi * (1 - 1e-6)
            seen_self[inb] |= t_self > zi * (1 - 1e-6)
        n_self = seen_self.sum()
        vis[j] = seen_all.sum() / n_self if n_self else 0.0
    return vis


def generate(config: SceneConfig, scene_id: str = "") -> SyntheticScene:
    """Render a full scene; a pure function of ``config``."""
    rng = np.random.default_rng(config.rng_seed)
    solid, model = builtin_model(config.shape, config.scale)
    decoy_solid = decoy_model = None
    if config.decoy_count:
        decoy_solid, decoy_model = builtin_model(config.decoy_shape, config.scale)
        if decoy_model.n_keypoints != model.n_keypoints:
            raise ValidationFailure("decoy model must have the same keypoint count")
    diameters = [model.diameter] * config.instance_count + [
        decoy_model.diameter if decoy_model else 0.0] * config.decoy_count
    poses = _place(config, diameters, rng)
    gt, decoys = poses[: config.instance_count], poses[config.instance_count:]
    objects = [(solid, p) for p in gt] + [(decoy_solid, p) for p in decoys]
    keypoint_sets = [model.origin_keypoints] * len(gt) + [decoy_model.origin_keypoints if decoy_model else None] * len(decoys)
    centers = [p.apply(k[0]) for p, k in zip(poses, keypoint_sets)]

    cameras = camera_ring(config)
    ps = config.patch_size
    detections = []
    for ci, cam in enumerate(cameras):
        for j, (obj_solid, pose) in enumerate(objects):
            pix, _ = cam.project_points(centers[j])
            origin = (round(pix[0, 0]) - ps // 2, round(pix[0, 1]) - ps // 2)
            view = cam.with_patch(origin, (ps, ps))
            dirs, rows, cols = _pixel_rays(view)
            t, which = _cast(objects, cam.center, dirs)
            depth = np.where(np.isfinite(t), t, 0.0).reshape(ps, ps)
            mask = (which == j).reshape(ps, ps) & (depth > 0)
            if config.depth_noise > 0:
                hit = depth > 0
                depth[hit] += rng.normal(0.0, config.depth_noise, int(hit.sum()))
            outliers = np.zeros((ps, ps), dtype=bool)
            if config.outlier_fraction > 0:
                outliers = mask & (rng.random((ps, ps)) < config.outlier_fraction)
                n_out = int(outliers.sum())
                offset = rng.uniform(0.003, 0.015, n_out) * rng.choice([-1.0, 1.0], n_out)
                depth[outliers] = np.maximum(depth[outliers] + offset, 1e-3)

            kp_world = pose.apply(keypoint_sets[j])
            kp_pix, kp_z = view.project_points(kp_world)
            vv, uu = np.mgrid[0:ps, 0:ps]
            heatmaps = []
            for k in range(len(kp_world)):
                # draw noise first so the random stream does not depend on dropout
                noise = rng.normal(0.0, config.heatmap_noise, (ps, ps)) if config.heatmap_noise > 0 else 0.0
                if rng.random() < config.occlusion_dropout or not np.isfinite(kp_pix[k, 0]):
                    # a dropped peak takes its whole map with it, noise included
                    values = np.zeros((ps, ps))
                else:
                    d2 = (uu - kp_pix[k, 0]) ** 2 + (vv - kp_pix[k, 1]) ** 2
                    values = np.clip(np.exp(-d2 / (2 * config.heatmap_sigma**2)) + noise, 0.0, 1.0)
                # stored at float32 precision so scenes survive a round trip through files
                heatmaps.append(Heatmap(cam.view_id, k, values.astype(np.float32).astype(np.float64)))

            vr, vc = np.nonzero(mask)
            kids = rng.integers(0, len(kp_world), len(vr))
            sigma = config.vote_noise * config.heatmap_sigma * kp_z[kids] / cam.fx
            pos = kp_world[kids] + rng.normal(size=(len(vr), 3)) * sigma[:, None]
            bad = outliers[vr, vc]
            if bad.any():
                dirs_bad = rng.normal(size=(int(bad.sum()), 3))
                dirs_bad /= np.linalg.norm(dirs_bad, axis=1, keepdims=True)
                pos[bad] = kp_world[kids[bad]] + dirs_bad * rng.uniform(0.005, 0.02, int(bad.sum()))[:, None]
            votes = Votes(np.stack([vc, vr], axis=1), kids, pos)
            detections.append(SimDetection(ci, j, j >= len(gt), view, heatmaps,
                                           DepthImage(cam.view_id, depth, mask), outliers, votes))

    samples = model.surface_points[np.linspace(0, len(model.surface_points) - 1,
                                               min(VISIBILITY_SAMPLES, len(model.surface_points))).astype(int)]
    visibility = _visibility(objects, samples, cameras, len(gt), config.image_size)
    return SyntheticScene(config, model, solid, gt, visibility, cameras, detections,
                          decoy_model, decoy_solid, decoys, scene_id)


def oracle_best_keypoint(scene: SyntheticScene, instance: int, keypoint_id: int,
                         search_radius: float, step: float) -> np.ndarray:
    """Exhaustive grid argmin of the multi-view uncertainty around the true keypoint.

    Ties resolve to the lexicographically smallest node.
    """
    truth = scene.ground_truth_poses[instance].apply(scene.model.origin_keypoints[keypoint_id])
    nodes = grid_nodes(truth, search_radius, step)
    views, maps = scene.instance_views(instance, keypoint_id)
    u = multiview_uncertainty(nodes, views, maps)
    return nodes[int(np.argmin(u))]

