"""Per-view keypoint heatmaps and their multi-view fusion.

A 3D point is scored for keypoint k by projecting it into every view and
multiplying the heatmap values found there; the uncertainty is the summed
negative log of those values, with each factor floored at ``P_FLOOR`` so
that scores stay finite and totally ordered.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import GridTooLarge, ValidationFailure
from .geometry import DEPTH_EPS, CameraView

P_FLOOR = 1e-6
U_MAX = -math.log(P_FLOOR)
MAX_GRID_NODES = 10**7


@dataclass(frozen=True, eq=False)
class Heatmap:
    """Row-major probability grid for one (view, keypoint) pair."""

    view_id: int
    keypoint_id: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2 or v.size == 0:
            raise ValidationFailure(f"heatmap values must be a non-empty 2D grid, got shape {v.shape}")
        if not np.all((v >= 0.0) & (v <= 1.0)):
            raise ValidationFailure(f"heatmap view {self.view_id} keypoint {self.keypoint_id}: values outside [0, 1]")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class KeypointCandidate:
    keypoint_id: int
    position: np.ndarray
    source_view: int
    probability: float
    uncertainty: float


def _bilinear(grid: np.ndarray, u: np.ndarray, v: np.ndarray, layer=None) -> np.ndarray:
    """Bilinear sample with pixel-center convention; zero outside the patch.

    ``grid`` is (H, W) or, with ``layer`` given, (L, H, W) indexed per sample.
    """
    h, w = grid.shape[-2:]
    out = np.zeros(u.shape, dtype=float)
    inside = (u >= -0.5) & (u <= w - 0.5) & (v >= -0.5) & (v <= h - 0.5)
    if not inside.any():
        return out
    uu = np.clip(u[inside], 0.0, w - 1.0)
    vv = np.clip(v[inside], 0.0, h - 1.0)
    c0 = np.minimum(np.floor(uu).astype(np.intp), max(w - 2, 0))
    r0 = np.minimum(np.floor(vv).astype(np.intp), max(h - 2, 0))
    c1 = np.minimum(c0 + 1, w - 1)
    r1 = np.minimum(r0 + 1, h - 1)
    fu = uu - c0
    fv = vv - r0
    if layer is None:
        g00, g01, g10, g11 = grid[r0, c0], grid[r0, c1], grid[r1, c0], grid[r1, c1]
    else:
        k = layer[inside]
        g00, g01, g10, g11 = grid[k, r0, c0], grid[k, r0, c1], grid[k, r1, c0], grid[k, r1, c1]
    top = g00 + fu * (g01 - g00)
    bottom = g10 + fu * (g11 - g10)
    out[inside] = top + fv * (bottom - top)
    return out


def lookup(h: Heatmap, pixel) -> float:
    """Heatmap probability at a real-valued patch pixel."""
    px = np.asarray(pixel, dtype=float)
    return float(_bilinear(h.values, px[..., 0:1], px[..., 1:2])[0])


def lookup_many(h: Heatmap, pixels) -> np.ndarray:
    px = np.atleast_2d(np.asarray(pixels, dtype=float))
    u, v = px[:, 0], px[:, 1]
    finite = np.isfinite(u) & np.isfinite(v)
    out = np.zeros(len(px))
    out[finite] = _bilinear(h.values, u[finite], v[finite])
    return out


def view_factors(points, views: Sequence[CameraView], maps: Sequence[Heatmap]) -> np.ndarray:
    """Per-view probabilities (N, n) of ``points`` for a single keypoint.

    Views where a point has non-positive depth contribute 0.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    out = np.zeros((len(pts), len(views)))
    for i, (view, hm) in enumerate(zip(views, maps)):
        pix, _ = view.project_points(pts)
        out[:, i] = lookup_many(hm, pix)
    return out


def _neg_log(factors: np.ndarray) -> np.ndarray:
    return np.sum(-np.log(np.maximum(factors, P_FLOOR)), axis=-1)


def multiview_probability(p, views, maps):
    """Product over views of the heatmap value at the projection of ``p``.

    Accepts a single point (returns float) or an (N, 3) stack.
    """
    f = view_factors(p, views, maps)
    out = np.prod(f, axis=1)
    return float(out[0]) if np.ndim(p) == 1 else out


def multiview_uncertainty(p, views, maps):
    """Summed floored negative log-likelihood over views (nats)."""
    f = view_factors(p, views, maps)
    out = _neg_log(f)
    return float(out[0]) if np.ndim(p) == 1 else out


class KeypointField:
    """Heatmaps of every keypoint of one object instance across views.

    ``maps[i][k]`` is the heatmap of keypoint k in ``views[i]``. Evaluates
    many (point, keypoint id) pairs in one vectorised pass per view.
    """

    def __init__(self, views: Sequence[CameraView], maps: Sequence[Sequence[Heatmap]]):
        if len(views) != len(maps):
            raise ValueError("views and maps must align")
        self.views = list(views)
        self._stacks = []
        for view, per_kp in zip(self.views, maps):
            for k, hm in enumerate(per_kp):
                if hm.keypoint_id != k:
                    raise ValueError(f"view {view.view_id}: heatmap {k} has keypoint_id {hm.keypoint_id}")
                if hm.view_id != view.view_id:
                    raise ValueError(f"heatmap view_id {hm.view_id} does not match view {view.view_id}")
            self._stacks.append(np.stack([hm.values for hm in per_kp]))
        self.maps = [list(m) for m in maps]
        # all views alike: one batched projection and one gather instead of a loop
        self._batched = None
        if self._stacks and len({st.shape for st in self._stacks}) == 1:
            v = self.views
            self._batched = (
                np.stack([np.asarray(x.world_to_camera.rotation).T for x in v]),
                np.stack([x.world_to_camera.translation for x in v])[:, None, :],
                np.array([[x.fx, x.fy, x.cx - x.patch_origin[0], x.cy - x.patch_origin[1]] for x in v]),
                np.concatenate(self._stacks),
            )

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def n_keypoints(self) -> int:
        return self._stacks[0].shape[0] if self._stacks else 0

    def factors(self, points, keypoint_ids) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        kids = np.broadcast_to(np.asarray(keypoint_ids, dtype=np.intp), (len(pts),))
        if self._batched is not None:
            return self._factors_batched(pts, kids)
        out = np.zeros((len(pts), self.n_views))
        for i, (view, stack) in enumerate(zip(self.views, self._stacks)):
            pix, _ = view.project_points(pts)
            finite = np.isfinite(pix[:, 0])
            out[finite, i] = _bilinear(stack, pix[finite, 0], pix[finite, 1], layer=kids[finite])
        return out

    def _factors_batched(self, pts, kids) -> np.ndarray:
        rt, t, intr, flat = self._batched
        pc = pts[None] @ rt + t
        z = pc[..., 2]
        ok = z > DEPTH_EPS
        zs = np.where(ok, z, 1.0)
        u = intr[:, 0, None] * pc[..., 0] / zs + intr[:, 2, None]
        v = intr[:, 1, None] * pc[..., 1] / zs + intr[:, 3, None]
        layer = np.arange(self.n_views)[:, None] * self.n_keypoints + kids[None, :]
        u = np.where(ok, u, np.inf)
        return _bilinear(flat, u, v, layer=np.broadcast_to(layer, u.shape)).T

    def probability(self, points, keypoint_ids) -> np.ndarray:
        return np.prod(self.factors(points, keypoint_ids), axis=1)

    def uncertainty(self, points, keypoint_ids) -> np.ndarray:
        return _neg_log(self.factors(points, keypoint_ids))

    def pose_uncertainty(self, keypoints_world) -> np.ndarray:
        """Summed keypoint uncertainty for one or many poses.

        ``keypoints_world`` is (K, 3) or (B, K, 3) with row k holding the
        transformed origin keypoint k.
        """
        kw = np.asarray(keypoints_world, dtype=float)
        single = kw.ndim == 2
        kw = kw.reshape(-1, kw.shape[-2], 3)
        b, k, _ = kw.shape
        u = self.uncertainty(kw.reshape(-1, 3), np.tile(np.arange(k), b)).reshape(b, k)
        total = u.sum(axis=1)
        return float(total[0]) if single else total


def grid_nodes(center, radius: float, step: float) -> np.ndarray:
    """Axis-aligned cube of nodes around ``center`` in lexicographic (x, y, z) order."""
    if not radius > 0 or not (0 < step <= radius * (1 + 1e-12)):
        raise ValueError("require radius > 0 and 0 < step <= radius")
    n_half = int(math.floor(radius / step + 1e-9))
    n = 2 * n_half + 1
    if n**3 > MAX_GRID_NODES:
        raise GridTooLarge(f"{n}^3 = {n**3:.3g} nodes exceeds {MAX_GRID_NODES:.0e}")
    offs = np.arange(-n_half, n_half + 1) * step
    gx, gy, gz = np.meshgrid(offs, offs, offs, indexing="ij")
    return np.asarray(center, dtype=float) + np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)


def densify_candidates(seed, radius: float, step: float, views, maps) -> list[KeypointCandidate]:
    """Score every node of a cubic grid around ``seed``; best first."""
    nodes = grid_nodes(seed, radius, step)
    f = view_factors(nodes, views, maps)
    u = _neg_log(f)
    p = np.prod(f, axis=1)
    kid = maps[0].keypoint_id if len(maps) else -1
    order = np.argsort(u, kind="stable")
    return [KeypointCandidate(kid, nodes[i], -1, float(p[i]), float(u[i])) for i in order]
