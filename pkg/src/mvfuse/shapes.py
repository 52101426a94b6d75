"""Analytic solids (unions of boxes and cylinders) used by the simulator.

Each solid can be ray-cast exactly, sampled uniformly over its outer
surface, and turned into a :class:`KeypointModel` with farthest-point
keypoints.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .object_model import KeypointModel, max_pairwise_distance

_BIG = np.inf


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]

    def area(self) -> float:
        a, b, c = (2 * h for h in self.half_extents)
        return 2 * (a * b + b * c + a * c)

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = np.abs(p - np.asarray(self.center)) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    def entry(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        """Ray parameter of the first intersection (inf if none) for rays o + t d."""
        lo = np.asarray(self.center) - np.asarray(self.half_extents)
        hi = np.asarray(self.center) + np.asarray(self.half_extents)
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo - o) / d
            t2 = (hi - o) / d
        tmin = np.where(d == 0, np.where((o >= lo) & (o <= hi), -_BIG, _BIG), np.minimum(t1, t2))
        tmax = np.where(d == 0, np.where((o >= lo) & (o <= hi), _BIG, -_BIG), np.maximum(t1, t2))
        t_in = tmin.max(axis=-1)
        t_out = tmax.min(axis=-1)
        hit = (t_in <= t_out) & (t_in > 0)
        return np.where(hit, t_in, _BIG)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        h = np.asarray(self.half_extents)
        dims = 2 * h
        faces = np.array([dims[1] * dims[2], dims[0] * dims[2], dims[0] * dims[1]])
        probs = np.repeat(faces, 2) / (2 * faces.sum())
        face = rng.choice(6, size=n, p=probs)
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        pts = (rng.random((n, 3)) * 2 - 1) * h
        pts[np.arange(n), axis] = sign * h[axis]
        return pts + np.asarray(self.center)


@dataclass(frozen=True)
class Cylinder:
    """Cylinder with its axis along object z."""

    center: tuple[float, float, float]
    radius: float
    half_length: float

    def area(self) -> float:
        r, h = self.radius, self.half_length
        return 2 * np.pi * r * 2 * h + 2 * np.pi * r * r

    def sdf(self, p: np.ndarray) -> np.ndarray:
        q = p - np.asarray(self.center)
        dr = np.linalg.norm(q[..., :2], axis=-1) - self.radius
        dz = np.abs(q[..., 2]) - self.half_length
        outside = np.hypot(np.maximum(dr, 0.0), np.maximum(dz, 0.0))
        inside = np.minimum(np.maximum(dr, dz), 0.0)
        return outside + inside

    def entry(self, o: np.ndarray, d: np.ndarray) -> np.ndarray:
        q = o - np.asarray(self.center)
        a = d[:, 0] ** 2 + d[:, 1] ** 2
        b = 2 * (q[:, 0] * d[:, 0] + q[:, 1] * d[:, 1])
        c = q[:, 0] ** 2 + q[:, 1] ** 2 - self.radius**2
        disc = b * b - 4 * a * c
        parallel = a < 1e-18
        with np.errstate(divide="ignore", invalid="ignore"):
            sq = np.sqrt(np.maximum(disc, 0.0))
            r1 = (-b - sq) / (2 * a)
            r2 = (-b + sq) / (2 * a)
        s_in = np.where(parallel, np.where(c <= 0, -_BIG, _BIG), np.where(disc >= 0, r1, _BIG))
        s_out = np.where(parallel, np.where(c <= 0, _BIG, -_BIG), np.where(disc >= 0, r2, -_BIG))
        dz = d[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            z1 = (-self.half_length - q[:, 2]) / dz
            z2 = (self.half_length - q[:, 2]) / dz
        inside_slab = np.abs(q[:, 2]) <= self.half_length
        zin = np.where(dz == 0, np.where(inside_slab, -_BIG, _BIG), np.minimum(z1, z2))
        zout = np.where(dz == 0, np.where(inside_slab, _BIG, -_BIG), np.maximum(z1, z2))
        t_in = np.maximum(s_in, zin)
        t_out = np.minimum(s_out, zout)
        hit = (t_in <= t_out) & (t_in > 0)
        return np.where(hit, t_in, _BIG)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        r, h = self.radius, self.half_length
        side = 2 * np.pi * r * 2 * h
        cap = np.pi * r * r
        part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
        theta = rng.random(n) * 2 * np.pi
        rad = np.where(part == 0, r, r * np.sqrt(rng.random(n)))
        z = np.where(part == 0, (rng.random(n) * 2 - 1) * h, np.where(part == 1, -h, h))
        pts = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
        return pts + np.asarray(self.center)


@dataclass(frozen=True)
class Solid:
    name: str
    parts: tuple

    def sdf(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.min([part.sdf(p) for part in self.parts], axis=0)

    def ray_entry(self, origins, directions) -> np.ndarray:
        """First-hit ray parameter for rays ``o + t d`` in the object frame."""
        o = np.atleast_2d(np.asarray(origins, dtype=float))
        d = np.atleast_2d(np.asarray(directions, dtype=float))
        o = np.broadcast_to(o, d.shape)
        return np.min([part.entry(o, d) for part in self.parts], axis=0)

    def sample_surface(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform samples on the outer boundary of the union."""
        areas = np.array([p.area() for p in self.parts])
        out = []
        need = n
        while need > 0:
            counts = rng.multinomial(int(need * 1.6) + 16, areas / areas.sum())
            for i, (part, c) in enumerate(zip(self.parts, counts)):
                if c == 0:
                    continue
                pts = part.sample(int(c), rng)
                others = [q for j, q in enumerate(self.parts) if j != i]
                if others:
                    keep = np.min([q.sdf(pts) for q in others], axis=0) >= 0
                    pts = pts[keep]
                out.append(pts)
            allpts = np.concatenate(out)
            need = n - len(allpts)
        allpts = np.concatenate(out)
        return allpts[rng.permutation(len(allpts))[:n]]


def farthest_point_sampling(points: np.ndarray, k: int, start: int | None = None) -> np.ndarray:
    """Indices of ``k`` points chosen greedily to maximise spread."""
    pts = np.asarray(points, dtype=float)
    if start is None:
        start = int(np.argmax(np.linalg.norm(pts - pts.mean(axis=0), axis=1)))
    idx = [start]
    dist = np.linalg.norm(pts - pts[start], axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        idx.append(nxt)
        dist = np.minimum(dist, np.linalg.norm(pts - pts[nxt], axis=1))
    return np.array(idx)


def cuboid(scale: float = 0.04) -> Solid:
    s = scale / 0.04
    return Solid("cuboid", (Box((0.0, 0.0, 0.0), (0.020 * s, 0.0125 * s, 0.0075 * s)),))


def l_bracket(scale: float = 0.04) -> Solid:
    s = scale / 0.04
    base = Box((0.0, 0.0, 0.0), (0.020 * s, 0.010 * s, 0.003 * s))
    # upright overlaps the base by 1 mm so no faces are shared
    upright = Box((-0.017 * s, 0.0, 0.0135 * s), (0.003 * s, 0.010 * s, 0.0115 * s))
    return Solid("l_bracket", (base, upright))


def flanged_cylinder(scale: float = 0.04) -> Solid:
    s = scale / 0.04
    body = Cylinder((0.0, 0.0, 0.0), 0.008 * s, 0.018 * s)
    # one-sided tab breaks the rotational symmetry of the body
    tab = Box((0.011 * s, 0.0, -0.015 * s), (0.007 * s, 0.004 * s, 0.002 * s))
    return Solid("flanged_cylinder", (body, tab))


BUILTIN_SHAPES = {"cuboid": cuboid, "l_bracket": l_bracket, "flanged_cylinder": flanged_cylinder}


def build_model(solid: Solid, n_surface: int = 8000, n_keypoints: int = 10, seed: int = 0) -> KeypointModel:
    """Keypoint model of a solid: centroid as keypoint 0, then FPS surface keypoints."""
    rng = np.random.default_rng(seed)
    surface = solid.sample_surface(n_surface, rng)
    centroid = surface.mean(axis=0)
    fps = surface[farthest_point_sampling(surface, n_keypoints - 1)]
    keypoints = np.vstack([centroid, fps])
    return KeypointModel(solid.name, keypoints, surface, max_pairwise_distance(surface))


@lru_cache(maxsize=16)
def builtin_model(name: str, scale: float = 0.04, n_surface: int = 20000) -> tuple[Solid, KeypointModel]:
    try:
        solid = BUILTIN_SHAPES[name](scale)
    except KeyError:
        raise ValueError(f"unknown shape {name!r}; choose from {sorted(BUILTIN_SHAPES)}") from None
    return solid, build_model(solid, n_surface=n_surface)
