"""Rigid transforms, pinhole projection and closed-form rigid alignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DegenerateConfiguration, NonPositiveDepth, ValidationFailure

DEPTH_EPS = 1e-9
COLLINEAR_RATIO = 1e-9


def _frozen(a, shape):
    arr = np.array(a, dtype=float)
    if arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Proper rigid motion ``x -> R x + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m) -> RigidTransform:
        m = np.asarray(m, dtype=float)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def from_quaternion(cls, quat_xyzw, translation) -> RigidTransform:
        """Build from a scalar-last unit quaternion."""
        return cls(Rotation.from_quat(quat_xyzw).as_matrix(), translation)

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def as_quaternion(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_quat()

    def apply(self, points) -> np.ndarray:
        """Transform a point (3,) or a stack of points (..., 3)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> RigidTransform:
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def orthonormalized(self) -> RigidTransform:
        """Project the rotation back onto SO(3) (polar decomposition)."""
        u, _, vt = np.linalg.svd(self.rotation)
        r = u @ vt
        if np.linalg.det(r) < 0:
            u[:, -1] *= -1
            r = u @ vt
        return RigidTransform(r, self.translation)

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def __repr__(self):
        rv = Rotation.from_matrix(self.rotation).as_rotvec()
        return f"RigidTransform(rotvec={rv.round(6).tolist()}, t={self.translation.round(6).tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(t: RigidTransform) -> RigidTransform:
    return t.inverse()


def rotation_angle(r) -> np.ndarray:
    """Rotation angle in radians of one matrix (3, 3) or a stack (..., 3, 3).

    Uses atan2 of the skew and trace parts, which stays accurate for
    angles near zero where arccos of the trace loses all precision.
    """
    r = np.asarray(r, dtype=float)
    skew = np.stack(
        [r[..., 2, 1] - r[..., 1, 2], r[..., 0, 2] - r[..., 2, 0], r[..., 1, 0] - r[..., 0, 1]],
        axis=-1,
    )
    s = 0.5 * np.linalg.norm(skew, axis=-1)
    c = 0.5 * (np.trace(r, axis1=-2, axis2=-1) - 1.0)
    return np.arctan2(s, c)


def pose_difference(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """Rotation angle (rad) and translation distance (m) between two poses."""
    angle = float(rotation_angle(a.rotation.T @ b.rotation))
    return angle, float(np.linalg.norm(a.translation - b.translation))


@dataclass(frozen=True, eq=False)
class CameraView:
    """Pinhole camera with a cropped image patch.

    Pixel coordinates returned by :func:`project` are patch coordinates, i.e.
    full-image coordinates minus ``patch_origin``. Integer pixel coordinates
    refer to pixel centers.
    """

    view_id: int
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: RigidTransform
    patch_origin: tuple[float, float] = (0.0, 0.0)
    patch_size: tuple[int, int] = (128, 128)
    _cam_to_world: RigidTransform = field(init=False, repr=False)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationFailure(f"view {self.view_id}: focal lengths must be positive")
        w, h = self.patch_size
        if not (w > 0 and h > 0):
            raise ValidationFailure(f"view {self.view_id}: patch dimensions must be positive")
        object.__setattr__(self, "patch_origin", (float(self.patch_origin[0]), float(self.patch_origin[1])))
        object.__setattr__(self, "patch_size", (int(w), int(h)))
        object.__setattr__(self, "_cam_to_world", self.world_to_camera.inverse())

    @property
    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def camera_to_world(self) -> RigidTransform:
        return self._cam_to_world

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self._cam_to_world.translation

    def with_patch(self, origin, size) -> CameraView:
        return CameraView(self.view_id, self.fx, self.fy, self.cx, self.cy, self.world_to_camera, origin, size)

    def project_points(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised projection without the depth check.

        Returns patch pixels (N, 2) and camera-frame depths (N,). Rows with
        depth <= DEPTH_EPS are filled with NaN pixels.
        """
        pc = self.world_to_camera.apply(np.atleast_2d(points))
        z = pc[:, 2]
        ok = z > DEPTH_EPS
        zs = np.where(ok, z, 1.0)
        u = self.fx * pc[:, 0] / zs + self.cx - self.patch_origin[0]
        v = self.fy * pc[:, 1] / zs + self.cy - self.patch_origin[1]
        pix = np.stack([u, v], axis=1)
        pix[~ok] = np.nan
        return pix, z

    def backproject_pixels(self, pixels, depths) -> np.ndarray:
        """Inverse of projection: patch pixels (N, 2) at camera depths (N,) to world points."""
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        depths = np.asarray(depths, dtype=float)
        x = (pixels[:, 0] + self.patch_origin[0] - self.cx) / self.fx * depths
        y = (pixels[:, 1] + self.patch_origin[1] - self.cy) / self.fy * depths
        return self._cam_to_world.apply(np.stack([x, y, depths], axis=1))


def project(view: CameraView, p) -> tuple[np.ndarray, float]:
    """Project one world point into the view's patch.

    Raises NonPositiveDepth when the camera-frame depth is <= 1e-9 m.
    """
    pc = view.world_to_camera.apply(np.asarray(p, dtype=float))
    z = float(pc[2])
    if z <= DEPTH_EPS:
        raise NonPositiveDepth(f"view {view.view_id}: camera-frame depth {z:.3g} m")
    u = view.fx * pc[0] / z + view.cx - view.patch_origin[0]
    v = view.fy * pc[1] / z + view.cy - view.patch_origin[1]
    return np.array([u, v]), z


def _check_spread(centered: np.ndarray) -> None:
    s = np.linalg.svd(centered, compute_uv=False)
    # three points are always coplanar, so rank 2 is the requirement
    if not s[0] > 0 or not s[1] > COLLINEAR_RATIO * s[0]:
        raise DegenerateConfiguration("source points are collinear or duplicated")


def rigid_align(source, target) -> RigidTransform:
    """Least-squares rigid transform mapping ``source`` onto ``target``.

    SVD-based orthogonal Procrustes with a determinant correction, so the
    result is never a reflection. No scale is estimated.
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    if src.ndim != 2 or src.shape[1] != 3 or src.shape != dst.shape:
        raise ValueError(f"mismatched point sets {src.shape} vs {dst.shape}")
    if len(src) < 3:
        raise DegenerateConfiguration(f"need at least 3 correspondences, got {len(src)}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    a = src - mu_s
    _check_spread(a)
    h = a.T @ (dst - mu_d)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    if d == 0:
        d = 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, mu_d - r @ mu_s)


def rigid_align_batch(source, target) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised :func:`rigid_align` over a batch (B, n, 3).

    Returns rotations (B, 3, 3), translations (B, 3) and a boolean mask of
    non-degenerate problems. Degenerate entries hold the identity.
    """
    src = np.asarray(source, dtype=float)
    dst = np.asarray(target, dtype=float)
    mu_s = src.mean(axis=1)
    mu_d = dst.mean(axis=1)
    a = src - mu_s[:, None, :]
    b = dst - mu_d[:, None, :]
    s = np.linalg.svd(a, compute_uv=False)
    ok = (s[:, 0] > 0) & (s[:, 1] > COLLINEAR_RATIO * s[:, 0])
    h = np.einsum("bni,bnj->bij", a, b)
    u, _, vt = np.linalg.svd(h)
    v = np.swapaxes(vt, 1, 2)
    ut = np.swapaxes(u, 1, 2)
    d = np.sign(np.linalg.det(v @ ut))
    d[d == 0] = 1.0
    corr = np.tile(np.eye(3), (len(src), 1, 1))
    corr[:, 2, 2] = d
    r = v @ corr @ ut
    r[~ok] = np.eye(3)
    t = mu_d - np.einsum("bij,bj->bi", r, mu_s)
    t[~ok] = 0.0
    return r, t, ok


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """World-to-camera transform for a camera at ``eye`` looking at ``target``.

    Camera axes follow the usual vision convention: z forward, x right,
    y down in the image.
    """
    eye = np.asarray(eye, dtype=float)
    z = np.asarray(target, dtype=float) - eye
    z /= np.linalg.norm(z)
    up = np.asarray(up, dtype=float)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r_cw = np.stack([x, y, z], axis=0)
    return RigidTransform(r_cw, -r_cw @ eye)
