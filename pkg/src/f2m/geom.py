"""SE(3) algebra, camera model, backprojection and nearest-neighbor primitives.

Conventions: rotations are 3x3 row-major matrices acting on column points,
poses map points as p -> R @ p + t. Depth value 0 marks an invalid pixel and
depths outside the sensor range [0.05, 20] m are treated as invalid too.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEPTH_MIN = 0.05
DEPTH_MAX = 20.0

ORTHO_TOL = 1e-9


class DegenerateAngleError(ValueError):
    """Rotation angle at (or numerically indistinguishable from) pi."""


def _freeze(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation (3x3, det +1) and translation (meters)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = _freeze(self.rotation)
        t = _freeze(self.translation)
        if R.shape != (3, 3) or t.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        if not np.all(np.abs(R.T @ R - np.eye(3)) < 1e-7):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-7:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(m: np.ndarray) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return Pose(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (N,3) array of points."""
        return np.asarray(points) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class PoseTangent:
    """Axis-angle rotation increment (rad) and translation increment (m)."""

    omega: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        w = _freeze(self.omega)
        v = _freeze(self.nu)
        if w.shape != (3,) or v.shape != (3,):
            raise ValueError("tangent needs two 3-vectors")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(v))):
            raise ValueError("tangent entries must be finite")
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "nu", v)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.omega, self.nu])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])


@dataclass(frozen=True)
class Frame:
    """RGB image in [0,1], metric depth map (0 = invalid) and intrinsics."""

    rgb: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        rgb = _freeze(self.rgb)
        depth = _freeze(self.depth)
        h, w = self.intrinsics.height, self.intrinsics.width
        if rgb.shape != (h, w, 3):
            raise ValueError(f"rgb shape {rgb.shape} does not match intrinsics {h}x{w}")
        if depth.shape != (h, w):
            raise ValueError(f"depth shape {depth.shape} does not match intrinsics {h}x{w}")
        if rgb.min() < 0.0 or rgb.max() > 1.0:
            raise ValueError("rgb values must lie in [0,1]")
        if depth.min() < 0.0:
            raise ValueError("depth must be non-negative")
        object.__setattr__(self, "rgb", rgb)
        object.__setattr__(self, "depth", depth)

    def valid_mask(self) -> np.ndarray:
        return (self.depth >= DEPTH_MIN) & (self.depth <= DEPTH_MAX)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        pts = _freeze(self.points).reshape(-1, 3)
        object.__setattr__(self, "points", pts)
        n = len(pts)
        if self.colors is not None:
            c = _freeze(self.colors)
            if c.shape != (n, 3):
                raise ValueError("colors must be Nx3")
            object.__setattr__(self, "colors", c)
        if self.normals is not None:
            nm = _freeze(self.normals)
            if nm.shape != (n, 3):
                raise ValueError("normals must be Nx3")
            if n and np.max(np.abs(np.linalg.norm(nm, axis=1) - 1.0)) > 1e-6:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", nm)

    def __len__(self):
        return len(self.points)


# ---------------------------------------------------------------------------
# SO(3)/SE(3) helpers


def skew(w: np.ndarray) -> np.ndarray:
    wx, wy, wz = w
    return np.array([[0.0, -wz, wy], [wz, 0.0, -wx], [-wy, wx, 0.0]])


def so3_exp(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a Taylor branch below 1e-8 rad."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < 1e-8:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def so3_left_jacobian(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * k + (k @ k) / 6.0
    b = (1.0 - np.cos(theta)) / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * k + c * (k @ k)


def so3_left_jacobian_inv(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega)
    k = skew(omega)
    if theta < 1e-6:
        return np.eye(3) - 0.5 * k + (k @ k) / 12.0
    c = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) - 0.5 * k + c * (k @ k)


def exp(tangent: PoseTangent) -> Pose:
    """SE(3) exponential: rotation by omega, translation J_l(omega) @ nu."""
    R = so3_exp(tangent.omega)
    t = so3_left_jacobian(tangent.omega) @ tangent.nu
    return Pose(R, t)


def log(pose: Pose) -> PoseTangent:
    """Inverse of exp. Raises DegenerateAngleError within 1e-6 of angle pi."""
    R = pose.rotation
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta > np.pi - 1e-6:
        raise DegenerateAngleError("rotation angle too close to pi for a unique log")
    if theta < 1e-8:
        omega = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]) / 2.0
    else:
        omega = (
            theta
            / (2.0 * np.sin(theta))
            * np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
        )
    nu = so3_left_jacobian_inv(omega) @ pose.translation
    return PoseTangent(omega, nu)


def compose(a: Pose, b: Pose) -> Pose:
    """Pose applying b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def rotation_angle_deg(R: np.ndarray) -> float:
    """Geodesic rotation angle, i.e. arccos((trace-1)/2), in degrees.

    Evaluated as atan2(|skew part|, (trace-1)/2): the same quantity, but
    well-conditioned near 0 and pi where the arccos form amplifies rounding.
    """
    cos_t = (np.trace(R) - 1.0) / 2.0
    sin_t = 0.5 * np.linalg.norm(
        [R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]]
    )
    return float(np.degrees(np.arctan2(sin_t, np.clip(cos_t, -1.0, 1.0))))


# ---------------------------------------------------------------------------
# Camera / point-cloud operations


def backproject(frame: Frame, stride: int = 1) -> PointCloud:
    """One point per valid-depth pixel on a stride-subsampled grid.

    Point = depth * K^-1 (u, v, 1) in camera coordinates, colors copied.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    K = frame.intrinsics
    vs = np.arange(0, K.height, stride)
    us = np.arange(0, K.width, stride)
    vg, ug = np.meshgrid(vs, us, indexing="ij")
    depth = frame.depth[vg, ug]
    valid = (depth >= DEPTH_MIN) & (depth <= DEPTH_MAX)
    u = ug[valid].astype(np.float64)
    v = vg[valid].astype(np.float64)
    d = depth[valid]
    x = (u - K.cx) / K.fx * d
    y = (v - K.cy) / K.fy * d
    pts = np.stack([x, y, d], axis=1)
    colors = frame.rgb[vg, ug][valid]
    return PointCloud(pts, colors=colors)


def transform(cloud: PointCloud, pose: Pose) -> PointCloud:
    """Apply pose to every point; normals are rotated only."""
    pts = pose.apply(cloud.points)
    normals = None
    if cloud.normals is not None:
        normals = cloud.normals @ pose.rotation.T
    return PointCloud(pts, colors=cloud.colors, normals=normals)


def _nn_chunk(q: np.ndarray, t: np.ndarray):
    # Explicit per-axis squared differences so distances are bit-equal to a
    # per-pair scalar evaluation of (dx^2 + dy^2) + dz^2.
    dx = q[:, 0:1] - t[None, :, 0]
    dy = q[:, 1:2] - t[None, :, 1]
    dz = q[:, 2:3] - t[None, :, 2]
    d2 = (dx * dx + dy * dy) + dz * dz
    idx = np.argmin(d2, axis=1)
    return idx, d2[np.arange(len(q)), idx]


def nearest_neighbor(query: PointCloud | np.ndarray, target: PointCloud | np.ndarray):
    """Exact nearest neighbor for every query point.

    Returns (indices, distances). Distance ties break to the lowest index.
    """
    q = query.points if isinstance(query, PointCloud) else np.asarray(query, np.float64)
    t = target.points if isinstance(target, PointCloud) else np.asarray(target, np.float64)
    if len(t) == 0:
        raise ValueError("nearest_neighbor: empty target cloud")
    idx = np.empty(len(q), dtype=np.int64)
    d2 = np.empty(len(q), dtype=np.float64)
    chunk = max(1, 4_000_000 // max(len(t), 1))
    for s in range(0, len(q), chunk):
        e = min(s + chunk, len(q))
        idx[s:e], d2[s:e] = _nn_chunk(q[s:e], t)
    return idx, np.sqrt(d2)


def overlap_ratio(
    source: PointCloud, target: PointCloud, pose: Pose, radius: float = 0.025
) -> float:
    """Fraction of source points within `radius` of target after alignment."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    if len(source) == 0:
        raise ValueError("overlap_ratio: empty source cloud")
    moved = pose.apply(source.points)
    _, dist = nearest_neighbor(moved, target)
    return float(np.mean(dist <= radius))


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Average points (and colors) falling into each voxel of size `voxel`."""
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / voxel).astype(np.int64)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.ravel()
    counts = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
    pts = np.stack(
        [np.bincount(inv, weights=cloud.points[:, a], minlength=len(uniq)) for a in range(3)],
        axis=1,
    )
    pts /= counts[:, None]
    colors = None
    if cloud.colors is not None:
        colors = np.stack(
            [np.bincount(inv, weights=cloud.colors[:, a], minlength=len(uniq)) for a in range(3)],
            axis=1,
        )
        colors = np.clip(colors / counts[:, None], 0.0, 1.0)
    return PointCloud(pts, colors=colors)
