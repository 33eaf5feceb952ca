"""Procedural synthetic RGB-D data: primitive scenes, camera sampling, raycasting.

Scenes are random spheres/boxes/cylinders placed in the shell between a
10x10x5 m outer box and a 6x6x3 m inner box, both centered at the origin.
Cameras look at the origin from 0.7-1.5 m; frames are rendered with a
Lambertian directional-light model. Colors are quantized to 8-bit levels and
depths rounded through float32 at generation time so the on-disk formats
round-trip losslessly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import geom
from .geom import CameraIntrinsics, Frame, Pose, PointCloud

OUTER_HALF = np.array([5.0, 5.0, 2.5])
INNER_HALF = np.array([3.0, 3.0, 1.5])

DEFAULT_RESOLUTION = 128


@dataclass(frozen=True)
class SceneObject:
    kind: str  # sphere | box | cylinder
    pose: Pose
    scale: np.ndarray  # per-axis half extents (meters)
    albedo: np.ndarray

    def __post_init__(self):
        if self.kind not in ("sphere", "box", "cylinder"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=np.float64))
        object.__setattr__(self, "albedo", np.asarray(self.albedo, dtype=np.float64))
        if np.any(self.scale <= 0):
            raise ValueError("scales must be positive")


@dataclass(frozen=True)
class Light:
    direction: np.ndarray  # unit vector pointing toward the light source
    intensity: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "direction", d / np.linalg.norm(d))
        if self.intensity <= 0:
            raise ValueError("light intensity must be positive")


@dataclass(frozen=True)
class SceneSpec:
    objects: tuple
    lights: tuple
    seed: int

    def __post_init__(self):
        if len(self.objects) < 1:
            raise ValueError("a scene needs at least one object")


@dataclass(frozen=True)
class SequenceRecord:
    frames: list
    gt_poses: list  # camera-to-world
    scene: SceneSpec

    def __post_init__(self):
        if len(self.frames) != len(self.gt_poses):
            raise ValueError("frames and poses must pair up")


def default_intrinsics(res: int = DEFAULT_RESOLUTION) -> CameraIntrinsics:
    # focal = res gives a ~53 degree fov; pixel footprint at 3 m is ~2.3 cm,
    # on par with the 2.5 cm matching voxel.
    return CameraIntrinsics(fx=float(res), fy=float(res), cx=res / 2.0, cy=res / 2.0,
                            width=res, height=res)


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def make_scene(num_objects: int, seed: int) -> SceneSpec:
    """Random primitives in the shell between the inner and outer boxes."""
    if num_objects < 1:
        raise ValueError("num_objects must be >= 1")
    rng = np.random.default_rng(seed)
    objects = []
    kinds = ("sphere", "box", "cylinder")
    while len(objects) < num_objects:
        center = rng.uniform(-OUTER_HALF, OUTER_HALF)
        if np.all(np.abs(center) < INNER_HALF):
            continue  # inside the empty inner box: rejected, no collision checks otherwise
        kind = kinds[rng.integers(0, 3)]
        rot = _random_rotation(rng)
        scale = rng.uniform(0.3, 1.2, size=3)
        albedo = rng.uniform(0.1, 1.0, size=3)
        objects.append(SceneObject(kind, Pose(rot, center), scale, albedo))
    lights = []
    for _ in range(2):
        d = rng.normal(size=3)
        d[2] = abs(d[2]) + 0.5  # keep lights above the horizon
        lights.append(Light(d, float(rng.uniform(0.6, 1.1))))
    return SceneSpec(tuple(objects), tuple(lights), seed)


def look_at_origin(pitch: float, yaw: float, distance: float) -> Pose:
    """Camera-to-world pose at the given spherical position, +z toward origin."""
    d = np.array(
        [np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)]
    )
    position = distance * d
    forward = -d
    right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    # camera axes as world columns: x right, y image-down, z forward
    R = np.stack([right, np.cross(forward, right), forward], axis=1)
    return Pose(R, position)


def _sample_pose_pair(rng) -> tuple[Pose, Pose]:
    pitch = np.radians(rng.uniform(15.0, 75.0))
    yaw = np.radians(rng.uniform(0.0, 360.0))
    dist = rng.uniform(0.7, 1.5)
    c2w_src = look_at_origin(pitch, yaw, dist)

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = np.radians(max(rng.normal(20.0, 15.0), 0.0))
    tdir = rng.normal(size=3)
    tdir /= np.linalg.norm(tdir)
    tmag = max(rng.normal(0.4, 0.2), 0.0)
    rel = Pose(geom.so3_exp(axis * angle), tdir * tmag)
    c2w_tgt = geom.compose(c2w_src, geom.invert(rel))
    return c2w_src, c2w_tgt


def sample_pose_pair(rng_seed: int) -> tuple[Pose, Pose]:
    """Source camera on the sampling sphere plus a random relative pose.

    Returns camera-to-world poses; the ground-truth registration transform
    mapping source-camera points onto target-camera points is
    invert(tgt) . src.
    """
    return _sample_pose_pair(np.random.default_rng(rng_seed))


# ---------------------------------------------------------------------------
# Raycasting


def _ray_sphere(o, d):
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * np.einsum("ij,ij->i", o, d)
    c = np.einsum("ij,ij->i", o, o) - 1.0
    disc = b * b - 4 * a * c
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t = (-b - sq) / (2 * a)
    hit &= t > 1e-6
    n = o + t[:, None] * d
    return np.where(hit, t, np.inf), n


def _ray_box(o, d):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-1.0 - o) * inv
        t2 = (1.0 - o) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=1)
    parallel_outside = np.any((np.abs(d) < 1e-12) & (np.abs(o) > 1.0), axis=1)
    hit = (tmin <= tmax) & (tmin > 1e-6) & ~parallel_outside
    p = o + tmin[:, None] * d
    # face normal: axis where |p| is largest
    ax = np.argmax(np.abs(p), axis=1)
    n = np.zeros_like(p)
    n[np.arange(len(p)), ax] = np.sign(p[np.arange(len(p)), ax])
    return np.where(hit, tmin, np.inf), n


def _ray_cylinder(o, d):
    # lateral surface x^2 + y^2 = 1, |z| <= 1
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2.0 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - 1.0
    disc = b * b - 4 * a * c
    ok = (disc > 0) & (a > 1e-12)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lat = np.where(ok, (-b - sq) / (2 * a), np.inf)
    z_lat = o[:, 2] + t_lat * d[:, 2]
    lat_ok = ok & (t_lat > 1e-6) & (np.abs(z_lat) <= 1.0)
    t_lat = np.where(lat_ok, t_lat, np.inf)

    with np.errstate(divide="ignore", invalid="ignore"):
        t_top = (1.0 - o[:, 2]) / d[:, 2]
        t_bot = (-1.0 - o[:, 2]) / d[:, 2]
    best_t = t_lat
    normal = np.zeros_like(o)
    normal[:, 0] = np.where(lat_ok, o[:, 0] + t_lat * d[:, 0], 0.0)
    normal[:, 1] = np.where(lat_ok, o[:, 1] + t_lat * d[:, 1], 0.0)
    for t_cap, nz in ((t_top, 1.0), (t_bot, -1.0)):
        px = o[:, 0] + t_cap * d[:, 0]
        py = o[:, 1] + t_cap * d[:, 1]
        cap_ok = (t_cap > 1e-6) & (px * px + py * py <= 1.0) & np.isfinite(t_cap)
        better = cap_ok & (t_cap < best_t)
        best_t = np.where(better, t_cap, best_t)
        normal[better] = [0.0, 0.0, nz]
    return best_t, normal


_INTERSECTORS = {"sphere": _ray_sphere, "box": _ray_box, "cylinder": _ray_cylinder}


def raycast(scene: SceneSpec, pose: Pose, intrinsics: CameraIntrinsics,
            lights: tuple | None = None) -> Frame:
    """Render one frame: nearest primitive hit per pixel, Lambertian shading.

    `pose` is camera-to-world. Depth is the hit distance projected on the
    optical axis (z-depth); misses are marked invalid with depth 0.
    """
    K = intrinsics
    vg, ug = np.meshgrid(np.arange(K.height), np.arange(K.width), indexing="ij")
    # direction with unit z so the ray parameter equals z-depth
    vcam = np.stack(
        [
            (ug.ravel() - K.cx) / K.fx,
            (vg.ravel() - K.cy) / K.fy,
            np.ones(K.width * K.height),
        ],
        axis=1,
    )
    origin = pose.translation
    dirs_w = vcam @ pose.rotation.T

    n_pix = len(dirs_w)
    best_t = np.full(n_pix, np.inf)
    best_n = np.zeros((n_pix, 3))
    best_albedo = np.zeros((n_pix, 3))

    for obj in scene.objects:
        r_wo = obj.pose.rotation.T
        o_l = ((origin - obj.pose.translation) @ r_wo.T) / obj.scale
        d_l = (dirs_w @ r_wo.T) / obj.scale
        t, n_l = _INTERSECTORS[obj.kind](np.broadcast_to(o_l, d_l.shape), d_l)
        closer = t < best_t
        if not np.any(closer):
            continue
        n_w = (n_l / obj.scale) @ obj.pose.rotation.T
        best_t = np.where(closer, t, best_t)
        best_n[closer] = n_w[closer]
        best_albedo[closer] = obj.albedo

    hit = np.isfinite(best_t)
    norms = np.linalg.norm(best_n, axis=1)
    best_n[hit] /= norms[hit, None]

    shade = np.zeros(n_pix)
    for light in lights if lights is not None else scene.lights:
        shade += np.maximum(best_n @ light.direction, 0.0) * light.intensity
    rgb = np.clip(best_albedo * shade[:, None], 0.0, 1.0)
    rgb = np.round(rgb * 255.0) / 255.0
    rgb[~hit] = 0.0

    depth = np.where(hit, best_t, 0.0).astype(np.float32).astype(np.float64)
    return Frame(rgb.reshape(K.height, K.width, 3), depth.reshape(K.height, K.width), K)


# ---------------------------------------------------------------------------
# Pair and sequence generation

OVERLAP_RADIUS = 0.025


def frame_cloud(frame: Frame, voxel: float = OVERLAP_RADIUS) -> PointCloud:
    """Backproject at full resolution and voxel-downsample to match voxel."""
    cloud = geom.backproject(frame, stride=1)
    if len(cloud) == 0:
        return cloud
    return geom.voxel_downsample(cloud, voxel)


def pair_overlap(frame_a: Frame, frame_b: Frame, rel: Pose) -> float:
    """Overlap of frame_a's voxelized cloud with frame_b's under the pose."""
    src = frame_cloud(frame_a)
    tgt = frame_cloud(frame_b)
    if len(src) == 0 or len(tgt) == 0:
        return 0.0
    return geom.overlap_ratio(src, tgt, rel, radius=OVERLAP_RADIUS)


def generate_pair_set(
    scene: SceneSpec,
    count: int,
    min_overlap: float,
    intrinsics: CameraIntrinsics | None = None,
) -> list[tuple[Frame, Frame, Pose]]:
    """Rejection-sample frame pairs until `count` pass the overlap gate.

    The returned pose is the ground-truth relative transform mapping points
    of the first frame onto the second.
    """
    if not 0 <= min_overlap < 1:
        raise ValueError("min_overlap must be in [0, 1)")
    K = intrinsics or default_intrinsics()
    out = []
    seeds = np.random.SeedSequence([scene.seed, 0x5AB5]).spawn(count)
    for j in range(count):
        rng = np.random.default_rng(seeds[j])
        for attempt in range(1000):
            c2w_a, c2w_b = _sample_pose_pair(rng)
            rel = geom.compose(geom.invert(c2w_b), c2w_a)
            fa = raycast(scene, c2w_a, K)
            fb = raycast(scene, c2w_b, K)
            if min_overlap <= 0.0:
                out.append((fa, fb, rel))
                break
            if pair_overlap(fa, fb, rel) >= min_overlap:
                out.append((fa, fb, rel))
                break
        else:
            raise RuntimeError(
                f"no pair with overlap >= {min_overlap} found in 1000 attempts (pair {j})"
            )
    return out


def generate_sequence(
    scene: SceneSpec,
    length: int,
    intrinsics: CameraIntrinsics | None = None,
    step_yaw_deg: float = 1.2,
    noise_trans: float = 0.004,
    noise_rot_deg: float = 0.1,
    light_drift_deg: float = 0.5,
) -> SequenceRecord:
    """Smooth orbit around the origin with optional pose noise and light drift."""
    if length < 2:
        raise ValueError("length must be >= 2")
    K = intrinsics or default_intrinsics()
    rng = np.random.default_rng(np.random.SeedSequence([scene.seed, 0x5E0]))
    pitch = np.radians(rng.uniform(25.0, 60.0))
    yaw0 = np.radians(rng.uniform(0.0, 360.0))
    dist = rng.uniform(0.9, 1.4)

    base = look_at_origin(pitch, yaw0, dist)
    step = geom.compose(
        geom.invert(look_at_origin(pitch, yaw0 + np.radians(step_yaw_deg), dist)), base
    )
    inv_step = geom.invert(step)

    frames, poses = [], []
    c2w = base
    drift = np.radians(light_drift_deg)
    for k in range(length):
        if noise_trans > 0 or noise_rot_deg > 0:
            eps = geom.PoseTangent(
                rng.normal(0, np.radians(noise_rot_deg), 3), rng.normal(0, noise_trans, 3)
            )
            noisy = geom.compose(c2w, geom.exp(eps))
        else:
            noisy = c2w
        rz = geom.so3_exp(np.array([0.0, 0.0, drift * k]))
        lights = tuple(
            dataclasses.replace(l, direction=rz @ l.direction) for l in scene.lights
        )
        frames.append(raycast(scene, noisy, K, lights=lights))
        poses.append(noisy)
        c2w = geom.compose(c2w, inv_step)
    return SequenceRecord(frames, poses, scene)


def relative_gt(poses: list, a: int, b: int) -> Pose:
    """Ground-truth transform mapping frame-a camera points onto frame b."""
    return geom.compose(geom.invert(poses[b]), poses[a])
