"""Global scene model: multi-resolution feature grids plus a tiny decoder.

The decoder maps interpolated grid features to a truncation-unit SDF value in
[-1,1] (tanh-saturated) and, together with a sinusoidal encoding of the view
direction, to an RGB color in [0,1]. Rendering weights samples along a ray by
a bell curve peaked at the SDF zero crossing: w = sigmoid(s/beta) *
sigmoid(-s/beta), beta = d_tr/4, normalized per ray.

Sample supervision along a ray with observed depth d: samples inside the
truncation band |d - z| < d_tr and samples behind it (z > d + d_tr) get the
clamped linear SDF target (d - z)/d_tr in the SDF term; samples in front
(z < d - d_tr) get the free-space target +1. Pushing behind-surface samples
toward +1 instead would plant a second zero crossing behind every surface
and corrupt rendered depth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from ._kernels import trilinear_bwd, trilinear_fwd
from .diffengine import ParamStore, Tape, Tensor
from .geom import Frame, Pose

FIELD_MAGIC = b"F2MF"
FIELD_VERSION = 1

_FREQS = (1.0, 2.0, 4.0, 8.0)
GEOM_HIDDEN = 32
LATENT_DIM = 16
COLOR_HIDDEN = 32


@dataclass(frozen=True)
class FieldConfig:
    bounds_min: tuple = (-1.0, -1.0, -1.0)
    bounds_max: tuple = (1.0, 1.0, 1.0)
    levels: tuple = ((16, 16, 16), (32, 32, 32), (64, 64, 64))
    features_per_level: int = 4
    d_tr: float = 0.10
    n_rays: int = 1024
    m_coarse: int = 32
    m_fine: int = 21
    d_s: float = 0.25
    lambda_rgb: float = 5.0
    lambda_depth: float = 0.1
    lambda_sdf: float = 1000.0
    lambda_fs: float = 10.0
    lambda_smooth: float = 0.001
    near: float = 0.05

    def __post_init__(self):
        if any(r < 2 for lvl in self.levels for r in lvl):
            raise ValueError("grid resolutions must be >= 2")
        if self.d_tr <= 0 or self.n_rays < 1 or self.m_coarse < 1 or self.m_fine < 1:
            raise ValueError("invalid field configuration")
        for lam in (self.lambda_rgb, self.lambda_depth, self.lambda_sdf,
                    self.lambda_fs, self.lambda_smooth):
            if lam < 0:
                raise ValueError("loss weights must be non-negative")
        if not np.all(np.asarray(self.bounds_max) > np.asarray(self.bounds_min)):
            raise ValueError("bounds_max must exceed bounds_min")

    @property
    def bmin(self) -> np.ndarray:
        return np.asarray(self.bounds_min, dtype=np.float64)

    @property
    def bmax(self) -> np.ndarray:
        return np.asarray(self.bounds_max, dtype=np.float64)

    @property
    def far(self) -> float:
        return float(np.linalg.norm(self.bmax - self.bmin))

    @property
    def beta(self) -> float:
        return self.d_tr / 4.0

    @property
    def feat_dim(self) -> int:
        return len(self.levels) * self.features_per_level

    def finest_cell(self) -> float:
        res = np.asarray(self.levels[-1], dtype=np.float64)
        return float(np.min((self.bmax - self.bmin) / (res - 1)))


def bounds_from_cloud(points: np.ndarray, margin: float = 1.0) -> tuple:
    lo = points.min(axis=0) - margin
    hi = points.max(axis=0) + margin
    return tuple(lo), tuple(hi)


class NeuralField:
    """Feature grids plus decoder heads, parameters in one ParamStore.

    Grid features carry lr_scale 10 so a single optimizer step trains grids
    ten times faster than decoder weights.
    """

    def __init__(self, cfg: FieldConfig, seed: int = 0):
        self.cfg = cfg
        store = ParamStore()
        rng = np.random.default_rng(seed)
        f = cfg.features_per_level
        for i, res in enumerate(cfg.levels):
            n = int(np.prod(res))
            store.alloc(f"grid{i}", (n, f), rng.normal(0.0, 0.01, size=(n, f)), lr_scale=10.0)
        dims = [
            ("gw0", (cfg.feat_dim, GEOM_HIDDEN)),
            ("gb0", (GEOM_HIDDEN,)),
            ("gw1", (GEOM_HIDDEN, LATENT_DIM + 1)),
            ("gb1", (LATENT_DIM + 1,)),
            ("cw0", (LATENT_DIM + 6 * len(_FREQS), COLOR_HIDDEN)),
            ("cb0", (COLOR_HIDDEN,)),
            ("cw1", (COLOR_HIDDEN, 3)),
            ("cb1", (3,)),
        ]
        for name, shape in dims:
            init = (
                rng.normal(0.0, np.sqrt(2.0 / shape[0]), size=shape)
                if len(shape) == 2
                else np.zeros(shape)
            )
            store.alloc(name, shape, init)
        self.store = store

    # --- graph builders ------------------------------------------------------

    def interp_features(self, tape: Tape, positions: Tensor) -> Tensor:
        """Concatenated trilinear features of all levels at world positions."""
        cfg = self.cfg
        parts = [
            tape.trilinear(tape.leaf(self.store, f"grid{i}"), positions, res, cfg.bmin, cfg.bmax)
            for i, res in enumerate(cfg.levels)
        ]
        return tape.concat(parts, axis=1)

    def decode(self, tape: Tape, positions: Tensor, view_dirs: Tensor, train: bool = True,
               samples_per_ray: int = 1):
        """(color, sdf) tensors at world positions with unit view directions.

        With train=False the field parameters enter as constants, so the
        backward pass only propagates to positions/view directions (pose
        optimization against a frozen field). With samples_per_ray > 1,
        view_dirs carries one row per ray, shared by its samples.
        """
        out = _fused_decode(tape, self, positions, view_dirs, train, samples_per_ray)
        pick_c = np.zeros((4, 3))
        pick_c[:3, :] = np.eye(3)
        pick_s = np.zeros((4, 1))
        pick_s[3, 0] = 1.0
        return tape.matmul(out, tape.const(pick_c)), tape.matmul(out, tape.const(pick_s))

    def decode_composite(self, tape: Tape, positions: Tensor, view_dirs: Tensor):
        """Reference decode built from generic tape primitives (used to
        cross-check the fused op)."""
        feats = self.interp_features(tape, positions)
        g = tape.relu(
            tape.add(
                tape.matmul(feats, tape.leaf(self.store, "gw0")),
                tape.reshape(tape.leaf(self.store, "gb0"), (1, -1)),
            )
        )
        g2 = tape.add(
            tape.matmul(g, tape.leaf(self.store, "gw1")),
            tape.reshape(tape.leaf(self.store, "gb1"), (1, -1)),
        )
        pick_s = np.zeros((LATENT_DIM + 1, 1))
        pick_s[0, 0] = 1.0
        pick_h = np.zeros((LATENT_DIM + 1, LATENT_DIM))
        pick_h[1:, :] = np.eye(LATENT_DIM)
        sdf = tape.tanh(tape.matmul(g2, tape.const(pick_s)))
        latent = tape.matmul(g2, tape.const(pick_h))

        scaled = tape.concat([tape.mul(view_dirs, tape.const(f)) for f in _FREQS], axis=1)
        cin = tape.concat([latent, tape.sin(scaled), tape.cos(scaled)], axis=1)
        c = tape.relu(
            tape.add(
                tape.matmul(cin, tape.leaf(self.store, "cw0")),
                tape.reshape(tape.leaf(self.store, "cb0"), (1, -1)),
            )
        )
        color = tape.sigmoid(
            tape.add(
                tape.matmul(c, tape.leaf(self.store, "cw1")),
                tape.reshape(tape.leaf(self.store, "cb1"), (1, -1)),
            )
        )
        return color, sdf


_PARAM_NAMES = ("gw0", "gb0", "gw1", "gb1", "cw0", "cb0", "cw1", "cb1")


_EMPTY_POS_GRAD = np.zeros((0, 3))
_EMPTY_GRID_GRAD = np.zeros((0, 4))


def _fused_decode(
    tape: Tape, field: NeuralField, positions, view_dirs, train: bool,
    samples_per_ray: int = 1,
) -> Tensor:
    """Grids + decoder heads as one tape node: output (M,4) = [rgb | sdf].

    The hand-written backward fills gradients for the field parameters (when
    train=True) and for positions/view directions when those are tensors
    that require gradients. When samples_per_ray > 1, `view_dirs` holds one
    row per ray and the direction branch (encoding and its backward) runs at
    per-ray cost.
    """
    cfg = field.cfg
    store = field.store
    pos_t = positions if isinstance(positions, Tensor) else tape.const(positions)
    dir_t = view_dirs if isinstance(view_dirs, Tensor) else tape.const(view_dirs)
    pos = pos_t.data
    dirs = dir_t.data
    m = len(pos)
    spr = samples_per_ray
    n_rays = len(dirs)
    if n_rays * spr != m:
        raise ValueError("view_dirs rows times samples_per_ray must equal positions rows")
    fpl = cfg.features_per_level
    n_levels = len(cfg.levels)
    bmin, bmax = cfg.bmin, cfg.bmax

    leaves = {}
    params = {}
    names = [f"grid{i}" for i in range(n_levels)] + list(_PARAM_NAMES)
    for nm in names:
        if train:
            leaves[nm] = tape.leaf(store, nm)
            params[nm] = leaves[nm].data
        else:
            params[nm] = store.get(nm)

    scales = []
    feats = np.empty((m, n_levels * fpl))
    for i, res in enumerate(cfg.levels):
        res_a = np.asarray(res, dtype=np.int64)
        scale = (res_a - 1) / (bmax - bmin)
        scales.append(scale)
        trilinear_fwd(
            params[f"grid{i}"], pos, bmin, scale, res[0], res[1], res[2],
            feats[:, i * fpl : (i + 1) * fpl],
        )

    h0 = np.maximum(feats @ params["gw0"] + params["gb0"], 0.0)
    g2 = h0 @ params["gw1"] + params["gb1"]
    s = np.tanh(g2[:, :1])
    latent = g2[:, 1:]

    # direction branch at per-ray cost: cin @ cw0 = latent @ A + repeat(enc @ B)
    freqs = np.asarray(_FREQS)
    ang = (dirs[:, None, :] * freqs[None, :, None]).reshape(n_rays, -1)
    sin_e = np.sin(ang)
    cos_e = np.cos(ang)
    a_w = params["cw0"][:LATENT_DIM]
    b_w = params["cw0"][LATENT_DIM:]
    enc = np.concatenate([sin_e, cos_e], axis=1)  # (n_rays, 24)
    enc_b = enc @ b_w + params["cb0"]  # bias folded into the per-ray part
    pre1 = latent @ a_w
    pre1 += np.repeat(enc_b, spr, axis=0) if spr > 1 else enc_b
    h1 = np.maximum(pre1, 0.0)
    color = 1.0 / (1.0 + np.exp(-(h1 @ params["cw1"] + params["cb1"])))
    out_data = np.concatenate([color, s], axis=1)

    parents = [pos_t, dir_t] + list(leaves.values())

    def bw(g):
        gc = g[:, :3]
        gs = g[:, 3:4]
        d_c1 = gc * (color * (1.0 - color))
        if train:
            leaves["cw1"]._accum(h1.T @ d_c1)
            leaves["cb1"]._accum(d_c1.sum(axis=0))
        d_h1 = d_c1 @ params["cw1"].T
        d_h1 *= h1 > 0.0
        d_h1_ray = d_h1.reshape(n_rays, spr, -1).sum(axis=1) if spr > 1 else d_h1
        if train:
            leaves["cw0"]._accum(
                np.concatenate([latent.T @ d_h1, enc.T @ d_h1_ray], axis=0)
            )
            leaves["cb0"]._accum(d_h1.sum(axis=0))
        d_latent = d_h1 @ a_w.T
        if dir_t.requires_grad:
            d_enc = d_h1_ray @ b_w.T
            nf = 3 * len(_FREQS)
            d_ang = d_enc[:, :nf] * cos_e - d_enc[:, nf:] * sin_e
            d_dirs = (d_ang.reshape(n_rays, len(_FREQS), 3) * freqs[None, :, None]).sum(axis=1)
            dir_t._accum(d_dirs)

        d_g2 = np.concatenate([gs * (1.0 - s * s), d_latent], axis=1)
        if train:
            leaves["gw1"]._accum(h0.T @ d_g2)
            leaves["gb1"]._accum(d_g2.sum(axis=0))
        d_h0 = d_g2 @ params["gw1"].T
        d_h0 *= h0 > 0.0
        if train:
            leaves["gw0"]._accum(feats.T @ d_h0)
            leaves["gb0"]._accum(d_h0.sum(axis=0))
        d_feats = d_h0 @ params["gw0"].T

        need_pos = pos_t.requires_grad
        gpos = np.zeros((m, 3)) if need_pos else _EMPTY_POS_GRAD
        for i, res in enumerate(cfg.levels):
            d_fl = np.ascontiguousarray(d_feats[:, i * fpl : (i + 1) * fpl])
            grid = params[f"grid{i}"]
            gg = np.zeros_like(grid) if train else _EMPTY_GRID_GRAD
            trilinear_bwd(
                grid, pos, bmin, scales[i], res[0], res[1], res[2],
                d_fl, train, need_pos, gg, gpos,
            )
            if train:
                leaves[f"grid{i}"]._accum(gg)
        if need_pos:
            pos_t._accum(gpos)

    return tape.custom(out_data, parents, bw, "field_decode")


def clamp_to_bounds(cfg: FieldConfig, positions: np.ndarray):
    clamped = np.clip(positions, cfg.bmin, cfg.bmax)
    flag = np.any(clamped != positions, axis=1)
    return clamped, flag


def evaluate(field: NeuralField, positions: np.ndarray, view_dirs: np.ndarray):
    """Colors in [0,1] and truncation-unit SDF in [-1,1] at given points.

    Out-of-bounds positions are clamped to the boundary and flagged.
    """
    if not np.all(np.isfinite(field.store.values)):
        raise ValueError("field parameters must be finite")
    pos, flag = clamp_to_bounds(field.cfg, np.asarray(positions, dtype=np.float64))
    tape = Tape()
    color, sdf = field.decode(tape, tape.const(pos), tape.const(view_dirs), train=False)
    return color.data, sdf.data[:, 0], flag


# ---------------------------------------------------------------------------
# Ray batches


@dataclass(frozen=True)
class RayBatch:
    """Rays of one frame: geometry, ground truth, and sorted sample depths.

    `cam_dirs` are pixel rays with unit z so that the sample parameter zs is
    the optical-axis depth; `dirs` are the unit world directions.
    """

    pixels: np.ndarray  # (N, 2) integer (v, u)
    cam_dirs: np.ndarray  # (N, 3), z = 1
    origins: np.ndarray  # (N, 3) world
    dirs: np.ndarray  # (N, 3) world, unit norm
    gt_rgb: np.ndarray  # (N, 3)
    gt_depth: np.ndarray  # (N,)
    valid_depth: np.ndarray  # (N,) bool
    zs: np.ndarray  # (N, S) sorted sample depths
    c2w: Pose
    with_replacement: bool = False

    @property
    def n_rays(self) -> int:
        return len(self.cam_dirs)

    def sample_positions(self) -> np.ndarray:
        """World positions of every sample, flattened to (N*S, 3)."""
        world_z1 = self.cam_dirs @ self.c2w.rotation.T
        pos = self.origins[:, None, :] + self.zs[:, :, None] * world_z1[:, None, :]
        return pos.reshape(-1, 3)

    def sample_cam_points(self) -> np.ndarray:
        """Camera-frame positions of every sample, flattened to (N*S, 3)."""
        return (self.cam_dirs[:, None, :] * self.zs[:, :, None]).reshape(-1, 3)

    def sample_view_dirs(self) -> np.ndarray:
        s = self.zs.shape[1]
        return np.repeat(self.dirs, s, axis=0)


def sample_rays(frame: Frame, c2w: Pose, cfg: FieldConfig, seed) -> RayBatch:
    """N_t valid-depth pixels, coarse uniform plus evenly spaced depth-guided
    samples per ray, merged and sorted.

    Falls back to sampling pixels with replacement (flagged) when the frame
    has fewer than N_t valid pixels.
    """
    rng = np.random.default_rng(seed)
    K = frame.intrinsics
    valid = frame.valid_mask()
    vs, us = np.nonzero(valid)
    if len(vs) == 0:
        raise ValueError("frame has no valid-depth pixels")
    replacement = len(vs) < cfg.n_rays
    pick = rng.choice(len(vs), size=cfg.n_rays, replace=replacement)
    v, u = vs[pick], us[pick]

    cam_dirs = np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones(len(u))], axis=1)
    world_z1 = cam_dirs @ c2w.rotation.T
    dirs = world_z1 / np.linalg.norm(world_z1, axis=1, keepdims=True)
    origins = np.broadcast_to(c2w.translation, (len(u), 3)).copy()
    d = frame.depth[v, u]

    z_coarse = rng.uniform(cfg.near, cfg.far, size=(cfg.n_rays, cfg.m_coarse))
    lo = np.maximum(cfg.near, d - cfg.d_s)
    hi = d + cfg.d_s
    steps = np.linspace(0.0, 1.0, cfg.m_fine)
    z_fine = lo[:, None] + steps[None, :] * (hi - lo)[:, None]
    zs = np.sort(np.concatenate([z_coarse, z_fine], axis=1), axis=1)

    return RayBatch(
        pixels=np.stack([v, u], axis=1),
        cam_dirs=cam_dirs,
        origins=origins,
        dirs=dirs,
        gt_rgb=frame.rgb[v, u],
        gt_depth=d,
        valid_depth=valid[v, u],
        zs=zs,
        c2w=c2w,
        with_replacement=replacement,
    )


# ---------------------------------------------------------------------------
# Rendering and losses


def _render_weights_np(sdf: np.ndarray, beta: float):
    sig = 1.0 / (1.0 + np.exp(-sdf / beta))
    return sig * (1.0 - sig)


def render(batch: RayBatch, field: NeuralField):
    """Per-ray color and depth; rays whose weights all vanish are flagged off.

    Returns (colors (N,3), depths (N,), valid (N,) bool).
    """
    n, s = batch.zs.shape
    pos, _ = clamp_to_bounds(field.cfg, batch.sample_positions())
    tape = Tape()
    color_t, sdf_t = field.decode(
        tape, tape.const(pos), tape.const(batch.dirs), train=False, samples_per_ray=s
    )
    colors, sdf = color_t.data, sdf_t.data[:, 0]
    w = _render_weights_np(sdf.reshape(n, s), field.cfg.beta)
    wsum = w.sum(axis=1)
    valid = wsum > 1e-8
    wn = w / np.where(valid, wsum, 1.0)[:, None]
    c = (wn[:, :, None] * colors.reshape(n, s, 3)).sum(axis=1)
    d = (wn * batch.zs).sum(axis=1)
    return c, d, valid


def sample_supervision_masks(gt_depth: np.ndarray, valid_depth: np.ndarray,
                             zs: np.ndarray, d_tr: float):
    """Constant per-sample masks and SDF targets for the loss terms."""
    d = gt_depth[:, None]
    vd = valid_depth[:, None]
    band = vd & (np.abs(d - zs) < d_tr)
    behind = vd & (zs - d >= d_tr)
    front = vd & (d - zs >= d_tr)
    sdf_mask = band | behind
    fs_mask = front | (~vd & np.ones_like(zs, dtype=bool))
    target = np.clip((d - zs) / d_tr, -1.0, 1.0)
    return sdf_mask, fs_mask, target


def _loss_weights(batch: RayBatch, cfg: FieldConfig):
    """Constant per-ray/per-sample weights implementing the masked means."""
    sdf_mask, fs_mask, target = sample_supervision_masks(
        batch.gt_depth, batch.valid_depth, batch.zs, cfg.d_tr
    )

    def norm(mask):
        counts = mask.sum(axis=1)
        rows = counts > 0
        weight = np.zeros(mask.shape)
        if rows.any():
            weight[rows] = mask[rows] / counts[rows, None] / int(rows.sum())
        return weight

    return norm(sdf_mask), norm(fs_mask), target


def _render_losses_op(tape: Tape, colors: Tensor, sdf: Tensor, batch: RayBatch,
                      cfg: FieldConfig) -> Tensor:
    """Rendering plus the four ray losses as one node.

    Output is the vector [L_rgb, L_depth, L_sdf, L_fs, lambda-weighted sum];
    rays whose rendering weights all vanish are excluded from the rgb/depth
    means.
    """
    n, s_cnt = batch.zs.shape
    beta = cfg.beta
    s2d = sdf.data.reshape(n, s_cnt)
    p = 1.0 / (1.0 + np.exp(-s2d / beta))
    w = p * (1.0 - p)
    wsum = w.sum(axis=1)
    ray_valid = wsum > 1e-8
    denom = (wsum + (~ray_valid))[:, None]
    wn = w / denom

    c3 = colors.data.reshape(n, s_cnt, 3)
    c_ray = np.einsum("nsk,ns->nk", c3, wn)
    d_ray = (wn * batch.zs).sum(axis=1)

    rgb_w = ray_valid.astype(np.float64) / max(int(ray_valid.sum()), 1)
    c_err = c_ray - batch.gt_rgb
    l_rgb = float((rgb_w * (c_err * c_err).sum(axis=1)).sum())

    dep_rays = ray_valid & batch.valid_depth
    dep_w = dep_rays.astype(np.float64) / max(int(dep_rays.sum()), 1)
    d_err = d_ray - batch.gt_depth
    l_depth = float((dep_w * d_err * d_err).sum())

    sdf_w, fs_w, target = _loss_weights(batch, cfg)
    s_err = s2d - target
    f_err = s2d - 1.0
    l_sdf = float((sdf_w * s_err * s_err).sum())
    l_fs = float((fs_w * f_err * f_err).sum())

    total = (
        cfg.lambda_rgb * l_rgb
        + cfg.lambda_depth * l_depth
        + cfg.lambda_sdf * l_sdf
        + cfg.lambda_fs * l_fs
    )
    out = np.array([l_rgb, l_depth, l_sdf, l_fs, total])

    def bw(g):
        ge_rgb = g[0] + cfg.lambda_rgb * g[4]
        ge_depth = g[1] + cfg.lambda_depth * g[4]
        ge_sdf = g[2] + cfg.lambda_sdf * g[4]
        ge_fs = g[3] + cfg.lambda_fs * g[4]

        d_c_ray = (2.0 * ge_rgb) * (rgb_w[:, None] * c_err)  # (n,3)
        d_d_ray = (2.0 * ge_depth) * (dep_w * d_err)  # (n,)
        if colors.requires_grad:
            colors._accum((wn[:, :, None] * d_c_ray[:, None, :]).reshape(-1, 3))
        if sdf.requires_grad:
            d_wn = np.einsum("nk,nsk->ns", d_c_ray, c3) + d_d_ray[:, None] * batch.zs
            d_w = (d_wn - (d_wn * wn).sum(axis=1, keepdims=True)) / denom
            d_s = d_w * ((1.0 - 2.0 * p) * w / beta)
            d_s += (2.0 * ge_sdf) * (sdf_w * s_err)
            d_s += (2.0 * ge_fs) * (fs_w * f_err)
            sdf._accum(d_s.reshape(-1, 1))

    return tape.custom(out, [colors, sdf], bw, "render_losses")


_PICKS = [np.eye(5)[:, i : i + 1] for i in range(5)]


def build_losses(
    tape: Tape,
    field: NeuralField,
    batch: RayBatch,
    positions: Tensor,
    view_dirs: Tensor,
    include_smooth: bool = False,
    smooth_rng=None,
    train_field: bool = True,
):
    """Loss tensors for one ray batch; positions/view_dirs may carry pose grads.

    `positions` has one row per sample, `view_dirs` one row per ray. Returns
    a dict with rgb, depth, sdf, fs, (smooth,) and the weighted total.
    train_field=False freezes the field (tracking): gradients then only flow
    into the pose-bearing positions/view directions.
    """
    cfg = field.cfg
    n, s = batch.zs.shape
    colors, sdf = field.decode(tape, positions, view_dirs, train=train_field,
                               samples_per_ray=s)
    vec = _render_losses_op(tape, colors, sdf, batch, cfg)
    losses = {
        "rgb": tape.matmul(tape.reshape(vec, (1, 5)), tape.const(_PICKS[0])),
        "depth": tape.matmul(tape.reshape(vec, (1, 5)), tape.const(_PICKS[1])),
        "sdf": tape.matmul(tape.reshape(vec, (1, 5)), tape.const(_PICKS[2])),
        "fs": tape.matmul(tape.reshape(vec, (1, 5)), tape.const(_PICKS[3])),
    }
    total = tape.matmul(tape.reshape(vec, (1, 5)), tape.const(_PICKS[4]))
    if include_smooth:
        losses["smooth"] = smoothness_loss(tape, field, smooth_rng)
        total = tape.add(
            tape.reshape(total, ()), tape.mul(losses["smooth"], tape.const(cfg.lambda_smooth))
        )
    losses["total"] = tape.reshape(total, ()) if total.data.size == 1 else total
    return losses


def smoothness_loss(tape: Tape, field: NeuralField, rng) -> Tensor:
    """Mean squared feature difference over a random 8^3 probe, eps = one cell."""
    cfg = field.cfg
    eps = cfg.finest_cell()
    if rng is None:
        rng = np.random.default_rng(0)
    span = cfg.bmax - cfg.bmin - 8 * eps
    origin = cfg.bmin + rng.uniform(0.0, 1.0, size=3) * np.maximum(span, 0.0)
    axes = [origin[a] + eps * np.arange(8) for a in range(3)]
    base = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    f0 = field.interp_features(tape, tape.const(base))
    acc = None
    for a in range(3):
        shifted = base.copy()
        shifted[:, a] += eps
        fa = field.interp_features(tape, tape.const(shifted))
        term = tape.sum(tape.square(tape.sub(fa, f0)), axis=1)
        acc = term if acc is None else tape.add(acc, term)
    return tape.mean(acc)


def field_losses(batch: RayBatch, field: NeuralField, cfg: FieldConfig | None = None,
                 include_smooth: bool = True, smooth_seed: int = 0):
    """Loss values (floats) for a batch at the batch's own pose."""
    if cfg is not None and cfg is not field.cfg:
        field = NeuralFieldView(field, cfg)
    tape = Tape()
    pos, _ = clamp_to_bounds(field.cfg, batch.sample_positions())
    out = build_losses(
        tape,
        field,
        batch,
        tape.const(pos),
        tape.const(batch.dirs),
        include_smooth=include_smooth,
        smooth_rng=np.random.default_rng(smooth_seed),
    )
    return {k: float(v.data) for k, v in out.items()}


class NeuralFieldView:
    """A field with an overridden config (shared parameters)."""

    def __init__(self, base: NeuralField, cfg: FieldConfig):
        self.cfg = cfg
        self.store = base.store
        self.interp_features = base.__class__.interp_features.__get__(self)
        self.decode = base.__class__.decode.__get__(self)


# ---------------------------------------------------------------------------
# Checkpoints


def save_field(field: NeuralField, path) -> None:
    cfg = field.cfg
    meta = {
        "bounds_min": list(cfg.bounds_min),
        "bounds_max": list(cfg.bounds_max),
        "levels": [list(l) for l in cfg.levels],
        "features_per_level": cfg.features_per_level,
        "d_tr": cfg.d_tr,
        "n_rays": cfg.n_rays,
        "m_coarse": cfg.m_coarse,
        "m_fine": cfg.m_fine,
        "d_s": cfg.d_s,
        "lambda_rgb": cfg.lambda_rgb,
        "lambda_depth": cfg.lambda_depth,
        "lambda_sdf": cfg.lambda_sdf,
        "lambda_fs": cfg.lambda_fs,
        "lambda_smooth": cfg.lambda_smooth,
        "near": cfg.near,
    }
    blob = json.dumps(meta).encode()
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<II", FIELD_VERSION, len(blob)))
        fh.write(blob)
        fh.write(field.store.values.astype("<f4").tobytes())


def load_field(path) -> NeuralField:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != FIELD_MAGIC:
        raise ValueError(f"bad field magic {raw[:4]!r}, expected {FIELD_MAGIC!r}")
    version, blob_len = struct.unpack_from("<II", raw, 4)
    if version != FIELD_VERSION:
        raise ValueError(f"unsupported field version {version}")
    meta = json.loads(raw[12 : 12 + blob_len].decode())
    cfg = FieldConfig(
        bounds_min=tuple(meta["bounds_min"]),
        bounds_max=tuple(meta["bounds_max"]),
        levels=tuple(tuple(l) for l in meta["levels"]),
        features_per_level=meta["features_per_level"],
        d_tr=meta["d_tr"],
        n_rays=meta["n_rays"],
        m_coarse=meta["m_coarse"],
        m_fine=meta["m_fine"],
        d_s=meta["d_s"],
        lambda_rgb=meta["lambda_rgb"],
        lambda_depth=meta["lambda_depth"],
        lambda_sdf=meta["lambda_sdf"],
        lambda_fs=meta["lambda_fs"],
        lambda_smooth=meta["lambda_smooth"],
        near=meta["near"],
    )
    field = NeuralField(cfg, seed=0)
    params = np.frombuffer(raw, dtype="<f4", offset=12 + blob_len).astype(np.float64)
    if len(params) != field.store.size:
        raise ValueError("field checkpoint parameter count mismatch")
    field.store.values[:] = params
    return field
