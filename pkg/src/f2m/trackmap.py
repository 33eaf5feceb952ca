"""Frame-to-model pose optimization over keyframe subsequences.

Keyframes are sampled on a fixed stride; each new keyframe gets an initial
relative pose from the matcher, is tracked against the frozen field, then
joins a batch whose poses and field parameters are optimized jointly. The
first keyframe of a subsequence (and the carry-over keyframe after every
flush) anchors the gauge: its pose is never optimized.

Keyframe poses map anchor-frame coordinates to camera coordinates, so the
matcher output composes directly: T_i = rel . T̂_{i-1}, and the emitted
supervision transform ΔT̂ = T̂_i . T̂_{i-1}^-1 maps keyframe i-1 points onto
keyframe i.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import geom, neuralfield as nf, posesolver
from .diffengine import ParamStore, Tape, adam_step, apply_delta
from .features import Descriptors, FeatureModel, FeatureSet, compute_descriptors, extract
from .geom import Frame, PointCloud, Pose
from .neuralfield import FieldConfig, NeuralField
from .posesolver import SolverConfig


@dataclass
class Keyframe:
    id: int
    frame: Frame
    cloud: PointCloud
    descriptors: Descriptors
    features: FeatureSet
    untracked: Pose | None = None
    tracked: Pose | None = None
    mapped: Pose | None = None


@dataclass(frozen=True)
class TrackMapConfig:
    """Schedule constants and optimizer rates for one subsequence."""

    subsequence_length: int = 200
    keyframe_stride: int = 20
    batch_capacity: int = 5  # non-anchor keyframes per mapping batch
    tracking_iters: int = 100
    mapping_iters: int = 50
    mapping_rays: int = 512  # rays per keyframe per mapping step
    tracking_lr: float = 1e-3
    mapping_pose_lr: float = 5e-4
    field_lr: float = 1e-3  # decoder rate; grids run 10x via lr_scale
    voxel: float = 0.025
    k_local: int = 16
    bounds_margin: float = 1.0
    solver: SolverConfig = dc_field(default_factory=SolverConfig)

    def keyframe_indices(self, length: int) -> list[int]:
        return list(range(0, length, self.keyframe_stride))


@dataclass
class SubsequenceState:
    field: NeuralField
    cfg: TrackMapConfig
    batch: list  # anchor first; at most batch_capacity + 1 keyframes
    anchor_id: int
    map_field_cfg: FieldConfig

    @property
    def anchor(self) -> Keyframe:
        return self.batch[0]


@dataclass(frozen=True)
class PairRecord:
    """Supervision record for one consecutive keyframe pair."""

    scene: str
    kf_a: int
    kf_b: int
    rel_pose: Pose  # maps kf_a camera points onto kf_b
    init_residual: float
    init_pose: Pose  # matcher relative pose before any refinement

    def to_json(self) -> str:
        return json.dumps(
            {
                "scene": self.scene,
                "kf_a": self.kf_a,
                "kf_b": self.kf_b,
                "rel_pose": [list(row) for row in self.rel_pose.matrix()],
                "residual_stats": {"init_residual": self.init_residual},
            }
        )


def prepare_keyframe(kf_id: int, frame: Frame, model: FeatureModel,
                     cfg: TrackMapConfig) -> Keyframe:
    """Voxelized camera-frame cloud, descriptors and features for one frame."""
    cloud = geom.voxel_downsample(geom.backproject(frame, stride=1), cfg.voxel)
    desc = compute_descriptors(cloud, k_local=min(cfg.k_local, max(len(cloud), 1)))
    feats = extract(model, desc)
    return Keyframe(kf_id, frame, cloud, desc, feats)


def untracked_pose(prev: Keyframe, rel: Pose) -> Pose:
    """Chain the matcher's relative pose onto the previous mapped pose."""
    if prev.mapped is None:
        raise ValueError("previous keyframe has no mapped pose")
    return geom.compose(rel, prev.mapped)


def _pose_loss(tape: Tape, field: NeuralField, batch, delta, base_pose: Pose,
               train_field: bool, include_smooth=False, smooth_rng=None):
    pos_t = tape.se3_points(delta, batch.sample_cam_points(), base_pose)
    cam_unit = batch.cam_dirs / np.linalg.norm(batch.cam_dirs, axis=1, keepdims=True)
    dir_t = tape.se3_dirs(delta, cam_unit, base_pose)
    return nf.build_losses(
        tape, field, batch, pos_t, dir_t,
        include_smooth=include_smooth, smooth_rng=smooth_rng, train_field=train_field,
    )


def _eval_pose_loss(field: NeuralField, frame: Frame, pose: Pose, fcfg, seed) -> float:
    batch = nf.sample_rays(frame, geom.invert(pose), fcfg, seed)
    vals = nf.field_losses(batch, field, include_smooth=False)
    return vals["total"]


def track(kf: Keyframe, state: SubsequenceState, iterations: int, seed: int) -> Pose:
    """Optimize the keyframe pose against the frozen field.

    Runs first-order steps on a persistent tangent increment with a fresh
    ray batch per iteration, keeps the best-loss iterate, and falls back to
    the untracked pose unless the candidate also wins on a held-out ray set.
    """
    if kf.untracked is None:
        raise ValueError("keyframe has no untracked pose")
    if iterations == 0:
        return kf.untracked
    fcfg = state.field.cfg
    base = kf.untracked
    seeds = np.random.SeedSequence([seed, kf.id]).spawn(iterations + 1)
    store = ParamStore()
    store.alloc("delta", (6,), np.zeros(6))

    best_delta = np.zeros(6)
    best_loss = np.inf
    for it in range(iterations):
        batch = nf.sample_rays(kf.frame, geom.invert(base), fcfg, seeds[it])
        tape = Tape(check_finite=False)
        delta = tape.leaf(store, "delta")
        losses = _pose_loss(tape, state.field, batch, delta, base, train_field=False)
        loss = float(losses["total"].data)
        if np.isfinite(loss) and loss < best_loss:
            best_loss = loss
            best_delta = store.get("delta").copy()
        store.zero_grads()
        tape.backward(losses["total"])
        adam_step(store, lr=state.cfg.tracking_lr)

    candidate = apply_delta(best_delta, base)
    eval_seed = seeds[iterations]
    eval_batch = nf.sample_rays(kf.frame, geom.invert(base), fcfg, eval_seed)
    _, _, valid = nf.render(eval_batch, state.field)
    if not valid.any():
        warnings.warn(f"keyframe {kf.id}: all rays flagged during tracking")
        return base
    loss_unt = _eval_pose_loss(state.field, kf.frame, base, fcfg, eval_seed)
    loss_cand = _eval_pose_loss(state.field, kf.frame, candidate, fcfg, eval_seed)
    return candidate if loss_cand <= loss_unt else base


def map_insert(kf: Keyframe | None, state: SubsequenceState, iterations: int,
               seed: int) -> None:
    """Append a tracked keyframe and jointly optimize field and batch poses.

    The anchor pose stays fixed; after the optimization every batch
    keyframe's current pose becomes its mapped pose.
    """
    if kf is not None:
        if kf.tracked is None:
            raise ValueError("keyframe must be tracked before mapping")
        kf.mapped = kf.tracked
        state.batch.append(kf)
    cfg = state.cfg
    fcfg = state.map_field_cfg
    movable = state.batch[1:]
    bases = {k.id: k.mapped for k in movable}

    pose_store = ParamStore()
    for k in movable:
        pose_store.alloc(f"delta{k.id}", (6,), np.zeros(6))

    seeds = np.random.SeedSequence([seed, len(state.batch)]).spawn(iterations)
    n_kf = len(state.batch)
    for it in range(iterations):
        kf_seeds = np.random.SeedSequence(seeds[it]).spawn(n_kf + 1)
        tape = Tape(check_finite=False)
        total = None
        for j, k in enumerate(state.batch):
            pose_now = (
                k.mapped if k.id == state.anchor_id
                else apply_delta(pose_store.get(f"delta{k.id}"), bases[k.id])
            )
            batch = nf.sample_rays(k.frame, geom.invert(pose_now), fcfg, kf_seeds[j])
            if k.id == state.anchor_id:
                pos, _ = nf.clamp_to_bounds(fcfg, batch.sample_positions())
                losses = nf.build_losses(
                    tape, state.field, batch, tape.const(pos), tape.const(batch.dirs)
                )
            else:
                delta = tape.leaf(pose_store, f"delta{k.id}")
                losses = _pose_loss(tape, state.field, batch, delta, bases[k.id],
                                    train_field=True)
            term = tape.mul(losses["total"], tape.const(1.0 / n_kf))
            total = term if total is None else tape.add(total, term)
        smooth = nf.smoothness_loss(tape, state.field, np.random.default_rng(kf_seeds[n_kf]))
        total = tape.add(total, tape.mul(smooth, tape.const(fcfg.lambda_smooth)))
        state.field.store.zero_grads()
        pose_store.zero_grads()
        tape.backward(total)
        adam_step(state.field.store, lr=cfg.field_lr)
        if movable:
            adam_step(pose_store, lr=cfg.mapping_pose_lr)

    for k in movable:
        k.mapped = apply_delta(pose_store.get(f"delta{k.id}"), bases[k.id])


def flush_batch(state: SubsequenceState):
    """Empty the batch except its last keyframe, which anchors what follows.

    Returns the full flushed batch (for supervision pairing); the retained
    keyframe's pose is fixed from here on.
    """
    flushed = list(state.batch)
    last = state.batch[-1]
    state.batch = [last]
    state.anchor_id = last.id
    return flushed


def _pairs_from(group, scene_id, init_info) -> list[PairRecord]:
    out = []
    for a, b in zip(group[:-1], group[1:]):
        rel = geom.compose(b.mapped, geom.invert(a.mapped))
        init_pose, init_res = init_info.get(b.id, (rel, 0.0))
        out.append(PairRecord(scene_id, a.id, b.id, rel, init_res, init_pose))
    return out


def run_subsequence(
    frames: list[Frame],
    model: FeatureModel,
    cfg: TrackMapConfig = TrackMapConfig(),
    master_seed: int = 0,
    scene_id: str = "scene",
    field_cfg: FieldConfig | None = None,
    pose_log=None,
) -> list[PairRecord]:
    """Full tracking/mapping pass over one subsequence of frames.

    Returns supervision records with the relative mapped pose of every
    consecutive keyframe pair; the first keyframe defines the gauge.
    """
    kf_ids = cfg.keyframe_indices(len(frames))
    if len(kf_ids) < 2:
        raise ValueError("need at least two keyframes")
    seeds = np.random.SeedSequence(master_seed).spawn(len(kf_ids) * 3 + 1)

    anchor = prepare_keyframe(kf_ids[0], frames[kf_ids[0]], model, cfg)
    anchor.untracked = anchor.tracked = anchor.mapped = Pose.identity()
    if field_cfg is None:
        bmin, bmax = nf.bounds_from_cloud(anchor.cloud.points, margin=cfg.bounds_margin)
        field_cfg = FieldConfig(bounds_min=bmin, bounds_max=bmax)
    field = NeuralField(field_cfg, seed=master_seed)
    state = SubsequenceState(
        field=field,
        cfg=cfg,
        batch=[],
        anchor_id=anchor.id,
        map_field_cfg=dataclasses.replace(field_cfg, n_rays=cfg.mapping_rays),
    )
    state.batch = [anchor]
    map_insert(None, state, cfg.mapping_iters, int(seeds[0].generate_state(1)[0]))

    records: list[PairRecord] = []
    init_info: dict[int, tuple[Pose, float]] = {}
    prev = anchor
    for n, kf_id in enumerate(kf_ids[1:], start=1):
        kf = prepare_keyframe(kf_id, frames[kf_id], model, cfg)
        try:
            hyp = posesolver.estimate_initial_pose(
                prev.features, kf.features, prev.cloud, kf.cloud, cfg.solver,
                seed=int(seeds[3 * n - 2].generate_state(1)[0]),
            )
        except posesolver.DegenerateConfigurationError:
            warnings.warn(f"{scene_id}: initial pose degenerate at keyframe {kf_id}, skipped")
            continue
        init_info[kf.id] = (hyp.pose, hyp.residual)
        kf.untracked = untracked_pose(prev, hyp.pose)
        kf.tracked = track(kf, state, cfg.tracking_iters,
                           int(seeds[3 * n - 1].generate_state(1)[0]))
        map_insert(kf, state, cfg.mapping_iters, int(seeds[3 * n].generate_state(1)[0]))
        prev = kf
        if len(state.batch) == cfg.batch_capacity + 1:
            records.extend(_pairs_from(flush_batch(state), scene_id, init_info))
    if len(state.batch) > 1:
        records.extend(_pairs_from(flush_batch(state), scene_id, init_info))

    if pose_log is not None:
        with open(pose_log, "a") as fh:
            for rec in records:
                fh.write(rec.to_json() + "\n")
    return records
