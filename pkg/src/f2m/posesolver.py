"""Initial relative-pose estimation from weighted correspondences.

Hypotheses come from weighted closed-form alignment (Kabsch) on random
correspondence subsets; the returned hypothesis minimizes the weighted sum of
unsquared residual norms over the full correspondence set. Scoring and
fitting intentionally differ: the closed form minimizes squared error, the
selection criterion is the unsquared sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import CorrespondenceSet, FeatureSet, weighted_knn_match
from .geom import PointCloud, Pose

DEGENERACY_RATIO = 1e-9
SUBSET_RETRIES = 10


class DegenerateConfigurationError(ValueError):
    """Correspondences span a (near) rank-deficient configuration."""


@dataclass(frozen=True)
class Hypothesis:
    pose: Pose
    residual: float

    def __post_init__(self):
        if not np.isfinite(self.residual) or self.residual < 0:
            raise ValueError("residual must be finite and non-negative")


@dataclass(frozen=True)
class SolverConfig:
    k: int = 256  # top pairs per side
    t: int = 10  # number of subsets
    r: float = 0.20  # subset fraction of the 2k pairs

    def __post_init__(self):
        if self.k < 3 or self.t < 1 or not 0 < self.r <= 1:
            raise ValueError("invalid solver configuration")
        if int(np.ceil(self.r * 2 * self.k)) < 3:
            raise ValueError("subsets would have fewer than 3 pairs")

    @property
    def subset_size(self) -> int:
        return int(np.ceil(self.r * 2 * self.k))


def weighted_kabsch(pairs: CorrespondenceSet, src: PointCloud, tgt: PointCloud) -> Pose:
    """Closed-form weighted rigid alignment of src[pairs] onto tgt[pairs]."""
    if len(pairs) < 3:
        raise DegenerateConfigurationError("need at least 3 correspondences")
    w = pairs.weights
    wsum = w.sum()
    if wsum <= 0:
        raise DegenerateConfigurationError("total correspondence weight is zero")
    p = src.points[pairs.src_idx]
    q = tgt.points[pairs.tgt_idx]
    p_bar = (w[:, None] * p).sum(axis=0) / wsum
    q_bar = (w[:, None] * q).sum(axis=0) / wsum
    pc = p - p_bar
    qc = q - q_bar
    h = (w[:, None] * pc).T @ qc
    u, s, vt = np.linalg.svd(h)
    if s[-1] < DEGENERACY_RATIO * s[0] or s[0] == 0.0:
        raise DegenerateConfigurationError("rank-deficient weighted covariance")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = q_bar - rot @ p_bar
    return Pose(rot, t)


def residual(pose: Pose, pairs: CorrespondenceSet, src: PointCloud, tgt: PointCloud) -> float:
    """Weighted sum of unsquared Euclidean residual norms."""
    moved = pose.apply(src.points[pairs.src_idx])
    errs = np.linalg.norm(moved - tgt.points[pairs.tgt_idx], axis=1)
    return float((pairs.weights * errs).sum())


def _take(pairs: CorrespondenceSet, idx: np.ndarray) -> CorrespondenceSet:
    return CorrespondenceSet(pairs.src_idx[idx], pairs.tgt_idx[idx], pairs.weights[idx])


def estimate_initial_pose(
    fx: FeatureSet,
    fy: FeatureSet,
    src: PointCloud,
    tgt: PointCloud,
    cfg: SolverConfig = SolverConfig(),
    seed: int = 0,
) -> Hypothesis:
    """Best-of-t subset hypotheses over 2k bidirectional weighted matches."""
    k = min(cfg.k, len(fx), len(fy))
    if k < 3:
        raise DegenerateConfigurationError("too few points to match")
    pairs = weighted_knn_match(fx, fy, k)
    m = min(int(np.ceil(cfg.r * len(pairs))), len(pairs))

    best: Hypothesis | None = None
    subset_seeds = np.random.SeedSequence(seed).spawn(cfg.t)
    for j in range(cfg.t):
        rng = np.random.default_rng(subset_seeds[j])
        for _ in range(SUBSET_RETRIES):
            pick = rng.choice(len(pairs), size=m, replace=False)
            try:
                pose = weighted_kabsch(_take(pairs, pick), src, tgt)
            except DegenerateConfigurationError:
                continue
            hyp = Hypothesis(pose, residual(pose, pairs, src, tgt))
            if best is None or hyp.residual < best.residual:
                best = hyp
            break
    if best is None:
        raise DegenerateConfigurationError("all hypothesis subsets were degenerate")
    return best
