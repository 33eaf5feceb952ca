"""Per-point descriptors, a small learned feature embedding, and matching.

The embedding replaces a heavy two-branch backbone at desk scale: raw 10-d
per-point descriptors (color, normal, local shape statistics) are mapped by a
10->64->64->32 fully connected net onto the unit hypersphere, and matching is
nearest-neighbor in that feature space.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .diffengine import ParamStore, Tape, Tensor
from .geom import PointCloud

FEATURE_DIM = 32
LAYER_SIZES = (10, 64, 64, 32)

MODEL_MAGIC = b"F2MW"
MODEL_VERSION = 1


@dataclass(frozen=True)
class FeatureSet:
    """Unit-norm 32-d descriptor per point of an associated cloud."""

    features: np.ndarray

    def __post_init__(self):
        f = np.ascontiguousarray(self.features, dtype=np.float64)
        if f.ndim != 2 or f.shape[1] != FEATURE_DIM:
            raise ValueError(f"features must be Nx{FEATURE_DIM}")
        if len(f) and np.max(np.abs(np.linalg.norm(f, axis=1) - 1.0)) > 1e-6:
            raise ValueError("feature rows must be unit norm")
        f.flags.writeable = False
        object.__setattr__(self, "features", f)

    def __len__(self):
        return len(self.features)


@dataclass(frozen=True)
class Descriptors:
    """Raw per-point inputs: color(3) + normal(3) + height, planarity,
    linearity, density."""

    values: np.ndarray  # (N, 10)
    normals: np.ndarray  # (N, 3)

    def __post_init__(self):
        if not np.all(np.isfinite(self.values)):
            raise ValueError("descriptor entries must be finite")

    def __len__(self):
        return len(self.values)


@dataclass
class CorrespondenceSet:
    src_idx: np.ndarray
    tgt_idx: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.src_idx = np.asarray(self.src_idx, dtype=np.int64)
        self.tgt_idx = np.asarray(self.tgt_idx, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if not (len(self.src_idx) == len(self.tgt_idx) == len(self.weights)):
            raise ValueError("correspondence arrays must align")
        if len(self.weights) and (self.weights.min() < -1e-12 or self.weights.max() > 1 + 1e-12):
            raise ValueError("weights must lie in [0,1]")
        self.weights = np.clip(self.weights, 0.0, 1.0)

    def __len__(self):
        return len(self.src_idx)


# ---------------------------------------------------------------------------
# Descriptors


def _knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest neighbors (self included) per point."""
    n = len(points)
    out = np.empty((n, k), dtype=np.int64)
    chunk = max(1, 2_000_000 // max(n, 1))
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        dx = points[s:e, 0:1] - points[None, :, 0]
        dy = points[s:e, 1:2] - points[None, :, 1]
        dz = points[s:e, 2:3] - points[None, :, 2]
        d2 = (dx * dx + dy * dy) + dz * dz
        out[s:e] = np.argpartition(d2, k - 1, axis=1)[:, :k]
    return out


def compute_descriptors(cloud: PointCloud, k_local: int = 16) -> Descriptors:
    """Colors, covariance normals, and local shape statistics per point.

    Normals come from the smallest eigenvector of the k-neighborhood
    covariance, oriented toward the viewpoint (camera origin). Statistics:
    height of the point above the local centroid along the normal,
    planarity (l2-l3)/l1, linearity (l1-l2)/l1, and the mean neighbor
    distance as a density proxy.
    """
    if cloud.colors is None:
        raise ValueError("descriptors need point colors")
    n = len(cloud)
    if n < k_local:
        raise ValueError(f"cloud has {n} points, fewer than k_local={k_local}")
    pts = cloud.points
    idx = _knn_indices(pts, k_local)
    neigh = pts[idx]  # (N, k, 3)
    centroid = neigh.mean(axis=1)
    centered = neigh - centroid[:, None, :]
    cov = np.einsum("nki,nkj->nij", centered, centered) / k_local
    evals, evecs = np.linalg.eigh(cov)  # ascending
    normals = evecs[:, :, 0]
    # orient toward the viewpoint at the origin
    flip = np.einsum("ni,ni->n", normals, pts) > 0
    normals[flip] *= -1.0

    l1 = np.maximum(evals[:, 2], 1e-12)
    l2 = np.maximum(evals[:, 1], 0.0)
    l3 = np.maximum(evals[:, 0], 0.0)
    planarity = (l2 - l3) / l1
    linearity = (l1 - l2) / l1
    height = np.einsum("ni,ni->n", pts - centroid, normals)
    density = np.linalg.norm(neigh - pts[:, None, :], axis=2).mean(axis=1)

    values = np.concatenate(
        [cloud.colors, normals, np.stack([height, planarity, linearity, density], axis=1)],
        axis=1,
    )
    return Descriptors(values, normals)


# ---------------------------------------------------------------------------
# Feature model


class FeatureModel:
    """Three affine layers with rectified-linear activations, unit-norm output."""

    def __init__(self, store: ParamStore | None = None, seed: int = 0):
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(seed)
            for i, (fan_in, fan_out) in enumerate(zip(LAYER_SIZES[:-1], LAYER_SIZES[1:])):
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
                store.alloc(f"w{i}", (fan_in, fan_out), w)
                store.alloc(f"b{i}", (fan_out,), np.zeros(fan_out))
        self.store = store

    def forward(self, tape: Tape, x) -> "Tape.Tensor":
        """Tape forward pass; `x` is an (N,10) array or tensor."""
        h = x if isinstance(x, Tensor) else tape.const(x)
        n_layers = len(LAYER_SIZES) - 1
        for i in range(n_layers):
            w = tape.leaf(self.store, f"w{i}")
            b = tape.leaf(self.store, f"b{i}")
            h = tape.add(tape.matmul(h, w), tape.reshape(b, (1, -1)))
            if i < n_layers - 1:
                h = tape.relu(h)
        norm = tape.sqrt(tape.add(tape.sum(tape.square(h), axis=1, keepdims=True), tape.const(1e-24)))
        return tape.div(h, norm)


def extract(model: FeatureModel, descriptors: Descriptors) -> FeatureSet:
    """Deterministic forward pass of the model over raw descriptors."""
    if not np.all(np.isfinite(model.store.values)):
        raise ValueError("model parameters must be finite")
    if not np.all(np.isfinite(descriptors.values)):
        raise ValueError("descriptors must be finite")
    tape = Tape()
    out = model.forward(tape, descriptors.values)
    return FeatureSet(out.data)


# ---------------------------------------------------------------------------
# Matching


def _feature_nn(fx: np.ndarray, fy: np.ndarray):
    """Per-row nearest neighbor of fx in fy: (index, distance)."""
    ny2 = np.einsum("ij,ij->i", fy, fy)
    idx = np.empty(len(fx), dtype=np.int64)
    dist = np.empty(len(fx))
    chunk = max(1, 4_000_000 // max(len(fy), 1))
    for s in range(0, len(fx), chunk):
        e = min(s + chunk, len(fx))
        d2 = (
            np.einsum("ij,ij->i", fx[s:e], fx[s:e])[:, None]
            + ny2[None, :]
            - 2.0 * fx[s:e] @ fy.T
        )
        d2 = np.maximum(d2, 0.0)
        idx[s:e] = np.argmin(d2, axis=1)
        dist[s:e] = np.sqrt(d2[np.arange(e - s), idx[s:e]])
    return idx, dist


def mutual_match(fx: FeatureSet, fy: FeatureSet, n_c: int = 512) -> CorrespondenceSet:
    """Mutual nearest neighbors in feature space, closest n_c kept."""
    if len(fx) == 0 or len(fy) == 0:
        raise ValueError("cannot match empty feature sets")
    nn_xy, d_xy = _feature_nn(fx.features, fy.features)
    nn_yx, _ = _feature_nn(fy.features, fx.features)
    src = np.arange(len(fx))
    keep = nn_yx[nn_xy] == src
    src, tgt, dist = src[keep], nn_xy[keep], d_xy[keep]
    order = np.argsort(dist, kind="stable")[:n_c]
    return CorrespondenceSet(src[order], tgt[order], np.ones(len(order)))


def weighted_knn_match(fx: FeatureSet, fy: FeatureSet, k: int) -> CorrespondenceSet:
    """Bidirectional feature NN pairs weighted by w = 1 - d/2, top-k per side."""
    if k > len(fx) or k > len(fy):
        raise ValueError("k exceeds available points")
    nn_xy, d_xy = _feature_nn(fx.features, fy.features)
    nn_yx, d_yx = _feature_nn(fy.features, fx.features)
    w_xy = np.clip(1.0 - d_xy / 2.0, 0.0, 1.0)
    w_yx = np.clip(1.0 - d_yx / 2.0, 0.0, 1.0)
    top_x = np.argsort(-w_xy, kind="stable")[:k]
    top_y = np.argsort(-w_yx, kind="stable")[:k]
    src = np.concatenate([top_x, nn_yx[top_y]])
    tgt = np.concatenate([nn_xy[top_x], top_y])
    w = np.concatenate([w_xy[top_x], w_yx[top_y]])
    return CorrespondenceSet(src, tgt, w)


# ---------------------------------------------------------------------------
# Model file format


def save_model(model: FeatureModel, path) -> None:
    layers = list(zip(LAYER_SIZES[:-1], LAYER_SIZES[1:]))  # (rows, cols) = (in, out)
    blob = bytearray()
    blob += MODEL_MAGIC
    blob += struct.pack("<II", MODEL_VERSION, len(layers))
    for rows, cols in layers:
        blob += struct.pack("<II", rows, cols)
    for i in range(len(layers)):
        blob += model.store.get(f"w{i}").astype("<f4").tobytes()
        blob += model.store.get(f"b{i}").astype("<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(blob)


def load_model(path) -> FeatureModel:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != MODEL_MAGIC:
        raise ValueError(f"bad model magic {raw[:4]!r}, expected {MODEL_MAGIC!r}")
    version, n_layers = struct.unpack_from("<II", raw, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    off = 12
    shapes = []
    for _ in range(n_layers):
        rows, cols = struct.unpack_from("<II", raw, off)
        shapes.append((rows, cols))
        off += 8
    expect = tuple(zip(LAYER_SIZES[:-1], LAYER_SIZES[1:]))
    if tuple(shapes) != expect:
        raise ValueError(f"layer shapes {shapes} do not match {expect}")
    model = FeatureModel(seed=0)
    for i, (rows, cols) in enumerate(shapes):
        n = rows * cols
        w = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(rows, cols)
        off += 4 * n
        b = np.frombuffer(raw, dtype="<f4", count=cols, offset=off)
        off += 4 * cols
        model.store.set(f"w{i}", w.astype(np.float64))
        model.store.set(f"b{i}", b.astype(np.float64))
    return model


def model_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
