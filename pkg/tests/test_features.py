import numpy as np
import pytest
from conftest import check_store_grads

from f2m import features as ft
from f2m.diffengine import Tape
from f2m.geom import PointCloud


def make_cloud(points, rng=None):
    pts = np.asarray(points, dtype=np.float64)
    colors = (rng.random(pts.shape) if rng is not None else np.full_like(pts, 0.5))
    return PointCloud(pts, colors=np.clip(colors, 0, 1))


def random_unit_features(rng, n):
    f = rng.normal(size=(n, ft.FEATURE_DIM))
    return ft.FeatureSet(f / np.linalg.norm(f, axis=1, keepdims=True))


class TestComputeDescriptors:
    def test_requires_colors(self):
        with pytest.raises(ValueError):
            ft.compute_descriptors(PointCloud(np.zeros((20, 3))), k_local=4)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            ft.compute_descriptors(make_cloud(np.zeros((3, 3))), k_local=16)

    def test_planar_grid_statistics(self):
        xs = np.linspace(0, 1, 12)
        g = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
        pts = np.concatenate([g, np.full((len(g), 1), 2.0)], axis=1)
        desc = ft.compute_descriptors(make_cloud(pts), k_local=9)
        interior = np.all((pts[:, :2] > 0.2) & (pts[:, :2] < 0.8), axis=1)
        planarity = desc.values[interior, 7]
        linearity = desc.values[interior, 8]
        assert np.all(planarity > 0.95)
        assert np.all(linearity < 0.05)

    def test_colinear_points(self):
        pts = np.stack([np.linspace(0, 1, 30), np.zeros(30), np.full(30, 1.0)], axis=1)
        desc = ft.compute_descriptors(make_cloud(pts), k_local=5)
        assert np.all(desc.values[5:-5, 8] > 0.95)  # linearity
        assert np.all(desc.values[5:-5, 7] < 0.05)  # planarity

    def test_normals_oriented_toward_viewpoint(self):
        xs = np.linspace(-0.5, 0.5, 10)
        g = np.stack(np.meshgrid(xs, xs, indexing="ij"), axis=-1).reshape(-1, 2)
        pts = np.concatenate([g, np.full((len(g), 1), 2.0)], axis=1)
        desc = ft.compute_descriptors(make_cloud(pts), k_local=8)
        assert np.all(desc.normals[:, 2] < 0)  # plane at z=2 faces the origin

    def test_matches_per_point_eigen_oracle(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(120, 3))
        cloud = make_cloud(pts, rng)
        k = 10
        desc = ft.compute_descriptors(cloud, k_local=k)
        for i in rng.choice(120, 25, replace=False):
            d = np.linalg.norm(pts - pts[i], axis=1)
            idx = np.argsort(d, kind="stable")[:k]
            neigh = pts[idx]
            centroid = neigh.mean(axis=0)
            cov = (neigh - centroid).T @ (neigh - centroid) / k
            evals, evecs = np.linalg.eigh(cov)
            normal = evecs[:, 0]
            if normal @ pts[i] > 0:
                normal = -normal
            l1, l2, l3 = max(evals[2], 1e-12), max(evals[1], 0), max(evals[0], 0)
            expect = [
                (pts[i] - centroid) @ normal,
                (l2 - l3) / l1,
                (l1 - l2) / l1,
                np.linalg.norm(neigh - pts[i], axis=1).mean(),
            ]
            np.testing.assert_allclose(desc.values[i, 6:], expect, atol=1e-6)
            np.testing.assert_allclose(desc.normals[i], normal, atol=1e-6)


class TestExtract:
    def test_unit_norm_output(self):
        rng = np.random.default_rng(1)
        model = ft.FeatureModel(seed=3)
        desc = ft.Descriptors(rng.normal(size=(50, 10)), rng.normal(size=(50, 3)))
        out = ft.extract(model, desc)
        np.testing.assert_allclose(np.linalg.norm(out.features, axis=1), 1.0, atol=1e-6)

    def test_constant_map_with_zero_final_weights(self):
        rng = np.random.default_rng(2)
        model = ft.FeatureModel(seed=4)
        b = rng.normal(size=32)
        model.store.set("w2", np.zeros((64, 32)))
        model.store.set("b2", b)
        desc = ft.Descriptors(rng.normal(size=(7, 10)), rng.normal(size=(7, 3)))
        out = ft.extract(model, desc)
        expect = b / np.linalg.norm(b)
        for row in out.features:
            np.testing.assert_allclose(row, expect, atol=1e-9)

    def test_rejects_nonfinite_descriptors(self):
        model = ft.FeatureModel(seed=5)
        with pytest.raises(ValueError):
            ft.Descriptors(np.array([[np.nan] * 10]), np.zeros((1, 3)))

    def test_matches_matrix_arithmetic_oracle(self):
        rng = np.random.default_rng(3)
        model = ft.FeatureModel(seed=6)
        x = rng.normal(size=(20, 10))
        out = ft.extract(model, ft.Descriptors(x, rng.normal(size=(20, 3)))).features

        h = x
        for i in range(3):
            h = h @ model.store.get(f"w{i}") + model.store.get(f"b{i}")
            if i < 2:
                h = np.maximum(h, 0.0)
        h = h / np.sqrt((h**2).sum(axis=1, keepdims=True) + 1e-24)
        np.testing.assert_allclose(out, h, atol=1e-6)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        model = ft.FeatureModel(seed=7)
        x = rng.normal(size=(5, 10))
        probe = rng.normal(size=(5, 32))

        def build(tape, store):
            out = model.forward(tape, x)
            return tape.sum(tape.mul(out, tape.const(probe)))

        check_store_grads(build, model.store, max_coords=24, seed=4)


class TestMutualMatch:
    def test_self_match(self):
        rng = np.random.default_rng(5)
        f = random_unit_features(rng, 30)
        pairs = ft.mutual_match(f, f, n_c=30)
        np.testing.assert_array_equal(pairs.src_idx, pairs.tgt_idx)
        assert len(pairs) == 30

    def test_follows_features_not_indices(self):
        rng = np.random.default_rng(6)
        f = random_unit_features(rng, 2)
        swapped = ft.FeatureSet(f.features[::-1])
        pairs = ft.mutual_match(f, swapped, n_c=2)
        got = dict(zip(pairs.src_idx.tolist(), pairs.tgt_idx.tolist()))
        assert got == {0: 1, 1: 0}

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        fx = random_unit_features(rng, 200)
        fy = random_unit_features(rng, 200)
        pairs = ft.mutual_match(fx, fy, n_c=200)

        d = np.linalg.norm(fx.features[:, None] - fy.features[None], axis=2)
        nn_xy = d.argmin(axis=1)
        nn_yx = d.argmin(axis=0)
        expect = {(i, nn_xy[i]) for i in range(200) if nn_yx[nn_xy[i]] == i}
        assert set(zip(pairs.src_idx.tolist(), pairs.tgt_idx.tolist())) == expect

    def test_empty_raises(self):
        rng = np.random.default_rng(8)
        with pytest.raises(ValueError):
            ft.mutual_match(ft.FeatureSet(np.zeros((0, 32))), random_unit_features(rng, 3))


class TestWeightedKnnMatch:
    def unit(self, *rows):
        f = np.zeros((len(rows), 32))
        for i, r in enumerate(rows):
            f[i, : len(r)] = r
        return ft.FeatureSet(f / np.linalg.norm(f, axis=1, keepdims=True))

    def test_identical_features_weight_one(self):
        f = self.unit([1, 0], [0, 1], [1, 1])
        pairs = ft.weighted_knn_match(f, f, k=3)
        np.testing.assert_allclose(pairs.weights, 1.0)

    def test_orthogonal_weight(self):
        fx = self.unit([1, 0])
        fy = self.unit([0, 1])
        pairs = ft.weighted_knn_match(fx, fy, k=1)
        np.testing.assert_allclose(pairs.weights, 1 - np.sqrt(2) / 2, atol=1e-12)

    def test_antipodal_weight_zero(self):
        fx = self.unit([1, 0])
        fy = ft.FeatureSet(-fx.features)
        pairs = ft.weighted_knn_match(fx, fy, k=1)
        np.testing.assert_allclose(pairs.weights, 0.0, atol=1e-12)

    def test_emits_2k_pairs(self):
        rng = np.random.default_rng(9)
        pairs = ft.weighted_knn_match(
            random_unit_features(rng, 40), random_unit_features(rng, 50), k=20
        )
        assert len(pairs) == 40

    def test_weights_bounded(self):
        rng = np.random.default_rng(10)
        pairs = ft.weighted_knn_match(
            random_unit_features(rng, 60), random_unit_features(rng, 60), k=25
        )
        assert pairs.weights.min() >= 0.0 and pairs.weights.max() <= 1.0

    def test_swap_symmetry(self):
        rng = np.random.default_rng(11)
        fx = random_unit_features(rng, 30)
        fy = random_unit_features(rng, 35)
        ab = ft.weighted_knn_match(fx, fy, k=12)
        ba = ft.weighted_knn_match(fy, fx, k=12)
        multiset_ab = sorted(zip(ab.src_idx, ab.tgt_idx, np.round(ab.weights, 12)))
        multiset_ba = sorted(zip(ba.tgt_idx, ba.src_idx, np.round(ba.weights, 12)))
        assert multiset_ab == multiset_ba


class TestModelIO:
    def test_round_trip(self, tmp_path):
        model = ft.FeatureModel(seed=12)
        path = tmp_path / "model.f2mw"
        ft.save_model(model, path)
        loaded = ft.load_model(path)
        for name in model.store.slices:
            np.testing.assert_allclose(
                loaded.store.get(name),
                model.store.get(name).astype(np.float32),
                atol=0,
            )

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.f2mw"
        path.write_bytes(b"XXXX" + b"\0" * 32)
        with pytest.raises(ValueError, match="F2MW"):
            ft.load_model(path)

    def test_hash_stable(self, tmp_path):
        model = ft.FeatureModel(seed=13)
        p1, p2 = tmp_path / "a", tmp_path / "b"
        ft.save_model(model, p1)
        ft.save_model(model, p2)
        assert ft.model_hash(p1) == ft.model_hash(p2)
