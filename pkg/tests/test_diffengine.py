import numpy as np
import pytest

from f2m import diffengine as de
from f2m import geom
from f2m.diffengine import ParamStore, Tape, adam_step


from conftest import check_store_grads, fd_grad  # noqa: F401


def scalarize(tape, x, probe):
    """Fixed linear probe so any-shaped output becomes a scalar loss."""
    return tape.sum(tape.mul(x, tape.const(probe)))


UNARY_OPS = ["relu", "sigmoid", "tanh", "exp", "log", "sqrt", "square", "sin", "cos"]
BINARY_OPS = ["add", "sub", "mul", "div"]


@pytest.mark.parametrize("op", UNARY_OPS)
def test_unary_gradients(op):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        vals = rng.uniform(0.2, 2.0, size=(3, 4)) if op in ("log", "sqrt") else rng.normal(size=(3, 4))
        if op == "relu":  # keep away from the kink
            vals = vals + np.sign(vals) * 0.05
        store.alloc("x", (3, 4), vals)
        probe = rng.normal(size=(3, 4))

        def build(tape, s):
            x = tape.leaf(s, "x")
            return scalarize(tape, getattr(tape, op)(x), probe)

        check_store_grads(build, store, seed=seed)


@pytest.mark.parametrize("op", BINARY_OPS)
def test_binary_gradients_with_broadcast(op):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        store.alloc("a", (3, 4), rng.normal(size=(3, 4)))
        b = rng.normal(size=(1, 4))
        if op == "div":
            b = np.sign(b) * (np.abs(b) + 0.5)
        store.alloc("b", (1, 4), b)
        probe = rng.normal(size=(3, 4))

        def build(tape, s):
            out = getattr(tape, op)(tape.leaf(s, "a"), tape.leaf(s, "b"))
            return scalarize(tape, out, probe)

        check_store_grads(build, store, seed=seed)


def test_matmul_gradients():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        store.alloc("a", (3, 4), rng.normal(size=(3, 4)))
        store.alloc("b", (4, 2), rng.normal(size=(4, 2)))
        probe = rng.normal(size=(3, 2))

        def build(tape, s):
            return scalarize(tape, tape.matmul(tape.leaf(s, "a"), tape.leaf(s, "b")), probe)

        check_store_grads(build, store, seed=seed)


def test_reduction_and_shape_gradients():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        store.alloc("x", (4, 3), rng.normal(size=(4, 3)))
        idx = rng.integers(0, 4, size=6)
        probe = rng.normal(size=(2, 5))

        def build(tape, s):
            x = tape.leaf(s, "x")
            parts = tape.concat([tape.gather_rows(x, idx), x], axis=0)
            summed = tape.sum(parts, axis=1)
            return scalarize(tape, tape.reshape(summed, (2, 5)), probe)

        check_store_grads(build, store, seed=seed)


def test_trilinear_gradients_grid_and_positions():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        res = (3, 4, 3)
        store = ParamStore()
        store.alloc("grid", (np.prod(res), 2), rng.normal(size=(np.prod(res), 2)))
        store.alloc("pos", (5, 3), rng.uniform(0.15, 0.85, size=(5, 3)))
        probe = rng.normal(size=(5, 2))

        def build(tape, s):
            out = tape.trilinear(
                tape.leaf(s, "grid"), tape.leaf(s, "pos"), res, np.zeros(3), np.ones(3)
            )
            return scalarize(tape, out, probe)

        check_store_grads(build, store, max_coords=24, seed=seed)


def test_trilinear_exact_at_vertices_and_edges():
    rng = np.random.default_rng(3)
    res = (4, 4, 4)
    grid = rng.normal(size=(64, 3))
    tape = Tape()
    g = tape.const(grid)
    # grid vertex (1,2,3) in a unit box
    p = np.array([[1 / 3, 2 / 3, 1.0]])
    out = tape.trilinear(g, tape.const(p), res, np.zeros(3), np.ones(3))
    vid = (1 * 4 + 2) * 4 + 3
    np.testing.assert_array_equal(out.data[0], grid[vid])
    # midpoint of the edge between (0,0,0) and (1,0,0)
    out2 = tape.trilinear(g, tape.const(np.array([[1 / 6, 0.0, 0.0]])), res, np.zeros(3), np.ones(3))
    np.testing.assert_allclose(out2.data[0], 0.5 * (grid[0] + grid[(1 * 4 + 0) * 4 + 0]), atol=1e-15)


def test_trilinear_matches_eight_corner_oracle():
    rng = np.random.default_rng(4)
    res = (5, 6, 4)
    grid = rng.normal(size=(np.prod(res), 3))
    pos = rng.uniform(0.05, 0.95, size=(50, 3))
    tape = Tape()
    out = tape.trilinear(tape.const(grid), tape.const(pos), res, np.zeros(3), np.ones(3)).data

    g3 = grid.reshape(*res, 3)
    for m in range(len(pos)):
        u = pos[m] * (np.array(res) - 1)
        i0 = np.minimum(u.astype(int), np.array(res) - 2)
        f = u - i0
        acc = np.zeros(3)
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    w = (
                        (f[0] if dx else 1 - f[0])
                        * (f[1] if dy else 1 - f[1])
                        * (f[2] if dz else 1 - f[2])
                    )
                    acc += w * g3[i0[0] + dx, i0[1] + dy, i0[2] + dz]
        assert np.max(np.abs(out[m] - acc)) < 1e-9


def test_se3_ops_gradients():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        base = geom.exp(geom.PoseTangent(rng.normal(size=3) * 0.5, rng.normal(size=3)))
        pts = rng.normal(size=(6, 3))
        store = ParamStore()
        store.alloc("delta", (6,), rng.normal(size=6) * 0.2)
        probe1 = rng.normal(size=(6, 3))
        probe2 = rng.normal(size=(6, 3))

        def build(tape, s):
            d = tape.leaf(s, "delta")
            world = tape.se3_points(d, pts, base)
            dirs = tape.se3_dirs(d, pts / np.linalg.norm(pts, axis=1, keepdims=True), base)
            return tape.add(scalarize(tape, world, probe1), scalarize(tape, dirs, probe2))

        check_store_grads(build, store, seed=seed)


class TestForwardBackwardContract:
    def test_quadratic_gradient_exact(self):
        store = ParamStore()
        vals = np.array([1.0, -2.0, 3.0])
        store.alloc("x", (3,), vals)

        def build(tape):
            x = tape.leaf(store, "x")
            return tape.sum(tape.square(x))

        loss = de.forward_backward(build, store)
        assert loss == float(np.sum(vals**2))
        np.testing.assert_array_equal(store.grad("x"), 2 * vals)

    def test_constant_loss_zero_grads(self):
        store = ParamStore()
        store.alloc("x", (3,), np.ones(3))

        def build(tape):
            tape.leaf(store, "x")
            return tape.const(5.0)

        de.forward_backward(build, store)
        np.testing.assert_array_equal(store.grad("x"), np.zeros(3))

    def test_random_graphs_match_fd(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            store = ParamStore()
            store.alloc("w", (4, 3), rng.normal(size=(4, 3)))
            store.alloc("b", (1, 4), rng.normal(size=(1, 4)))

            x_in = rng.normal(size=(5, 3))

            def build(tape, s):
                w = tape.leaf(s, "w")
                b = tape.leaf(s, "b")
                x = tape.const(x_in)
                h = tape.tanh(tape.add(tape.matmul(x, tape.reshape(w, (3, 4))), b))
                return tape.sum(tape.square(h))

            check_store_grads(build, store, seed=seed)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nonfinite_intermediate_names_node(self):
        store = ParamStore()
        store.alloc("x", (2,), np.array([-1.0, 2.0]))

        def build(tape):
            return tape.sum(tape.log(tape.leaf(store, "x")))

        with pytest.raises(de.NonFiniteError, match="log"):
            de.forward_backward(build, store)

    def test_linearity_of_gradients(self):
        rng = np.random.default_rng(11)
        store = ParamStore()
        store.alloc("x", (5,), rng.normal(size=5))
        tgt = rng.normal(size=5)

        def l1(tape):
            return tape.sum(tape.square(tape.leaf(store, "x")))

        def l2(tape):
            return tape.sum(tape.mul(tape.leaf(store, "x"), tape.const(tgt)))

        a, b = 0.7, -2.3

        def combo(tape):
            return tape.add(tape.mul(l1(tape), tape.const(a)), tape.mul(l2(tape), tape.const(b)))

        de.forward_backward(l1, store)
        g1 = store.grad("x").copy()
        de.forward_backward(l2, store)
        g2 = store.grad("x").copy()
        de.forward_backward(combo, store)
        np.testing.assert_allclose(store.grad("x"), a * g1 + b * g2, atol=1e-10)

    def test_determinism(self):
        rng = np.random.default_rng(12)
        store = ParamStore()
        store.alloc("x", (64,), rng.normal(size=64))

        def build(tape):
            x = tape.leaf(store, "x")
            return tape.sum(tape.sigmoid(tape.mul(x, x)))

        l1 = de.forward_backward(build, store)
        g1 = store.grads.copy()
        l2 = de.forward_backward(build, store)
        assert l1 == l2
        np.testing.assert_array_equal(g1, store.grads)


class TestAdam:
    def test_zero_grads_no_change(self):
        store = ParamStore()
        store.alloc("x", (4,), np.arange(4.0))
        before = store.values.copy()
        adam_step(store, lr=0.1)
        np.testing.assert_array_equal(store.values, before)

    def test_first_step_closed_form(self):
        store = ParamStore()
        store.alloc("x", (3,), np.zeros(3))
        g = np.array([0.5, -2.0, 1e-3])
        store.grads[:] = g
        lr, eps = 0.01, 1e-8
        adam_step(store, lr=lr, beta1=0.9, beta2=0.999, eps=eps)
        expected = -lr * g / (np.abs(g) + eps)
        np.testing.assert_allclose(store.values, expected, atol=1e-12)
        assert store.step == 1
        np.testing.assert_array_equal(store.grads, np.zeros(3))

    def test_invalid_lr(self):
        store = ParamStore()
        store.alloc("x", (1,), np.zeros(1))
        with pytest.raises(ValueError):
            adam_step(store, lr=0.0)

    def test_converges_on_convex_quadratic(self):
        rng = np.random.default_rng(13)
        target = rng.normal(size=8)
        store = ParamStore()
        store.alloc("x", (8,), np.zeros(8))

        def build(tape):
            diff = tape.sub(tape.leaf(store, "x"), tape.const(target))
            return tape.sum(tape.square(diff))

        losses = []
        for _ in range(100):
            losses.append(de.forward_backward(build, store))
            adam_step(store, lr=0.05)
        final = de.forward_backward(build, store)
        assert all(b < a for a, b in zip(losses[5:], losses[6:]))
        assert final < 1e-3 * losses[0]

    def test_lr_scale_groups(self):
        store = ParamStore()
        store.alloc("slow", (2,), np.zeros(2), lr_scale=1.0)
        store.alloc("fast", (2,), np.zeros(2), lr_scale=10.0)
        store.grads[:] = 1.0
        adam_step(store, lr=0.01)
        assert abs(store.get("fast")[0] / store.get("slow")[0] - 10.0) < 1e-9


class TestPoseGradient:
    def test_pose_independent_loss(self):
        pose = geom.Pose.identity()

        def build(tape, delta):
            tape.se3_points(delta, np.ones((2, 3)), pose)
            return tape.const(3.0)

        g = de.pose_gradient(build, pose)
        np.testing.assert_array_equal(g.omega, np.zeros(3))
        np.testing.assert_array_equal(g.nu, np.zeros(3))

    def test_zero_at_minimum(self):
        rng = np.random.default_rng(14)
        pts = rng.normal(size=(5, 3))
        pose = geom.Pose.identity()

        def build(tape, delta):
            world = tape.se3_points(delta, pts, pose)
            return tape.sum(tape.square(tape.sub(world, tape.const(pts))))

        g = de.pose_gradient(build, pose)
        np.testing.assert_allclose(np.concatenate([g.omega, g.nu]), np.zeros(6), atol=1e-12)

    def test_matches_fd_on_exp_perturbed_poses(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            base = geom.exp(geom.PoseTangent(rng.normal(size=3) * 0.4, rng.normal(size=3)))
            pts = rng.normal(size=(4, 3)) + np.array([0, 0, 2.0])
            tgt = rng.normal(size=(4, 3)) + np.array([0, 0, 2.0])

            def build(tape, delta):
                world = tape.se3_points(delta, pts, base)
                return tape.sum(tape.square(tape.sub(world, tape.const(tgt))))

            g = de.pose_gradient(build, base).as_vector()

            def loss_at(vec):
                perturbed = geom.compose(geom.exp(geom.PoseTangent(vec[:3], vec[3:])), base)
                world = geom.invert(perturbed).apply(pts)
                return float(np.sum((world - tgt) ** 2))

            step = 1e-5
            for i in range(6):
                e = np.zeros(6)
                e[i] = step
                fd = (loss_at(e) - loss_at(-e)) / (2 * step)
                denom = max(abs(fd), 1e-2)
                assert abs(g[i] - fd) <= 1e-4 * denom + 1e-6


def test_apply_delta_consistent_with_se3_points():
    rng = np.random.default_rng(15)
    base = geom.exp(geom.PoseTangent(rng.normal(size=3) * 0.3, rng.normal(size=3)))
    delta = rng.normal(size=6) * 0.2
    pts = rng.normal(size=(7, 3))

    tape = Tape()
    store = ParamStore()
    store.alloc("d", (6,), delta)
    world_op = tape.se3_points(tape.leaf(store, "d"), pts, base).data

    folded = de.apply_delta(delta, base)
    world_ref = geom.invert(folded).apply(pts)
    np.testing.assert_allclose(world_op, world_ref, atol=1e-12)
