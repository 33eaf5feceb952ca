"""Reverse-mode gradient engine over a fixed vocabulary of vectorized ops.

Define-by-run tape: forward values are computed eagerly, every node records a
hand-written backward. All arithmetic is float64. Parameters live in flat
ParamStore vectors addressed by named slices; a backward pass accumulates
gradients into every store touched by the graph, so one graph may span
several stores (e.g. field parameters plus per-keyframe pose increments).
"""

from __future__ import annotations

import numpy as np

from .geom import Pose, PoseTangent, invert, skew, so3_exp, so3_left_jacobian


class NonFiniteError(FloatingPointError):
    """A forward value became non-finite; message names the node."""


class ParamStore:
    """Flat parameter vector with named slices plus Adam state.

    `lr_scale` gives a per-parameter multiplier on the step size so one store
    can hold groups trained at different rates with a single adam_step call.
    """

    def __init__(self):
        self.values = np.zeros(0)
        self.grads = np.zeros(0)
        self.m = np.zeros(0)
        self.v = np.zeros(0)
        self.lr_scale = np.zeros(0)
        self.slices: dict[str, slice] = {}
        self.shapes: dict[str, tuple] = {}
        self.step = 0

    def alloc(self, name: str, shape, init, lr_scale: float = 1.0) -> None:
        if name in self.slices:
            raise ValueError(f"parameter {name!r} already allocated")
        shape = tuple(shape)
        init = np.asarray(init, dtype=np.float64)
        if init.shape == ():
            init = np.full(shape, float(init))
        if init.shape != shape:
            raise ValueError(f"init shape {init.shape} != {shape}")
        off = len(self.values)
        n = init.size
        self.values = np.concatenate([self.values, init.ravel()])
        self.grads = np.concatenate([self.grads, np.zeros(n)])
        self.m = np.concatenate([self.m, np.zeros(n)])
        self.v = np.concatenate([self.v, np.zeros(n)])
        self.lr_scale = np.concatenate([self.lr_scale, np.full(n, float(lr_scale))])
        self.slices[name] = slice(off, off + n)
        self.shapes[name] = shape

    def get(self, name: str) -> np.ndarray:
        return self.values[self.slices[name]].reshape(self.shapes[name])

    def set(self, name: str, arr) -> None:
        arr = np.asarray(arr, dtype=np.float64)
        self.values[self.slices[name]] = arr.reshape(-1)

    def grad(self, name: str) -> np.ndarray:
        return self.grads[self.slices[name]].reshape(self.shapes[name])

    def zero_grads(self) -> None:
        self.grads[:] = 0.0

    def reset_moments(self) -> None:
        self.m[:] = 0.0
        self.v[:] = 0.0
        self.step = 0

    @property
    def size(self) -> int:
        return len(self.values)


def adam_step(params: ParamStore, lr: float, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """First-order adaptive update; increments the step counter, zeroes grads."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    params.step += 1
    g = params.grads
    params.m *= beta1
    params.m += (1.0 - beta1) * g
    params.v *= beta2
    np.multiply(g, g, out=g)  # grads buffer doubles as g^2 scratch; zeroed below
    params.v += (1.0 - beta2) * g
    t = params.step
    denom = np.sqrt(params.v / (1.0 - beta2**t))
    denom += eps
    np.divide(params.m, denom, out=denom)
    denom *= (lr / (1.0 - beta1**t)) * params.lr_scale
    params.values -= denom
    g[:] = 0.0


def _check(a: np.ndarray, name: str) -> None:
    s = a.sum()
    if not np.isfinite(s) and not np.all(np.isfinite(a)):
        raise NonFiniteError(f"non-finite value in node {name}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to `shape`."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("tape", "data", "grad", "_parents", "_bw", "name", "requires_grad")

    def __init__(self, tape, data, parents=(), bw=None, name="const", requires_grad=None):
        self.tape = tape
        self.data = data
        self.grad = None
        self._parents = parents
        self._bw = bw
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad
        if tape.check_finite:
            _check(data, name)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.data.shape

    def _accum(self, g):
        # First gradient is stored by reference (callers hand over fresh
        # arrays or read-only views); later contributions allocate a new sum
        # so shared buffers are never mutated in place.
        if self.grad is None:
            self.grad = g
        else:
            self.grad = self.grad + g

    # operator sugar -------------------------------------------------------
    def _wrap(self, other):
        return other if isinstance(other, Tensor) else self.tape.const(other)

    def __add__(self, other):
        return self.tape.add(self, self._wrap(other))

    __radd__ = __add__

    def __sub__(self, other):
        return self.tape.sub(self, self._wrap(other))

    def __rsub__(self, other):
        return self.tape.sub(self._wrap(other), self)

    def __mul__(self, other):
        return self.tape.mul(self, self._wrap(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return self.tape.div(self, self._wrap(other))

    def __rtruediv__(self, other):
        return self.tape.div(self._wrap(other), self)

    def __neg__(self):
        return self.tape.mul(self, self.tape.const(-1.0))

    def __matmul__(self, other):
        return self.tape.matmul(self, self._wrap(other))


class Tape:
    """Records an eager computation graph and replays it backward."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[Tensor] = []
        self.check_finite = check_finite
        self._counter = 0

    def _name(self, kind):
        self._counter += 1
        return f"{kind}#{self._counter}"

    # --- sources ----------------------------------------------------------
    def const(self, x) -> Tensor:
        return Tensor(
            self, np.asarray(x, dtype=np.float64), name=self._name("const"), requires_grad=False
        )

    def leaf(self, store: ParamStore, name: str) -> Tensor:
        sl = store.slices[name]
        t = Tensor(
            self,
            store.get(name),
            parents=(),
            bw=None,
            name=self._name(f"leaf:{name}"),
            requires_grad=True,
        )
        t._bw = lambda g: store.grads.__setitem__(sl, store.grads[sl] + np.ravel(g))
        return t

    def custom(self, data, parents, bw, name="custom") -> Tensor:
        """Register an externally computed op with a hand-written backward."""
        out = Tensor(self, data, tuple(parents), name=self._name(name))
        if out.requires_grad:
            out._bw = bw
        return out

    # --- elementwise binary -----------------------------------------------
    def add(self, a: Tensor, b: Tensor) -> Tensor:
        out = Tensor(self, a.data + b.data, (a, b), name=self._name("add"))

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        out._bw = bw if out.requires_grad else None
        return out

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        out = Tensor(self, a.data - b.data, (a, b), name=self._name("sub"))

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.shape))

        out._bw = bw if out.requires_grad else None
        return out

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        out = Tensor(self, a.data * b.data, (a, b), name=self._name("mul"))

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        out._bw = bw if out.requires_grad else None
        return out

    def div(self, a: Tensor, b: Tensor) -> Tensor:
        out = Tensor(self, a.data / b.data, (a, b), name=self._name("div"))

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

        out._bw = bw if out.requires_grad else None
        return out

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        out = Tensor(self, a.data @ b.data, (a, b), name=self._name("matmul"))

        def bw(g):
            if a.requires_grad:
                a._accum(g @ b.data.T)
            if b.requires_grad:
                b._accum(a.data.T @ g)

        out._bw = bw if out.requires_grad else None
        return out

    # --- elementwise unary --------------------------------------------------
    def relu(self, a: Tensor) -> Tensor:
        out = Tensor(self, np.maximum(a.data, 0.0), (a,), name=self._name("relu"))
        out._bw = None if not out.requires_grad else lambda g: a._accum(g * (a.data > 0.0))
        return out

    def sigmoid(self, a: Tensor) -> Tensor:
        y = 1.0 / (1.0 + np.exp(-a.data))
        out = Tensor(self, y, (a,), name=self._name("sigmoid"))
        out._bw = None if not out.requires_grad else lambda g: a._accum(g * y * (1.0 - y))
        return out

    def tanh(self, a: Tensor) -> Tensor:
        y = np.tanh(a.data)
        out = Tensor(self, y, (a,), name=self._name("tanh"))
        out._bw = None if not out.requires_grad else lambda g: a._accum(g * (1.0 - y * y))
        return out

    def exp(self, a: Tensor) -> Tensor:
        y = np.exp(a.data)
        out = Tensor(self, y, (a,), name=self._name("exp"))
        out._bw = None if not out.requires_grad else lambda g: a._accum(g * y)
        return out

    def log(self, a: Tensor) -> Tensor:
        out = Tensor(self, np.log(a.data), (a,), name=self._name("log"))
        out._bw = None if not out.requires_grad else lambda g: a._accum(g / a.data)
        return out

    def sqrt(self, a: Tensor) -> Tensor:
        y = np.sqrt(a.data)
        out = Tensor(self, y, (a,), name=self._name("sqrt"))
        # denominator floor keeps the backward finite at exactly zero inputs
        out._bw = None if not out.requires_grad else lambda g: a._accum(g / (2.0 * np.maximum(y, 1e-12)))
        return out

    def square(self, a: Tensor) -> Tensor:
        out = Tensor(self, a.data * a.data, (a,), name=self._name("square"))
        out._bw = None if not out.requires_grad else lambda g: a._accum(2.0 * g * a.data)
        return out

    def sin(self, a: Tensor) -> Tensor:
        out = Tensor(self, np.sin(a.data), (a,), name=self._name("sin"))
        out._bw = None if not out.requires_grad else lambda g: a._accum(g * np.cos(a.data))
        return out

    def cos(self, a: Tensor) -> Tensor:
        out = Tensor(self, np.cos(a.data), (a,), name=self._name("cos"))
        out._bw = None if not out.requires_grad else lambda g: a._accum(-g * np.sin(a.data))
        return out

    # --- shape ---------------------------------------------------------------
    def reshape(self, a: Tensor, shape) -> Tensor:
        shape = tuple(shape)
        out = Tensor(self, a.data.reshape(shape), (a,), name=self._name("reshape"))
        out._bw = None if not out.requires_grad else lambda g: a._accum(g.reshape(a.shape))
        return out

    def sum(self, a: Tensor, axis=None, keepdims=False) -> Tensor:
        out = Tensor(self, a.data.sum(axis=axis, keepdims=keepdims), (a,), name=self._name("sum"))

        def bw(g):
            g = np.asarray(g)
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.shape))

        out._bw = bw if out.requires_grad else None
        return out

    def mean(self, a: Tensor, axis=None, keepdims=False) -> Tensor:
        n = a.data.size if axis is None else a.shape[axis]
        return self.mul(self.sum(a, axis=axis, keepdims=keepdims), self.const(1.0 / n))

    def concat(self, parts: list[Tensor], axis: int = -1) -> Tensor:
        data = np.concatenate([p.data for p in parts], axis=axis)
        out = Tensor(self, data, tuple(parts), name=self._name("concat"))
        sizes = [p.shape[axis] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def bw(g):
            for p, piece in zip(parts, np.split(g, splits, axis=axis)):
                if p.requires_grad:
                    p._accum(piece)

        out._bw = bw if out.requires_grad else None
        return out

    def gather_rows(self, a: Tensor, idx) -> Tensor:
        idx = np.asarray(idx, dtype=np.int64)
        out = Tensor(self, a.data[idx], (a,), name=self._name("gather"))

        def bw(g):
            ga = np.zeros_like(a.data)
            np.add.at(ga, idx, g)
            a._accum(ga)

        out._bw = bw if out.requires_grad else None
        return out

    # --- trilinear grid interpolation ----------------------------------------
    def trilinear(self, grid: Tensor, positions: Tensor, res, bmin, bmax) -> Tensor:
        """Interpolate a (rx*ry*rz, F) grid at world positions (M, 3).

        Positions outside the bounds are clamped to the boundary; clamped
        coordinates receive zero positional gradient.
        """
        res = np.asarray(res, dtype=np.int64)
        bmin = np.asarray(bmin, dtype=np.float64)
        bmax = np.asarray(bmax, dtype=np.float64)
        rx, ry, rz = int(res[0]), int(res[1]), int(res[2])
        F = grid.shape[1]
        scale = (res - 1) / (bmax - bmin)

        u_raw = (positions.data - bmin) * scale
        u = np.clip(u_raw, 0.0, (res - 1).astype(np.float64))
        interior = (u == u_raw).astype(np.float64)
        i0 = np.minimum(np.floor(u).astype(np.int64), res - 2)
        f = u - i0

        base = (i0[:, 0] * ry + i0[:, 1]) * rz + i0[:, 2]
        corner_off = np.array(
            [(dx * ry + dy) * rz + dz for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)],
            dtype=np.int64,
        )
        idx8 = base[:, None] + corner_off[None, :]  # (M, 8)
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        wx = np.stack([1.0 - fx, fx], axis=1)
        wy = np.stack([1.0 - fy, fy], axis=1)
        wz = np.stack([1.0 - fz, fz], axis=1)
        w8 = (wx[:, :, None, None] * wy[:, None, :, None] * wz[:, None, None, :]).reshape(-1, 8)

        gathered = grid.data[idx8]  # (M, 8, F)
        data = np.einsum("mc,mcf->mf", w8, gathered)
        out = Tensor(self, data, (grid, positions), name=self._name("trilinear"))

        def bw(g):
            if grid.requires_grad:
                gg = np.zeros_like(grid.data)
                flat_idx = idx8.ravel()
                for feat in range(F):
                    gg[:, feat] += np.bincount(
                        flat_idx, weights=(w8 * g[:, feat : feat + 1]).ravel(), minlength=len(gg)
                    )
                grid._accum(gg)
            if not positions.requires_grad:
                return

            s = np.einsum("mcf,mf->mc", gathered, g)  # (M, 8) upstream per corner
            sx = (s * np.array([-1, -1, -1, -1, 1, 1, 1, 1])[None, :]) * (
                wy[:, [0, 0, 1, 1, 0, 0, 1, 1]] * wz[:, [0, 1, 0, 1, 0, 1, 0, 1]]
            )
            sy = (s * np.array([-1, -1, 1, 1, -1, -1, 1, 1])[None, :]) * (
                wx[:, [0, 0, 0, 0, 1, 1, 1, 1]] * wz[:, [0, 1, 0, 1, 0, 1, 0, 1]]
            )
            sz = (s * np.array([-1, 1, -1, 1, -1, 1, -1, 1])[None, :]) * (
                wx[:, [0, 0, 0, 0, 1, 1, 1, 1]] * wy[:, [0, 0, 1, 1, 0, 0, 1, 1]]
            )
            gu = np.stack([sx.sum(1), sy.sum(1), sz.sum(1)], axis=1)
            positions._accum(gu * scale * interior)

        out._bw = bw if out.requires_grad else None
        return out

    # --- SE(3) increment application -------------------------------------------
    def se3_points(self, delta: Tensor, cam_points, base: Pose) -> Tensor:
        """Map camera-frame points to world under pose increment(delta) . base.

        `base` maps world to camera; delta = (omega, nu) is a left-multiplied
        increment on it. Output: base^-1 (R(omega)^T (x - nu)).
        """
        x = cam_points.data if isinstance(cam_points, Tensor) else np.asarray(cam_points)
        parents = (delta, cam_points) if isinstance(cam_points, Tensor) else (delta,)
        omega = delta.data[:3]
        nu = delta.data[3:]
        R = so3_exp(omega)
        Jl = so3_left_jacobian(omega)
        inv_base = invert(base)
        u = x - nu
        y = u @ R  # rows: R^T u
        data = y @ inv_base.rotation.T + inv_base.translation
        out = Tensor(self, data, parents, name=self._name("se3_points"))

        def bw(g):
            gy = g @ inv_base.rotation
            gu = gy @ R.T
            rg = gy @ R.T  # rows of R @ gy
            if delta.requires_grad:
                gomega = Jl.T @ np.cross(rg, u).sum(axis=0)
                gnu = -gu.sum(axis=0)
                delta._accum(np.concatenate([gomega, gnu]))
            if isinstance(cam_points, Tensor) and cam_points.requires_grad:
                cam_points._accum(gu)

        out._bw = bw if out.requires_grad else None
        return out

    def se3_dirs(self, delta: Tensor, cam_dirs, base: Pose) -> Tensor:
        """Rotate camera-frame directions to world under increment(delta) . base."""
        d = cam_dirs.data if isinstance(cam_dirs, Tensor) else np.asarray(cam_dirs)
        parents = (delta, cam_dirs) if isinstance(cam_dirs, Tensor) else (delta,)
        omega = delta.data[:3]
        R = so3_exp(omega)
        Jl = so3_left_jacobian(omega)
        rot_cw = invert(base).rotation
        y = d @ R
        data = y @ rot_cw.T
        out = Tensor(self, data, parents, name=self._name("se3_dirs"))

        def bw(g):
            gy = g @ rot_cw
            rg = gy @ R.T
            if delta.requires_grad:
                gomega = Jl.T @ np.cross(rg, d).sum(axis=0)
                delta._accum(np.concatenate([gomega, np.zeros(3)]))
            if isinstance(cam_dirs, Tensor) and cam_dirs.requires_grad:
                cam_dirs._accum(gy @ R.T)

        out._bw = bw if out.requires_grad else None
        return out

    # --- backward ----------------------------------------------------------------
    def backward(self, loss: Tensor, release: bool = True) -> float:
        """Backpropagate from a scalar loss; visits every node exactly once.

        With `release` (default) the graph is torn down afterwards: node
        values stay readable but gradients, parent links and backward
        closures are dropped so large intermediate buffers free immediately
        instead of waiting on cycle collection.
        """
        if loss.data.size != 1:
            raise ValueError("backward needs a scalar loss")
        loss._accum(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            if node.grad is not None and node._bw is not None:
                node._bw(node.grad)
        if release:
            self.release()
        return float(loss.data)

    def release(self) -> None:
        """Drop backward state and graph links, keeping forward values."""
        for node in self.nodes:
            node.grad = None
            node._bw = None
            node._parents = ()
        self.nodes.clear()


def apply_delta(delta: np.ndarray, base: Pose) -> Pose:
    """Fold an increment (omega, nu) onto a pose: rot-exp left-multiplied."""
    omega = np.asarray(delta[:3], dtype=np.float64)
    nu = np.asarray(delta[3:], dtype=np.float64)
    R = so3_exp(omega)
    return Pose(R @ base.rotation, R @ base.translation + nu)


def forward_backward(builder, *stores: ParamStore, zero_grads: bool = True) -> float:
    """Build a graph with `builder(tape)`, backprop, and fill store grads."""
    if zero_grads:
        for s in stores:
            s.zero_grads()
    tape = Tape()
    loss = builder(tape)
    return tape.backward(loss)


def pose_gradient(builder, pose: Pose) -> PoseTangent:
    """Gradient of a pose-dependent loss at the identity increment.

    `builder(tape, delta)` must apply the 6-vector `delta` to `pose` via the
    se3 ops and return a scalar loss.
    """
    store = ParamStore()
    store.alloc("delta", (6,), np.zeros(6))
    tape = Tape()
    delta = tape.leaf(store, "delta")
    loss = builder(tape, delta)
    tape.backward(loss)
    g = store.grad("delta")
    return PoseTangent(g[:3].copy(), g[3:].copy())
