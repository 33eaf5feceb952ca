import numpy as np

from f2m.diffengine import Tape


def fd_grad(loss_fn, values, coords, step=1e-4):
    """Central finite differences of loss_fn(flat_values) at chosen coords."""
    g = np.zeros(len(coords))
    for k, i in enumerate(coords):
        vp = values.copy()
        vp[i] += step
        vm = values.copy()
        vm[i] -= step
        g[k] = (loss_fn(vp) - loss_fn(vm)) / (2 * step)
    return g


def check_store_grads(build, store, rtol=1e-4, atol=1e-6, max_coords=16, seed=0, step=1e-4):
    """Compare tape gradients against central differences on store values."""
    store.zero_grads()
    tape = Tape()
    tape.backward(build(tape, store))
    analytic = store.grads.copy()

    base = store.values.copy()

    def loss_at(vals):
        store.values[:] = vals
        t = Tape()
        out = float(build(t, store).data)
        store.values[:] = base
        return out

    rng = np.random.default_rng(seed)
    n = len(base)
    coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
    numeric = fd_grad(loss_at, base, coords, step=step)
    got = analytic[coords]
    denom = np.maximum(np.abs(numeric), atol / rtol)
    assert np.all(np.abs(got - numeric) <= rtol * denom + atol), (
        f"grad mismatch: analytic {got}, fd {numeric}"
    )
