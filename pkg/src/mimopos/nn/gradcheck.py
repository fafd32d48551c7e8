"""Finite-difference verification of layer gradients.

The check projects the layer output onto a fixed random direction to get a
scalar loss, runs one backward pass, then compares analytic derivatives
against central differences at sampled coordinates of the input and of
every parameter.  Inputs should be float64 (and layers built with
dtype=float64) for the comparison to be meaningful at tight tolerances;
kinked layers need inputs kept away from their non-smooth sets.
"""

import numpy as np


def relative_error(a, b, floor=1e-6):
    """|a - b| scaled by the larger magnitude, floored for tiny values."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def _sample_indices(rng, size, n):
    n = min(n, size)
    return rng.choice(size, size=n, replace=False)


def check_layer_gradients(layer, x, rng, step=1e-5, n_input=40, n_param=40,
                          train=True):
    """Return the worst relative error between analytic and FD gradients.

    Args:
        layer: the layer under test; its parameters are probed too.
        x: float64 input batch.
        rng: numpy Generator driving the projection and coordinate choice.
        step: central-difference step.
        n_input: number of input coordinates probed.
        n_param: number of coordinates probed per parameter.
        train: forward-pass mode (batch normalisation differentiates only
            in training mode).
    """
    x = np.asarray(x, dtype=np.float64)
    y = layer.forward(x, train=train)
    proj = rng.normal(size=y.shape)

    def loss_at(xv):
        return float(np.sum(layer.forward(xv, train=train) * proj))

    for p in layer.params():
        p.grad[...] = 0
    grad_in = layer.backward(proj)
    worst = 0.0

    for idx in _sample_indices(rng, x.size, n_input):
        xp = x.copy()
        xp.flat[idx] += step
        up = loss_at(xp)
        xp.flat[idx] -= 2 * step
        down = loss_at(xp)
        fd = (up - down) / (2 * step)
        worst = max(worst, relative_error(fd, float(grad_in.flat[idx])))

    for p in layer.params():
        for idx in _sample_indices(rng, p.size, n_param):
            orig = float(p.value.flat[idx])
            p.value.flat[idx] = orig + step
            up = loss_at(x)
            p.value.flat[idx] = orig - step
            down = loss_at(x)
            p.value.flat[idx] = orig
            fd = (up - down) / (2 * step)
            worst = max(worst, relative_error(fd, float(p.grad.flat[idx])))

    # leave a clean state behind
    layer.forward(x, train=train)
    return worst


def distinct_values(shape, rng, spacing=0.01):
    """An array of globally distinct values in random order.

    Useful for probing max pooling: window entries are separated by at
    least ``spacing``, so a finite-difference step cannot flip an argmax.
    """
    size = int(np.prod(shape))
    vals = (np.arange(size) - size / 2) * spacing
    return rng.permutation(vals).reshape(shape)


def _away_from_zero(shape, rng, margin=0.1):
    """Normal draws pushed at least ``margin`` away from the rectifier kink."""
    u = rng.normal(size=shape)
    return np.sign(u) * (margin + np.abs(u))


def run_gradient_suite(n_seeds=20, base_seed=0):
    """Finite-difference check of every layer type over several seeds.

    Returns {check_name: {"worst": float, "tol": float, "ok": bool}}.
    Convolution and linear layers are held to 1e-5, the rest to 1e-4.
    """
    from .layers import (AvgPool3D, BatchNorm3D, Conv3D, GlobalAvgPool,
                         Linear, MaxPool3D, Parallel, ReLU, Sequential)

    f64 = np.float64

    def cases(rng):
        yield ("conv3d", 1e-5,
               Conv3D(2, 3, (3, 3, 3), rng, dtype=f64),
               rng.normal(size=(2, 4, 5, 6, 2)))
        yield ("conv3d_flat", 1e-5,
               Conv3D(2, 2, (5, 3, 1), rng, dtype=f64),
               rng.normal(size=(2, 6, 5, 1, 2)))
        yield ("linear", 1e-5,
               Linear(7, 3, rng, dtype=f64),
               rng.normal(size=(4, 7)))
        yield ("relu", 1e-4, ReLU(),
               _away_from_zero((2, 3, 3, 4, 2), rng))
        yield ("batchnorm", 1e-4, BatchNorm3D(3, dtype=f64),
               rng.normal(size=(3, 2, 3, 2, 3)) * 2.0 + 0.5)
        yield ("maxpool", 1e-4, MaxPool3D((2, 2, 2)),
               distinct_values((2, 4, 4, 4, 2), rng))
        yield ("maxpool_overlap", 1e-4, MaxPool3D((2, 2, 2), stride=(1, 2, 1)),
               distinct_values((2, 4, 4, 4, 2), rng))
        yield ("avgpool", 1e-4, AvgPool3D((2, 2, 2)),
               rng.normal(size=(2, 4, 4, 4, 2)))
        yield ("avgpool_padded", 1e-4,
               AvgPool3D((3, 3, 3), stride=(1, 1, 1), pad=True),
               rng.normal(size=(2, 3, 4, 3, 2)))
        yield ("global_avgpool", 1e-4, GlobalAvgPool(),
               rng.normal(size=(3, 2, 3, 4, 2)))
        yield ("conv_bn_chain", 1e-4,
               Sequential([Conv3D(2, 3, (3, 3, 3), rng, dtype=f64),
                           BatchNorm3D(3, dtype=f64)]),
               rng.normal(size=(2, 4, 4, 4, 2)))
        yield ("branch_concat", 1e-4,
               Parallel([Sequential([Conv3D(2, 2, (3, 3, 3), rng, dtype=f64)]),
                         Sequential([Conv3D(2, 3, (1, 1, 1), rng, dtype=f64)])]),
               rng.normal(size=(2, 3, 3, 3, 2)))
        yield ("mini_cnn", 1e-4,
               Sequential([Conv3D(1, 2, (3, 3, 3), rng, dtype=f64),
                           BatchNorm3D(2, dtype=f64),
                           ReLU(),
                           MaxPool3D((1, 1, 2)),
                           Conv3D(2, 2, (3, 3, 3), rng, dtype=f64),
                           ReLU(),
                           GlobalAvgPool(),
                           Linear(2, 3, rng, dtype=f64)]),
               distinct_values((2, 5, 5, 6, 1), rng))

    results = {}
    for seed in range(n_seeds):
        rng = np.random.default_rng([base_seed, seed])
        for name, tol, layer, x in cases(rng):
            worst = check_layer_gradients(layer, x, rng)
            entry = results.setdefault(name, {"worst": 0.0, "tol": tol})
            entry["worst"] = max(entry["worst"], worst)
    for entry in results.values():
        entry["ok"] = entry["worst"] <= entry["tol"]
    return results
