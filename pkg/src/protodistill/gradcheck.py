"""Central finite-difference gradient checking."""

import numpy as np

from . import autodiff as ad


def numerical_grad(fn, arrays, wrt, h=1e-5):
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[wrt]``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    base = arrays[wrt]
    grad = np.zeros(base.shape)
    it = np.nditer(base, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = base[idx]
        base[idx] = orig + h
        fp = float(fn(*arrays))
        base[idx] = orig - h
        fm = float(fn(*arrays))
        base[idx] = orig
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(build, arrays):
    """Gradients of ``build(*nodes)`` (a scalar Node) for every input array."""
    nodes = [ad.Node(a) for a in arrays]
    ad.backward(build(*nodes))
    return [n.grad for n in nodes]


def relative_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_gradients(build, arrays, h=1e-5, floor=1e-6):
    """Largest relative error between analytic and numeric gradients."""

    def value(*arrs):
        return build(*[ad.Node(a) for a in arrs]).value

    worst = 0.0
    for i, g in enumerate(analytic_grads(build, arrays)):
        worst = max(worst, relative_error(g, numerical_grad(value, arrays, i, h), floor))
    return worst


def composite_error(seed, n_classes=3, shape=(8, 8), batch=2, n_coords=40, h=1e-5, floor=1e-6):
    """Check the full distillation objective through a student network.

    Gradients w.r.t. ``n_coords`` randomly chosen parameter entries are
    compared against central differences; returns the largest relative error.
    """
    from .losses import LossWeights, loss_terms
    from .models import forward, init_params
    from .prototype import Prototype

    rng = np.random.default_rng(seed)
    params = init_params("student2d", n_classes, seed)
    images = rng.normal(size=(batch, 1) + tuple(shape))
    labels = rng.integers(0, n_classes + 1, size=(batch,) + tuple(shape))
    ch = n_classes + 1
    teacher = Prototype(rng.normal(size=(n_classes, ch)), np.ones(n_classes, dtype=bool))
    weights = LossWeights(beta=0.5)

    def loss_value(arrays):
        p = params.with_arrays(arrays)
        loss, _ = loss_terms(forward(p, images), labels, teacher, weights, n_classes)
        return loss

    arrays = [a.copy() for a in params.arrays()]
    p = params.with_arrays(arrays)
    loss, _ = loss_terms(forward(p, images), labels, teacher, weights, n_classes)
    ad.backward(loss)
    grads = [n.grad for n in p.nodes()]

    sizes = [a.size for a in arrays]
    picks = rng.choice(sum(sizes), size=min(n_coords, sum(sizes)), replace=False)
    offsets = np.cumsum([0] + sizes)
    analytic, numeric = [], []
    for flat in picks:
        i = int(np.searchsorted(offsets, flat, side="right") - 1)
        idx = np.unravel_index(flat - offsets[i], arrays[i].shape)
        vals = []
        for step in (h, -h):
            moved = [a.copy() for a in arrays]
            moved[i][idx] += step
            vals.append(float(loss_value(moved).value))
        numeric.append((vals[0] - vals[1]) / (2 * h))
        analytic.append(grads[i][idx])
    return relative_error(np.array(analytic), np.array(numeric), floor)
