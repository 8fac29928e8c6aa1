"""Fast property checks runnable from the command line (``protodistill selftest``)."""

import itertools

import numpy as np

from . import autodiff as ad
from .evaluation import dsc, signed_rank_statistic, wilcoxon_signed_rank
from .exceptions import DegenerateVectorError, InsufficientPairsError
from .gradcheck import check_gradients, composite_error
from .prototype import slice_centroids

GRAD_TOL = 1e-4


def _op_gradients():
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 3, size=(2, 5, 5))
    mask = rng.random(6) < 0.6
    mask[0] = True
    target = rng.normal(size=7)
    cases = {
        "conv2d": (lambda x, w, b: ad.sum_all(ad.mul(ad.conv(x, w, b, 2), ad.conv(x, w, b, 2))),
                   [rng.normal(size=(2, 2, 5, 5)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]),
        "relu": (lambda x: ad.sum_all(ad.mul(ad.relu(x), x)), [rng.normal(size=(4, 5)) + 0.05]),
        "masked_mean": (lambda f: ad.sum_all(ad.mul(ad.masked_mean(f, mask), ad.masked_mean(f, mask))),
                        [rng.normal(size=(3, 6))]),
        "pearson": (lambda x: ad.pearson_distance(x, target), [rng.normal(size=7)]),
        "cross_entropy": (lambda z: ad.softmax_cross_entropy(z, labels), [rng.normal(size=(2, 3, 5, 5))]),
        "soft_dice": (lambda z: ad.soft_dice_loss(z, labels), [rng.normal(size=(2, 3, 5, 5))]),
    }
    return max(check_gradients(fn, arrays) for fn, arrays in cases.values())


def _composite():
    return max(composite_error(seed) for seed in range(20))


def _pearson_metamorphic():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        x, y = rng.normal(size=8), rng.normal(size=8)
        a, b = rng.uniform(0.1, 10), rng.normal() * 5
        d = lambda u, v: float(ad.pearson_distance(ad.Node(u), ad.Node(v)).value)  # noqa: E731
        worst = max(worst, d(x, x) / 1e-10, abs(d(x, -x) - 2) / 1e-10, abs(d(a * x + b, y) - d(x, y)) / 1e-8)
    try:
        ad.pearson_distance(ad.Node(np.ones(5)), ad.Node(np.arange(5.0)))
    except DegenerateVectorError:
        return worst < 1
    return False


def _centroid_oracle():
    rng = np.random.default_rng(2)
    feats = rng.normal(size=(3, 4, 5))
    labels = rng.integers(0, 3, size=(4, 5))
    rows, present = slice_centroids(feats, labels, 2)
    for k in range(1, 3):
        pix = [feats[:, i, j] for i in range(4) for j in range(5) if labels[i, j] == k]
        if bool(pix) != bool(present[k - 1]):
            return False
        if pix and np.max(np.abs(rows[k - 1] - sum(pix) / len(pix))) > 1e-12:
            return False
    return True


def _dsc_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        p, t = rng.integers(0, 3, size=(6, 6)), rng.integers(0, 3, size=(6, 6))
        a = {i for i, v in enumerate(p.ravel()) if v == 1}
        b = {i for i, v in enumerate(t.ravel()) if v == 1}
        ref = 2 * len(a & b) / (len(a) + len(b)) if b else None
        got = dsc(p, t, 1)
        if (ref is None) != (got is None) or (ref is not None and abs(ref - got) > 1e-12):
            return False
        if a and b and got != dsc(t, p, 1):
            return False
    return True


def _wilcoxon_oracle():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=10), rng.normal(size=10)
    w, ranks = signed_rank_statistic(a, b)
    ranks = np.asarray(ranks)
    total = ranks.sum()
    stats = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product((0, 1), repeat=len(ranks))]
    stats = np.array(stats)
    tail = min(np.sum(stats <= w + 1e-9), np.sum(stats >= w - 1e-9))
    ref = min(1.0, 2 * tail / len(stats))
    shift = wilcoxon_signed_rank(b + 1, b, method="exact")
    try:
        wilcoxon_signed_rank(a, a)
        return False
    except InsufficientPairsError:
        pass
    return abs(wilcoxon_signed_rank(a, b, method="exact") - ref) < 1e-12 and shift == 2 / 2**10 and total > 0


CHECKS = (
    ("op gradients vs finite differences", lambda: _op_gradients() < GRAD_TOL),
    ("composite objective gradient (20 seeds)", lambda: _composite() < GRAD_TOL),
    ("pearson distance metamorphic relations", _pearson_metamorphic),
    ("slice centroids vs per-pixel mean", _centroid_oracle),
    ("DSC vs set-intersection count", _dsc_oracle),
    ("Wilcoxon exact vs sign enumeration", _wilcoxon_oracle),
)


def run(stream=None):
    """Print one ``PASS``/``FAIL`` line per property; return True if all pass."""
    ok = True
    for name, check in CHECKS:
        try:
            passed = bool(check())
            detail = ""
        except Exception as exc:  # a crashing check is a failing check
            passed, detail = False, f" ({type(exc).__name__}: {exc})"
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}{detail}", file=stream, flush=True)
    return ok
