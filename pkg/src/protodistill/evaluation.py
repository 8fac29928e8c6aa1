"""Dice scores, the Wilcoxon signed-rank test and run comparison reports."""

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .exceptions import InsufficientPairsError, ShapeError
from .models import infer, predict_labels

ORGAN_NAMES = ("Liver", "Spleen", "RKidney", "LKidney", "Aorta", "Stomach")
MIN_PAIRS = 6
EXACT_MAX_N = 25


def dsc(pred, truth, k):
    """Dice of class ``k``; ``None`` when ``truth`` has no pixel of ``k``."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"dsc: prediction {pred.shape} vs truth {truth.shape}")
    a = pred == k
    b = truth == k
    nb = np.count_nonzero(b)
    if nb == 0:
        return None
    return 2.0 * np.count_nonzero(a & b) / (np.count_nonzero(a) + nb)


# --------------------------------------------------------------------------
# Wilcoxon signed-rank


def average_ranks(values):
    """1-based ranks, ties sharing the mean of the ranks they span."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_statistic(a, b):
    """``(W+, ranks)`` after dropping zero differences."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if d.ndim != 1:
        raise ShapeError("paired samples must be 1-d")
    d = d[d != 0]
    ranks = average_ranks(np.abs(d))
    return ranks[d > 0].sum(), ranks


def _exact_pvalue(w_plus, ranks):
    # doubled ranks are integers even with ties (average ranks are k/2)
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    w2 = int(round(2 * w_plus))
    n_assign = 2 ** len(ranks)
    lower = sum(counts[: w2 + 1])
    upper = sum(counts[w2:])
    return min(1.0, 2 * min(lower, upper) / n_assign)


def _normal_pvalue(w_plus, ranks):
    n = len(ranks)
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts**3 - tie_counts) / 48.0
    if var <= 0:
        return 1.0
    diff = abs(w_plus - mean)
    z = max(diff - 0.5, 0.0) / math.sqrt(var)  # continuity correction
    return min(1.0, math.erfc(z / math.sqrt(2.0)))


def wilcoxon_signed_rank(a, b, method="auto"):
    """Two-sided p-value of the paired signed-rank test.

    Zero differences are dropped.  ``method='auto'`` uses the exact null
    distribution up to n = 25 and the tie-corrected normal approximation
    above.  Raises :class:`InsufficientPairsError` for fewer than 6 pairs.
    """
    if len(a) != len(b):
        raise ShapeError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    w_plus, ranks = signed_rank_statistic(a, b)
    n = len(ranks)
    if n < MIN_PAIRS:
        raise InsufficientPairsError(f"{n} non-zero differences; need at least {MIN_PAIRS}")
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        return _exact_pvalue(w_plus, ranks)
    if method == "normal":
        return _normal_pvalue(w_plus, ranks)
    raise ValueError(f"unknown method {method!r}")


# --------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    """Per-item DSC (``None`` for classes absent from the ground truth)."""

    item_ids: list
    per_class: list  # [item][class] -> float | None
    meta: dict = field(default_factory=dict)

    @property
    def n_classes(self):
        return len(self.per_class[0]) if self.per_class else 0

    def item_means(self):
        out = []
        for row in self.per_class:
            vals = [v for v in row if v is not None]
            out.append(float(np.mean(vals)) if vals else None)
        return out

    def class_means(self):
        cols = []
        for k in range(self.n_classes):
            vals = [row[k] for row in self.per_class if row[k] is not None]
            cols.append(float(np.mean(vals)) if vals else None)
        return cols

    def mean_dsc(self):
        vals = [v for v in self.item_means() if v is not None]
        return float(np.mean(vals)) if vals else 0.0

    def to_dict(self):
        return {
            "item_ids": list(self.item_ids),
            "per_class": self.per_class,
            "item_means": self.item_means(),
            "class_means": self.class_means(),
            "mean_dsc": self.mean_dsc(),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["item_ids"], d["per_class"], d.get("meta", {}))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def score_labels(preds, truths, n_classes, item_ids=None, meta=None):
    per_class = [
        [dsc(p, t, k) for k in range(1, n_classes + 1)] for p, t in zip(preds, truths)
    ]
    if item_ids is None:
        item_ids = list(range(len(per_class)))
    return EvalReport(list(item_ids), per_class, dict(meta or {}))


def evaluate(params, items, meta=None):
    """Score a network on labeled items (volumes or slices)."""
    if not items:
        return EvalReport([], [], dict(meta or {}))
    images = np.stack([it.image for it in items])
    preds = predict_labels(infer(params, images, batch_size=8 if params.dims == 2 else 1))
    ids = [it.meta.get("seed", i) for i, it in enumerate(items)]
    return score_labels(preds, [it.labels for it in items], params.n_classes, ids, meta)


@dataclass
class Comparison:
    class_names: list
    baseline: list  # class means, then overall mean last
    distilled: list
    deltas: list
    p_value: float = None
    note: str = ""

    def to_dict(self):
        return asdict(self)

    def table(self, labels=("Baseline", "Distilled")):
        names = list(self.class_names) + ["Avg"]
        width = max(10, max(len(n) for n in names) + 2)
        row_head = max(12, max(len(l) for l in labels) + 2, len("Delta") + 2)

        def fmt(v, signed=False):
            if v is None:
                return "-".rjust(width)
            return (f"{v:+.4f}" if signed else f"{v:.4f}").rjust(width)

        lines = ["Methods".ljust(row_head) + "|" + "".join(n.rjust(width) for n in names)]
        lines.append("-" * len(lines[0]))
        lines.append(labels[0].ljust(row_head) + "|" + "".join(fmt(v) for v in self.baseline))
        lines.append(labels[1].ljust(row_head) + "|" + "".join(fmt(v) for v in self.distilled))
        lines.append("Delta".ljust(row_head) + "|" + "".join(fmt(v, True) for v in self.deltas))
        if self.p_value is None:
            lines.append(f"Wilcoxon signed-rank (per-item mean DSC): n/a ({self.note})")
        else:
            lines.append(f"Wilcoxon signed-rank (per-item mean DSC): p = {self.p_value:.6g}")
        return "\n".join(lines) + "\n"


def compare_runs(baseline, distilled, class_names=None):
    """Per-class and mean DSC deltas plus a paired test on per-item means."""
    if list(baseline.item_ids) != list(distilled.item_ids):
        raise ValueError("reports cover different items (or a different order)")
    c = baseline.n_classes
    if class_names is None:
        class_names = list(ORGAN_NAMES[:c]) if c <= len(ORGAN_NAMES) else [f"C{k}" for k in range(1, c + 1)]
    base = baseline.class_means() + [baseline.mean_dsc()]
    dist = distilled.class_means() + [distilled.mean_dsc()]
    deltas = [None if a is None or b is None else b - a for a, b in zip(base, dist)]
    pairs = [
        (x, y)
        for x, y in zip(baseline.item_means(), distilled.item_means())
        if x is not None and y is not None
    ]
    p, note = None, ""
    try:
        p = wilcoxon_signed_rank([y for _, y in pairs], [x for x, _ in pairs])
    except InsufficientPairsError as exc:
        note = f"insufficient pairs: {exc}"
    return Comparison(list(class_names), base, dist, deltas, p, note)
