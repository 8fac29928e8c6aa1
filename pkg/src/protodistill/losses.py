"""Segmentation loss and the prototype correlation (DIST-style) losses.

Student prototypes are matched to the teacher's dataset prototype through
Pearson distance ``d(x, y) = 1 - rho(x, y)``:

* inter-class: for every channel, correlate the class-axis column of the
  student matrix with the teacher's column;
* intra-class: for every class, correlate the channel vector (row).

Only classes present in both the sample and the teacher prototype take
part; samples or terms that cannot be formed are skipped and the means
renormalized over what remains.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .exceptions import DegenerateVectorError
from .prototype import sample_prototype

log = logging.getLogger(__name__)

INTER_MODES = ("channel", "flat")


@dataclass(frozen=True)
class LossWeights:
    beta: float = 0.5
    lambda_dice: float = 1.0
    lambda_ce: float = 1.0

    def __post_init__(self):
        for name in ("beta", "lambda_dice", "lambda_ce"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class BatchPrototypes:
    """Per-sample student prototypes: stacked rows of present classes + mask."""

    rows: list
    present: list

    @property
    def size(self):
        return len(self.rows)


def batch_prototypes(logits, labels, n_classes):
    """Build student prototypes for every sample of a ``B x CH x spatial`` batch.

    Samples without any organ pixel cannot form a prototype and are dropped.
    """
    labels = np.asarray(labels)
    rows, present = [], []
    for i in range(logits.shape[0]):
        r, p = sample_prototype(ad.take(logits, i), labels[i], n_classes)
        if r is not None:
            rows.append(r)
            present.append(p)
    return BatchPrototypes(rows, present)


def pearson_distance(x, y):
    """``1 - rho(x, y)``; see :func:`protodistill.autodiff.pearson_distance`."""
    return ad.pearson_distance(x, y)


def skipped():
    """The zero loss returned when no sample can contribute."""
    return ad.Node(0.0, op="skipped")


def is_skipped(node):
    return node.op == "skipped"


def _mean(nodes):
    if len(nodes) == 1:
        return nodes[0]
    return ad.scale(ad.sum_all(ad.stack(nodes)), 1.0 / len(nodes))


def _joint(rows, present, teacher):
    """Student rows and teacher rows restricted to jointly present classes."""
    joint = present & teacher.present
    # rows only holds the student-present classes, in class order
    positions = np.cumsum(present) - 1
    idx = positions[joint]
    return ad.take(rows, idx), teacher.matrix[joint]


def _sample_inter(student, teacher_rows, mode):
    if mode == "flat":
        try:
            return ad.pearson_distance(ad.reshape(student, (-1,)), teacher_rows.reshape(-1))
        except DegenerateVectorError:
            return None
    terms = []
    for j in range(teacher_rows.shape[1]):
        try:
            terms.append(ad.pearson_distance(ad.take(student, (slice(None), j)), teacher_rows[:, j]))
        except DegenerateVectorError:
            continue
    return _mean(terms) if terms else None


def inter_class_loss(batch, teacher, mode="channel"):
    """Mean over samples of the per-channel class-axis Pearson distance."""
    if mode not in INTER_MODES:
        raise ValueError(f"inter mode must be one of {INTER_MODES}, got {mode!r}")
    per_sample = []
    for rows, present in zip(batch.rows, batch.present):
        if np.count_nonzero(present & teacher.present) < 2:
            continue
        student, teacher_rows = _joint(rows, present, teacher)
        term = _sample_inter(student, teacher_rows, mode)
        if term is not None:
            per_sample.append(term)
    if not per_sample:
        log.info("inter-class loss skipped: no sample has two jointly present classes")
        return skipped()
    return _mean(per_sample)


def intra_class_loss(batch, teacher):
    """Mean over samples of the per-class channel-axis Pearson distance."""
    per_sample = []
    for rows, present in zip(batch.rows, batch.present):
        if not np.any(present & teacher.present):
            continue
        student, teacher_rows = _joint(rows, present, teacher)
        terms = []
        for k in range(teacher_rows.shape[0]):
            try:
                terms.append(ad.pearson_distance(ad.take(student, k), teacher_rows[k]))
            except DegenerateVectorError:
                continue
        if terms:
            per_sample.append(_mean(terms))
    if not per_sample:
        log.info("intra-class loss skipped: no jointly present class")
        return skipped()
    return _mean(per_sample)


def dist_loss(batch, teacher, mode="channel"):
    inter = inter_class_loss(batch, teacher, mode)
    intra = intra_class_loss(batch, teacher)
    if is_skipped(inter) and is_skipped(intra):
        return skipped()
    return ad.add(inter, intra)


def seg_loss(logits, labels, weights=LossWeights()):
    """``lambda_ce * CE + lambda_dice * (1 - soft Dice)``."""
    ce = ad.softmax_cross_entropy(logits, labels)
    dice = ad.soft_dice_loss(logits, labels)
    return ad.add(ad.scale(ce, weights.lambda_ce), ad.scale(dice, weights.lambda_dice))


def loss_terms(logits, labels, teacher, weights=LossWeights(), n_classes=None, mode="channel"):
    """Total objective and a dict of its scalar parts, for logging."""
    seg = seg_loss(logits, labels, weights)
    parts = {"seg": float(seg.value)}
    if weights.beta == 0 or teacher is None:
        return seg, parts
    if n_classes is None:
        n_classes = teacher.n_classes
    batch = batch_prototypes(logits, labels, n_classes)
    inter = inter_class_loss(batch, teacher, mode)
    intra = intra_class_loss(batch, teacher)
    parts["inter"] = float(inter.value)
    parts["intra"] = float(intra.value)
    if is_skipped(inter) and is_skipped(intra):
        return seg, parts
    dist = ad.add(inter, intra)
    parts["dist"] = float(dist.value)
    return ad.add(seg, ad.scale(dist, weights.beta)), parts


def total_loss(logits, labels, batch, teacher, weights=LossWeights(), mode="channel"):
    """``L_seg + beta * L_DIST``; with ``beta == 0`` this is exactly ``seg_loss``."""
    seg = seg_loss(logits, labels, weights)
    if weights.beta == 0:
        return seg
    dist = dist_loss(batch, teacher, mode)
    if is_skipped(dist):
        return seg
    return ad.add(seg, ad.scale(dist, weights.beta))
