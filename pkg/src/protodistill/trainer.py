"""Training loops for the teacher, the student and distillation.

All three phases share one loop: seeded per-epoch shuffling, Adam updates,
validation Dice after every epoch and best-on-validation checkpoint
selection (the untouched initialization counts as epoch 0; ties keep the
earlier epoch).
"""

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .evaluation import evaluate
from .exceptions import TrainingError
from .losses import INTER_MODES, LossWeights, loss_terms
from .models import forward, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    teacher_epochs: int = 60
    student_epochs: int = 60
    distill_epochs: int = 100
    batch_size: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    inter_mode: str = "channel"

    def __post_init__(self):
        for name in ("teacher_epochs", "student_epochs", "distill_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.inter_mode not in INTER_MODES:
            raise ValueError(f"inter_mode must be one of {INTER_MODES}")


class Adam:
    """Adam over a list of parameter Nodes (values are replaced, not mutated)."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            new = p.value - update
            new.setflags(write=False)
            p.value = new

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class FitResult:
    params: object
    best_epoch: int
    best_val_dsc: float
    history: list  # one record per epoch


def _usable(items):
    """Drop items without organ pixels: they cannot form a prototype."""
    kept = [it for it in items if np.any(it.labels)]
    if len(kept) < len(items):
        log.warning("dropped %d items without organ pixels", len(items) - len(kept))
    return kept


def fit(params, train, val, epochs, config, phase, loss_fn, seed=None):
    """Generic loop; ``loss_fn(logits, labels) -> (Node, parts)``."""
    train = _usable(train)
    if not train:
        raise ValueError(f"{phase}: no usable training items")
    params = params.copy()
    batch_size = 1 if params.dims == 3 else config.batch_size
    rng = np.random.default_rng(config.seed if seed is None else seed)
    opt = Adam(params.nodes(), config.lr, config.beta1, config.beta2, config.eps)

    def val_score():
        return evaluate(params, val) if val else None

    report = val_score()
    best_dsc = report.mean_dsc() if report else -math.inf
    best, best_epoch = params.copy(), 0
    history = [_record(phase, 0, {}, report)]
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        sums, n_batches = {}, 0
        for start in range(0, len(order), batch_size):
            batch = [train[i] for i in order[start:start + batch_size]]
            images = np.stack([it.image for it in batch])
            labels = np.stack([it.labels for it in batch])
            opt.zero_grad()
            logits = forward(params, images)
            loss, parts = loss_fn(logits, labels)
            if not np.isfinite(loss.value):
                raise TrainingError(f"{phase}: non-finite loss at epoch {epoch} (lr={config.lr})")
            ad.backward(loss)
            opt.step()
            parts = dict(parts, total=float(loss.value))
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        report = val_score()
        history.append(_record(phase, epoch, {k: v / n_batches for k, v in sums.items()}, report))
        if report is not None and report.mean_dsc() > best_dsc:
            best_dsc, best, best_epoch = report.mean_dsc(), params.copy(), epoch
    if not val:
        best, best_epoch, best_dsc = params.copy(), epochs, float("nan")
    log.info("%s: best epoch %d (val DSC %.4f)", phase, best_epoch, best_dsc)
    best.config_hash = params.config_hash
    return FitResult(best, best_epoch, best_dsc, history)


def _record(phase, epoch, losses, report):
    rec = {"phase": phase, "epoch": epoch, "loss": losses}
    if report is not None:
        rec["val_dsc"] = report.mean_dsc()
        rec["val_dsc_per_class"] = report.class_means()
    return rec


def _seg_only(weights):
    def loss_fn(logits, labels):
        return loss_terms(logits, labels, None, weights)

    return loss_fn


def train_teacher(config, volumes, val_volumes=(), n_classes=None, init=None):
    """Segmentation training of the 3D teacher, one volume per step."""
    if not volumes:
        raise ValueError("need at least one training volume")
    if init is None:
        n_classes = n_classes or int(max(v.labels.max() for v in volumes))
        init = init_params("teacher3d", n_classes, config.seed)
    return fit(init, list(volumes), list(val_volumes), config.teacher_epochs, config,
               "teacher", _seg_only(config.weights))


def pretrain_student(config, slices, val_slices=(), n_classes=None, init=None):
    """Segmentation pretraining of the 2D student; its best checkpoint seeds distillation."""
    if not slices:
        raise ValueError("need at least one training slice")
    if init is None:
        n_classes = n_classes or int(max(s.labels.max() for s in slices))
        init = init_params("student2d", n_classes, config.seed)
    return fit(init, list(slices), list(val_slices), config.student_epochs, config,
               "student", _seg_only(config.weights))


def continue_training(config, student_init, slices, val_slices=()):
    """Plain segmentation training from ``student_init`` for the distillation budget."""
    return fit(student_init, list(slices), list(val_slices), config.distill_epochs, config,
               "continue", _seg_only(config.weights), seed=config.seed + 1)


def distill(config, student_init, prototype, slices, val_slices=()):
    """Train the student on ``L_seg + beta * L_DIST`` against a fixed prototype.

    Only the prototype crosses over from the teacher side; no volume is read.
    """
    if np.count_nonzero(prototype.present) < 2:
        raise ValueError("prototype needs at least 2 present classes for the inter-class loss")
    if prototype.n_classes != student_init.n_classes or prototype.n_channels != student_init.n_channels:
        raise ValueError(
            f"prototype is {prototype.n_classes}x{prototype.n_channels} but the student has "
            f"{student_init.n_classes} classes / {student_init.n_channels} channels"
        )
    weights, mode = config.weights, config.inter_mode

    def loss_fn(logits, labels):
        return loss_terms(logits, labels, prototype, weights, student_init.n_classes, mode)

    return fit(student_init, list(slices), list(val_slices), config.distill_epochs, config,
               "distill", loss_fn, seed=config.seed + 1)


def write_metrics(history, path):
    """Line-delimited JSON, one record per epoch."""
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_metrics(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
