"""Class prototypes: masked feature centroids per organ.

A prototype is a ``C x CH`` matrix whose row ``k - 1`` is the mean feature
vector of organ ``k``, plus a presence flag per organ.  The teacher's
dataset-level prototype averages per-slice centroids over the slices of a
normalized z-window of every training volume; student prototypes are
built per sample, inside the autodiff graph, during distillation.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._binary import Reader, Writer, check_magic
from .exceptions import FormatError, ShapeError
from .models import forward

PROTO_MAGIC = b"PROTO1\0\0"
DEFAULT_WINDOW = (0.35, 0.65)


@dataclass
class Prototype:
    matrix: np.ndarray  # C x CH
    present: np.ndarray  # bool, C
    window: tuple = DEFAULT_WINDOW
    counts: np.ndarray = None  # slices contributing per class
    source: str = ""
    config_hash: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        self.present = np.asarray(self.present, dtype=bool)
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1 or self.matrix.shape[1] < 2:
            raise ShapeError(f"prototype matrix must be C x CH with CH >= 2, got {self.matrix.shape}")
        if self.present.shape != (self.matrix.shape[0],):
            raise ShapeError("presence mask length must equal the class count")
        if np.any(self.matrix[~self.present] != 0):
            raise ValueError("rows of absent classes must be zero")
        if self.counts is None:
            self.counts = self.present.astype(np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        self.window = tuple(float(v) for v in self.window)

    @property
    def n_classes(self):
        return self.matrix.shape[0]

    @property
    def n_channels(self):
        return self.matrix.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Prototype):
            return NotImplemented
        return (
            np.array_equal(self.matrix, other.matrix)
            and np.array_equal(self.present, other.present)
            and np.array_equal(self.counts, other.counts)
            and self.window == other.window
            and self.source == other.source
            and self.config_hash == other.config_hash
        )


def slice_centroids(features, labels, n_classes=None):
    """Per-organ mean feature vectors of one slice.

    ``features`` is ``CH x H x W`` and ``labels`` ``H x W`` with values in
    ``0..C``.  Returns ``(Z, present)``; background never gets a row.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != labels.ndim + 1 or features.shape[1:] != labels.shape:
        raise ShapeError(f"features {features.shape} do not match labels {labels.shape}")
    if n_classes is None:
        n_classes = features.shape[0] - 1
    if labels.size and (labels.min() < 0 or labels.max() > n_classes):
        raise ValueError(f"labels must lie in 0..{n_classes}")
    z = np.zeros((n_classes, features.shape[0]))
    present = np.zeros(n_classes, dtype=bool)
    for k in range(1, n_classes + 1):
        mask = labels == k
        if mask.any():
            z[k - 1] = ad.masked_mean(features, mask).value
            present[k - 1] = True
    return z, present


def sample_prototype(logits, labels, n_classes):
    """Differentiable prototype of one sample.

    ``logits`` is a ``CH x spatial`` Node.  Returns ``(rows, present)``
    where ``rows`` stacks the centroids of the present classes only (in
    class order), or ``None`` if no organ is labeled.
    """
    labels = np.asarray(labels)
    rows, present = [], np.zeros(n_classes, dtype=bool)
    for k in range(1, n_classes + 1):
        mask = labels == k
        if mask.any():
            rows.append(ad.masked_mean(logits, mask))
            present[k - 1] = True
    if not rows:
        return None, present
    return ad.stack(rows), present


def crop_region(depth, window):
    """Half-open slice index range ``[floor(lo*D), ceil(hi*D))`` of a window."""
    lo, hi = window
    if not 0 <= lo < hi <= 1:
        raise ValueError(f"crop window must satisfy 0 <= lo < hi <= 1, got {window}")
    return range(int(math.floor(lo * depth)), int(math.ceil(hi * depth)))


def dataset_prototype(teacher, volumes, window=DEFAULT_WINDOW, source="teacher3d"):
    """Unweighted mean of per-slice centroids over all cropped slices.

    Slices are reduced in (volume seed, z) order so the result does not
    depend on the order ``volumes`` is given in.
    """
    if teacher.arch != "teacher3d":
        raise ValueError(f"prototype extraction needs a teacher3d network, got {teacher.arch}")
    if not volumes:
        raise ValueError("need at least one volume")
    keyed = sorted(
        ((v.meta.get("seed", i), i) for i, v in enumerate(volumes)),
    )
    c, ch = teacher.n_classes, teacher.n_channels
    total = np.zeros((c, ch))
    counts = np.zeros(c, dtype=np.int64)
    for _, i in keyed:
        vol = volumes[i]
        feats = forward(teacher, vol.image[None]).value[0]
        for z in crop_region(vol.labels.shape[0], window):
            zk, present = slice_centroids(feats[:, z], vol.labels[z], c)
            total[present] += zk[present]
            counts += present
    present = counts > 0
    if not present.any():
        raise ValueError("no organ found inside the crop window of any volume")
    matrix = np.zeros((c, ch))
    matrix[present] = total[present] / counts[present, None]
    return Prototype(matrix, present, tuple(window), counts, source, teacher.config_hash)


# --------------------------------------------------------------------------
# file format


def prototype_bytes(proto):
    c, ch = proto.matrix.shape
    w = Writer()
    w.raw(PROTO_MAGIC)
    w.u32(c, ch)
    w.raw(np.packbits(proto.present, bitorder="little").tobytes())
    w.array(proto.matrix)
    w.f64(*proto.window)
    w.u32(*[int(n) for n in proto.counts])
    w.text(proto.source)
    w.digest(proto.config_hash)
    return w.getvalue()


def prototype_from_bytes(data, what="prototype"):
    r = Reader(data, what)
    check_magic(r, PROTO_MAGIC, version_index=5)
    c, ch = r.u32(2)
    if c < 1 or ch < 2:
        raise FormatError(f"{what}: invalid dimensions C={c}, CH={ch}")
    bits = np.frombuffer(r.raw((c + 7) // 8), dtype=np.uint8)
    present = np.unpackbits(bits, bitorder="little")[:c].astype(bool)
    matrix = r.array((c, ch))
    window = r.f64(2)
    counts = np.array(r.u32(c) if c > 1 else [r.u32()], dtype=np.int64)
    source = r.text()
    config_hash = r.digest()
    r.finish()
    try:
        return Prototype(matrix, present, window, counts, source, config_hash)
    except (ShapeError, ValueError) as exc:
        raise FormatError(f"{what}: inconsistent contents ({exc})") from exc


def save_prototype(proto, path):
    with open(path, "wb") as fh:
        fh.write(prototype_bytes(proto))


def load_prototype(path):
    with open(path, "rb") as fh:
        return prototype_from_bytes(fh.read(), what=str(path))
