"""Deterministic synthetic "phantom CT" data.

Every item is a set of axis-aligned ellipsoids (one per organ class) with
seeded jitter of centers and radii, class-dependent base intensities and
Gaussian noise.  3D volumes feed the teacher; the student gets single
planes cut from *independent* phantoms, so the two never share a subject.
"""

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ._binary import Reader, Writer, check_magic
from .exceptions import FormatError

# canonical organs in normalized (z, y, x) coordinates: (center, radii)
CANONICAL_ORGANS = (
    ((0.50, 0.38, 0.30), (0.30, 0.17, 0.16)),  # 1 liver-like, large
    ((0.56, 0.38, 0.72), (0.18, 0.12, 0.10)),  # 2 spleen-like
    ((0.42, 0.72, 0.32), (0.20, 0.09, 0.08)),  # 3 right kidney-like
    ((0.42, 0.72, 0.68), (0.20, 0.09, 0.08)),  # 4 left kidney-like
    ((0.50, 0.60, 0.50), (0.40, 0.05, 0.05)),  # 5 aorta-like
    ((0.62, 0.18, 0.52), (0.14, 0.08, 0.10)),  # 6 stomach-like
)
MAX_CLASSES = len(CANONICAL_ORGANS)
IMAGE_RANGE = (-1.5, 2.5)
MAX_SLICE_RETRIES = 100

#: item seed = base_seed * SEED_STRIDE + split offset + index, so neither
#: splits nor datasets built from different base seeds share a phantom
SEED_OFFSETS = {
    ("slice", "train"): 0,
    ("slice", "val"): 100_000,
    ("slice", "test"): 200_000,
    ("volume", "train"): 1_000_000,
    ("volume", "val"): 1_100_000,
}
SPLIT_CAPACITY = 100_000
SEED_STRIDE = 2_000_000

PHANTOM_MAGIC = b"PHNT1\0\0\0"
_CONTRASTS = ("plain", "shifted")
_KINDS = ("volume", "slice")

#: callables ``hook(path, kind)`` notified on every item read (I/O audit)
READ_HOOKS = []


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PhantomSpec:
    n_classes: int = 4
    volume_shape: tuple = (24, 48, 48)
    slice_shape: tuple = (48, 48)
    contrast: str = "plain"
    noise_sd: float = 0.05
    jitter: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "volume_shape", tuple(int(v) for v in self.volume_shape))
        object.__setattr__(self, "slice_shape", tuple(int(v) for v in self.slice_shape))
        if not 1 <= self.n_classes <= MAX_CLASSES:
            raise ValueError(f"n_classes must be in [1, {MAX_CLASSES}], got {self.n_classes}")
        if len(self.volume_shape) != 3 or min(self.volume_shape) < 4:
            raise ValueError(f"volume_shape must be 3 sizes >= 4, got {self.volume_shape}")
        if len(self.slice_shape) != 2 or min(self.slice_shape) < 4:
            raise ValueError(f"slice_shape must be 2 sizes >= 4, got {self.slice_shape}")
        if self.contrast not in _CONTRASTS:
            raise ValueError(f"contrast must be one of {_CONTRASTS}, got {self.contrast!r}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be >= 0")
        if not 0 <= self.jitter < 1:
            raise ValueError("jitter must be in [0, 1)")
        for k, (c, r) in enumerate(CANONICAL_ORGANS[: self.n_classes], start=1):
            # worst case after jitter: center moves by jitter*r, radius grows by (1+jitter)
            reach = [r_ * (1 + 2 * self.jitter) for r_ in r]
            if any(ci - re < 0 or ci + re > 1 for ci, re in zip(c, reach)):
                raise ValueError(f"organ {k} leaves the field of view at jitter={self.jitter}")

    def intensity(self, k):
        """Base intensity of class ``k`` (0 = background)."""
        if k == 0:
            return 0.0
        value = 0.2 + 0.15 * k
        if self.contrast == "shifted":
            value += 0.3 if k % 2 == 0 else -0.2
        return value


@dataclass
class LabeledItem:
    """A labeled phantom volume (``1 x D x H x W``) or slice (``1 x H x W``)."""

    image: np.ndarray
    labels: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def kind(self):
        return "volume" if self.labels.ndim == 3 else "slice"


# volumes and slices share one container type
LabeledVolume = LabeledSlice = LabeledItem


def organ_z_range(spec):
    """Normalized z-interval covered by the canonical (unjittered) organs."""
    organs = CANONICAL_ORGANS[: spec.n_classes]
    return min(c[0] - r[0] for c, r in organs), max(c[0] + r[0] for c, r in organs)


def _geometry(spec, rng):
    organs = []
    for c, r in CANONICAL_ORGANS[: spec.n_classes]:
        c, r = np.array(c), np.array(r)
        shift = rng.uniform(-1, 1, size=3) * spec.jitter * r
        stretch = 1 + rng.uniform(-1, 1, size=3) * spec.jitter
        organs.append((c + shift, r * stretch))
    return organs


def _label_planes(spec, organs, depth, plane_shape, z_indices):
    h, w = plane_shape
    zz = (np.asarray(z_indices, dtype=np.float64) + 0.5) / depth
    yy = (np.arange(h) + 0.5) / h
    xx = (np.arange(w) + 0.5) / w
    labels = np.zeros((len(zz), h, w), dtype=np.uint8)
    # increasing class order: higher class id wins overlaps
    for k, (c, r) in enumerate(organs, start=1):
        d = (
            ((zz - c[0]) / r[0])[:, None, None] ** 2
            + ((yy - c[1]) / r[1])[None, :, None] ** 2
            + ((xx - c[2]) / r[2])[None, None, :] ** 2
        )
        labels[d <= 1.0] = k
    return labels


def _render(spec, labels, rng):
    lut = np.array([spec.intensity(k) for k in range(spec.n_classes + 1)])
    image = lut[labels]
    if spec.noise_sd > 0:
        image = image + rng.normal(0.0, spec.noise_sd, size=labels.shape)
    return np.clip(image, *IMAGE_RANGE)


def gen_volume(spec, seed):
    rng = np.random.default_rng(seed)
    organs = _geometry(spec, rng)
    d, h, w = spec.volume_shape
    labels = _label_planes(spec, organs, d, (h, w), range(d))
    image = _render(spec, labels, rng)
    return LabeledItem(image[None], labels, {"seed": int(seed), "contrast": spec.contrast})


def gen_slice(spec, seed):
    """One axial plane of a fresh phantom at a uniformly drawn organ-bearing level."""
    rng = np.random.default_rng(seed)
    organs = _geometry(spec, rng)
    depth = spec.volume_shape[0]
    lo, hi = organ_z_range(spec)
    zlo, zhi = int(np.floor(lo * depth)), int(np.ceil(hi * depth))
    for _ in range(MAX_SLICE_RETRIES):
        z = int(rng.integers(zlo, zhi))
        labels = _label_planes(spec, organs, depth, spec.slice_shape, [z])[0]
        if labels.any():
            image = _render(spec, labels, rng)
            meta = {"seed": int(seed), "z": z, "contrast": spec.contrast}
            return LabeledItem(image[None], labels, meta)
    raise GenerationError(f"seed {seed}: no organ-bearing plane in {MAX_SLICE_RETRIES} draws")


def split_seeds(kind, split, n, base_seed):
    if n < 1:
        raise ValueError(f"{kind}/{split}: count must be >= 1, got {n}")
    if n > SPLIT_CAPACITY:
        raise ValueError(f"{kind}/{split}: at most {SPLIT_CAPACITY} items per split")
    start = base_seed * SEED_STRIDE + SEED_OFFSETS[(kind, split)]
    return list(range(start, start + n))


def make_splits(spec, n_train, n_val, n_test, base_seed):
    """Disjoint train / val / test slice sets (default ratio mirrors 295/117/295)."""
    return {
        split: [gen_slice(spec, s) for s in split_seeds("slice", split, n, base_seed)]
        for split, n in (("train", n_train), ("val", n_val), ("test", n_test))
    }


def make_volume_splits(spec, n_train, n_val, base_seed):
    return {
        split: [gen_volume(spec, s) for s in split_seeds("volume", split, n, base_seed)]
        for split, n in (("train", n_train), ("val", n_val))
    }


# --------------------------------------------------------------------------
# on-disk dataset


def item_bytes(item, spec):
    w = Writer()
    w.raw(PHANTOM_MAGIC)
    w.u32(spec.n_classes)
    w.u8(_CONTRASTS.index(spec.contrast))
    w.f64(spec.noise_sd, spec.jitter)
    w.u32(*spec.volume_shape)
    w.u32(*spec.slice_shape)
    w.u8(_KINDS.index(item.kind))
    w.u32(item.meta["seed"] & 0xFFFFFFFF, item.meta["seed"] >> 32)
    w.u32(item.meta.get("z", 0))
    w.u32(item.labels.ndim)
    w.u32(*item.labels.shape)
    w.array(item.image, "<f8")
    w.array(item.labels, "u1")
    return w.getvalue()


def item_from_bytes(data, what="phantom item"):
    r = Reader(data, what)
    check_magic(r, PHANTOM_MAGIC, version_index=4)
    n_classes = r.u32()
    contrast = _CONTRASTS[r.u8()]
    noise_sd, jitter = r.f64(2)
    spec = PhantomSpec(n_classes, r.u32(3), r.u32(2), contrast, noise_sd, jitter)
    kind = r.u8()
    if kind >= len(_KINDS):
        raise FormatError(f"{what}: unknown item kind {kind}")
    lo, hi = r.u32(2)
    z = r.u32()
    ndim = r.u32()
    shape = tuple(r.u32(ndim))
    image = r.array((1,) + shape, "<f8")
    labels = r.array(shape, "u1")
    r.finish()
    meta = {"seed": lo | (hi << 32), "contrast": contrast}
    if _KINDS[kind] == "slice":
        meta["z"] = z
    return LabeledItem(image, labels, meta), spec


def write_item(path, item, spec):
    with open(path, "wb") as fh:
        fh.write(item_bytes(item, spec))


def read_item(path):
    with open(path, "rb") as fh:
        item, _ = item_from_bytes(fh.read(), what=str(path))
    for hook in READ_HOOKS:
        hook(str(path), item.kind)
    return item


INDEX_NAME = "index.json"


def write_dataset(directory, groups, config_hash=""):
    """Write ``{(kind, split): (spec, items)}`` plus an index file listing them."""
    os.makedirs(directory, exist_ok=True)
    entries, specs = [], {}
    for (kind, split), (spec, items) in groups.items():
        specs[kind] = asdict(spec)
        for i, item in enumerate(items):
            name = f"{kind}_{split}_{i:04d}.phnt"
            write_item(os.path.join(directory, name), item, spec)
            entries.append({"file": name, "kind": kind, "split": split, "seed": item.meta["seed"]})
    index = {"specs": specs, "config_hash": config_hash, "items": entries}
    with open(os.path.join(directory, INDEX_NAME), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return index


def read_index(directory):
    with open(os.path.join(directory, INDEX_NAME)) as fh:
        return json.load(fh)


def load_split(directory, kind, split):
    """Items of one split, in index order.  Only the requested files are opened."""
    index = read_index(directory)
    return [
        read_item(os.path.join(directory, e["file"]))
        for e in index["items"]
        if e["kind"] == kind and e["split"] == split
    ]
