"""Small fixed segmentation networks: a 3D teacher and a 2D student.

Both are three ``conv -> relu`` blocks with channels 1 -> 8 -> 16 -> 16
and a pointwise head to ``C + 1`` logits (index 0 is background).  The
pre-softmax logit map doubles as the feature map that class prototypes
are computed from.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from ._binary import Reader, Writer, check_magic
from .exceptions import FormatError, ShapeError

ARCHS = {"teacher3d": 3, "student2d": 2}
CHANNEL_PLAN = (1, 8, 16, 16)
KERNEL = 3

CHECKPOINT_MAGIC = b"PDNET\0\0\0"
CHECKPOINT_VERSION = 1
_ARCH_CODES = {"teacher3d": 0, "student2d": 1}


@dataclass
class NetworkParams:
    arch: str
    n_classes: int
    layers: list = field(default_factory=list)  # [(kernel Node, bias Node), ...]
    config_hash: str = ""

    @property
    def dims(self):
        return ARCHS[self.arch]

    @property
    def n_channels(self):
        """Channels of the logit / feature map (C + 1)."""
        return self.n_classes + 1

    def nodes(self):
        return [n for layer in self.layers for n in layer]

    def arrays(self):
        return [n.value for n in self.nodes()]

    def n_parameters(self):
        return sum(a.size for a in self.arrays())

    def zero_grad(self):
        for n in self.nodes():
            n.zero_grad()

    def copy(self):
        return NetworkParams(
            self.arch,
            self.n_classes,
            [(ad.Node(w.value), ad.Node(b.value)) for w, b in self.layers],
            self.config_hash,
        )

    def with_arrays(self, arrays):
        """New params with the given arrays, in :meth:`arrays` order."""
        it = iter(arrays)
        layers = [(ad.Node(next(it)), ad.Node(next(it))) for _ in self.layers]
        return NetworkParams(self.arch, self.n_classes, layers, self.config_hash)

    def equals(self, other):
        return (
            self.arch == other.arch
            and self.n_classes == other.n_classes
            and all(np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays()))
        )


def layer_shapes(arch, n_classes):
    dims = ARCHS[arch]
    shapes = []
    for cin, cout in zip(CHANNEL_PLAN[:-1], CHANNEL_PLAN[1:]):
        shapes.append(((cout, cin) + (KERNEL,) * dims, (cout,)))
    shapes.append(((n_classes + 1, CHANNEL_PLAN[-1]) + (1,) * dims, (n_classes + 1,)))
    return shapes


def init_params(arch, n_classes, seed):
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {sorted(ARCHS)}")
    if n_classes < 2:
        raise ValueError(f"need at least 2 organ classes, got {n_classes}")
    rng = np.random.default_rng(seed)
    layers = []
    for wshape, bshape in layer_shapes(arch, n_classes):
        bound = 1.0 / np.sqrt(np.prod(wshape[1:]))
        w = rng.uniform(-bound, bound, size=wshape)
        b = rng.uniform(-bound, bound, size=bshape)
        layers.append((ad.Node(w), ad.Node(b)))
    return NetworkParams(arch, n_classes, layers)


def zero_params(arch, n_classes):
    layers = [(ad.Node(np.zeros(w)), ad.Node(np.zeros(b))) for w, b in layer_shapes(arch, n_classes)]
    return NetworkParams(arch, n_classes, layers)


def forward(params, x):
    """Logits ``B x (C+1) x spatial`` for a ``B x 1 x spatial`` input."""
    x = x if isinstance(x, ad.Node) else ad.Node(x)
    want = params.dims + 2
    if x.value.ndim != want:
        raise ShapeError(f"{params.arch} expects input of rank {want}, got shape {x.shape}")
    if x.shape[1] != 1:
        raise ShapeError(f"{params.arch} expects 1 input channel, got {x.shape[1]}")
    h = x
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = ad.conv(h, w, b, params.dims)
        if i < last:
            h = ad.relu(h)
    return h


def predict_labels(logits):
    """Channel argmax of ``B x CH x spatial`` logits; ties go to the lower index."""
    logits = logits.value if isinstance(logits, ad.Node) else np.asarray(logits)
    if logits.shape[1] < 2:
        raise ShapeError("need at least 2 channels to predict labels")
    return np.argmax(logits, axis=1)


def infer(params, images, batch_size=8):
    """Logit arrays for a stack of images (``N x 1 x spatial``), no graph kept."""
    out = []
    for start in range(0, len(images), batch_size):
        out.append(forward(params, np.asarray(images[start:start + batch_size])).value)
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------------------
# checkpoint I/O


def checkpoint_bytes(params):
    w = Writer()
    w.raw(CHECKPOINT_MAGIC)
    w.u32(CHECKPOINT_VERSION, 0)
    w.u8(_ARCH_CODES[params.arch])
    w.u32(params.n_classes)
    w.digest(params.config_hash)
    arrays = params.arrays()
    w.u32(len(arrays))
    for a in arrays:
        w.u32(a.ndim)
        w.u32(*a.shape)
        w.array(a)
    return w.getvalue()


def params_from_bytes(data, what="checkpoint"):
    r = Reader(data, what)
    check_magic(r, CHECKPOINT_MAGIC)
    version, _ = r.u32(2)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{what}: unsupported version {version}, expected {CHECKPOINT_VERSION}")
    code = r.u8()
    archs = {v: k for k, v in _ARCH_CODES.items()}
    if code not in archs:
        raise FormatError(f"{what}: unknown architecture code {code}")
    n_classes = r.u32()
    config_hash = r.digest()
    count = r.u32()
    arrays = []
    for _ in range(count):
        ndim = r.u32()
        shape = r.u32(ndim) if ndim > 1 else (r.u32(),)
        arrays.append(r.array(tuple(shape)))
    r.finish()
    params = zero_params(archs[code], n_classes)
    expected = [a.shape for a in params.arrays()]
    if [a.shape for a in arrays] != expected:
        raise FormatError(f"{what}: layer shapes do not match the {archs[code]} channel plan")
    params = params.with_arrays(arrays)
    params.config_hash = config_hash
    return params


def save_checkpoint(params, path):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(params))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read(), what=str(path))
