"""Three-component architecture: feature extractor, disease classifier,
source discriminator.

The extractor is a 3-block convnet (3x3 conv -> relu -> 2x2 avg-pool) with
channel widths (8, 16, 32) followed by global average pooling, so any input
with H, W divisible by 8 maps to a 32-dim feature vector.  The classifier is a
single affine map to one sigmoid unit; the discriminator is a 2-layer MLP with
one sigmoid unit per training source.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CONV_WIDTHS = (8, 16, 32)
FEATURE_DIM = CONV_WIDTHS[-1]
# Global average pooling of sparse relu maps leaves features orders of
# magnitude below the weight scale both heads are initialized for; a fixed
# gain restores unit order of magnitude so their gradients are well
# conditioned from the first step.
FEATURE_GAIN = 64.0
DISC_HIDDEN = 16
KERNEL = 3

# fixed sub-seeds so extractor/classifier init is independent of whether a
# discriminator exists (lambda=0 collapse depends on this)
_SEED_EXTRACTOR = 1
_SEED_CLASSIFIER = 2
_SEED_DISCRIMINATOR = 3


@dataclass
class ModelParams:
    """Named parameter tensors for the three components."""

    extractor: dict = field(default_factory=dict)
    classifier: dict = field(default_factory=dict)
    discriminator: dict | None = None
    in_channels: int = 1
    widths: tuple = CONV_WIDTHS

    @property
    def n_sources(self):
        if self.discriminator is None:
            return None
        return self.discriminator["d.fc2.b"].shape[0]

    def named(self):
        out = dict(self.extractor)
        out.update(self.classifier)
        if self.discriminator is not None:
            out.update(self.discriminator)
        return out

    def trainable(self):
        return {k: t for k, t in self.named().items() if t.requires_grad}


def _glorot(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_params(n_sources=None, seed=0, in_channels=1, widths=CONV_WIDTHS, disc_hidden=DISC_HIDDEN):
    """Initialize parameters; pass n_sources=None for a baseline (no
    discriminator) model."""
    params = ModelParams(in_channels=in_channels, widths=tuple(widths))

    rng = np.random.default_rng([int(seed), _SEED_EXTRACTOR])
    c_in = in_channels
    for i, c_out in enumerate(widths, start=1):
        w = _glorot(rng, (c_out, c_in, KERNEL, KERNEL), c_in * KERNEL * KERNEL, c_out * KERNEL * KERNEL)
        params.extractor[f"e.conv{i}.w"] = Tensor(w, requires_grad=True)
        params.extractor[f"e.conv{i}.b"] = Tensor(np.zeros(c_out), requires_grad=True)
        c_in = c_out

    rng = np.random.default_rng([int(seed), _SEED_CLASSIFIER])
    feat = widths[-1]
    params.classifier["c.fc.w"] = Tensor(_glorot(rng, (feat, 1), feat, 1), requires_grad=True)
    params.classifier["c.fc.b"] = Tensor(np.zeros(1), requires_grad=True)

    if n_sources is not None:
        rng = np.random.default_rng([int(seed), _SEED_DISCRIMINATOR])
        params.discriminator = {
            "d.fc1.w": Tensor(_glorot(rng, (feat, disc_hidden), feat, disc_hidden), requires_grad=True),
            "d.fc1.b": Tensor(np.zeros(disc_hidden), requires_grad=True),
            "d.fc2.w": Tensor(_glorot(rng, (disc_hidden, n_sources), disc_hidden, n_sources), requires_grad=True),
            "d.fc2.b": Tensor(np.zeros(n_sources), requires_grad=True),
        }
    return params


def param_count(params):
    return sum(t.size for t in params.named().values())


def expected_param_count(n_sources=None, in_channels=1, widths=CONV_WIDTHS, disc_hidden=DISC_HIDDEN):
    total = 0
    c_in = in_channels
    for c_out in widths:
        total += c_out * c_in * KERNEL * KERNEL + c_out
        c_in = c_out
    feat = widths[-1]
    total += feat * 1 + 1
    if n_sources is not None:
        total += feat * disc_hidden + disc_hidden + disc_hidden * n_sources + n_sources
    return total


def _check_image_batch(x, in_channels, n_blocks):
    if x.data.ndim != 4 or x.shape[1] != in_channels:
        raise ad.ShapeError(f"extract: expected N x {in_channels} x H x W input, got {x.shape}")
    div = 2 ** n_blocks
    h, w = x.shape[2], x.shape[3]
    if h % div or w % div:
        raise ad.ShapeError(f"extract: H,W must be divisible by {div}, got {h}x{w}")


def extract(params, x, return_acts=False):
    """Image batch (N, C, H, W) -> feature matrix (N, feature_dim).

    With return_acts=True also returns the per-block post-pool activation
    tensors (the last one feeds Grad-CAM).
    """
    _check_image_batch(x, params.in_channels, len(params.widths))
    acts = []
    h = x
    for i in range(1, len(params.widths) + 1):
        h = ad.conv2d(h, params.extractor[f"e.conv{i}.w"])
        h = ad.add_channel_bias(h, params.extractor[f"e.conv{i}.b"])
        h = ad.relu(h)
        h = ad.avg_pool2(h)
        acts.append(h)
    f = ad.scale(ad.global_avg_pool(h), FEATURE_GAIN)
    if return_acts:
        return f, acts
    return f


def classify_logit(params, f):
    return ad.add_bias(ad.matmul(f, params.classifier["c.fc.w"]), params.classifier["c.fc.b"])


def classify(params, f):
    """Feature matrix (N, feature_dim) -> disease probabilities (N, 1)."""
    return ad.sigmoid(classify_logit(params, f))


def discriminate(params, f):
    """Feature matrix (N, feature_dim) -> per-source scores (N, S) in (0,1)."""
    if params.discriminator is None:
        raise ValueError("discriminate: model has no discriminator (baseline mode)")
    d = params.discriminator
    h = ad.relu(ad.add_bias(ad.matmul(f, d["d.fc1.w"]), d["d.fc1.b"]))
    return ad.sigmoid(ad.add_bias(ad.matmul(h, d["d.fc2.w"]), d["d.fc2.b"]))


# ---------------------------------------------------------------------------
# checkpoints: manifest header (name, offset) then concatenated XTNS blobs

_CKPT_MAGIC = b"XCKP"


def save_checkpoint(path, params):
    names = params.named()
    import io

    blobs = []
    offsets = {}
    pos = 0
    for name, t in names.items():
        buf = io.BytesIO()
        ad.write_tensor(buf, t.data)
        raw = buf.getvalue()
        offsets[name] = pos
        blobs.append(raw)
        pos += len(raw)
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(names)))
        for name in names:
            enc = name.encode("utf-8")
            fh.write(struct.pack("<H", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<Q", offsets[name]))
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (count,) = struct.unpack("<I", fh.read(4))
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (off,) = struct.unpack("<Q", fh.read(8))
            entries.append((name, off))
        base = fh.tell()
        arrays = {}
        for name, off in entries:
            fh.seek(base + off)
            arrays[name] = ad.read_tensor(fh)

    params = ModelParams()
    widths = []
    i = 1
    while f"e.conv{i}.w" in arrays:
        widths.append(arrays[f"e.conv{i}.w"].shape[0])
        i += 1
    if not widths:
        raise ValueError(f"{path}: checkpoint holds no extractor parameters")
    params.in_channels = arrays["e.conv1.w"].shape[1]
    params.widths = tuple(widths)
    for name, arr in arrays.items():
        t = Tensor(arr, requires_grad=True)
        if name.startswith("e."):
            params.extractor[name] = t
        elif name.startswith("c."):
            params.classifier[name] = t
        elif name.startswith("d."):
            if params.discriminator is None:
                params.discriminator = {}
            params.discriminator[name] = t
        else:
            raise ValueError(f"{path}: unknown parameter name {name!r}")
    return params
