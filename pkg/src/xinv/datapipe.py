"""Dataset manifests, PGM image codec, the balanced multi-source resampler,
and the synthetic spurious-correlation generator.

The synthetic corpus plants two patterns in Gaussian noise: a causal center
blob that accompanies positive labels in every source, and a per-source corner
watermark whose correlation with the label is high inside the training sources
and zero in the held-out source.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

IMAGE_SIZE = 32
BLOB_SIZE = 8
WATERMARK_SIZE = 6
TRAIN_RHO = 0.95


class ManifestError(ValueError):
    pass


class PGMError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PGM (binary P5, 8-bit) codec


def encode_pgm(img):
    """Float image in [0,1] (H,W) -> binary P5 bytes at maxval 255."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise PGMError(f"encode_pgm: expected 2-d image, got shape {img.shape}")
    pix = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = pix.shape
    return b"P5\n%d %d\n255\n" % (w, h) + pix.tobytes()


def _read_token(fh):
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise PGMError("unexpected end of PGM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def decode_pgm(data):
    """Binary P5 bytes -> float image (H,W) scaled to [0,1]."""
    fh = io.BytesIO(data)
    if _read_token(fh) != b"P5":
        raise PGMError("not a binary (P5) PGM file")
    try:
        w = int(_read_token(fh))
        h = int(_read_token(fh))
        maxval = int(_read_token(fh))
    except ValueError as exc:
        raise PGMError(f"malformed PGM header: {exc}") from exc
    if maxval != 255:
        raise PGMError(f"only 8-bit PGM supported (maxval 255), got {maxval}")
    payload = fh.read(w * h)
    if len(payload) != w * h:
        raise PGMError(f"truncated PGM payload: expected {w * h} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.float64).reshape(h, w) / 255.0


def decode_image(path, expect_hw=None):
    """Load a PGM file as a (1, H, W) tensor-ready array in [0,1]."""
    img = decode_pgm(Path(path).read_bytes())
    if expect_hw is not None and img.shape != tuple(expect_hw):
        raise PGMError(f"{path}: expected {expect_hw[0]}x{expect_hw[1]} image, got {img.shape[0]}x{img.shape[1]}")
    return img[None, :, :]


def encode_image(path, img):
    Path(path).write_bytes(encode_pgm(img))


# ---------------------------------------------------------------------------
# manifests


@dataclass
class Manifest:
    """Ordered records of (path, label, source name); sources indexed in
    first-appearance order."""

    records: list  # (path: str, label: int, source: str)
    sources: list = field(default_factory=list)

    def __post_init__(self):
        if not self.sources:
            seen = {}
            for _, _, src in self.records:
                if src not in seen:
                    seen[src] = len(seen)
            self.sources = list(seen)
        self.source_index = {s: i for i, s in enumerate(self.sources)}

    def __len__(self):
        return len(self.records)

    @property
    def n_sources(self):
        return len(self.sources)

    def source_ids(self):
        return np.array([self.source_index[src] for _, _, src in self.records], dtype=np.intp)

    def labels(self):
        return np.array([y for _, y, _ in self.records], dtype=np.float64)

    def filter(self, keep):
        """Sub-manifest of records whose source satisfies the predicate;
        source indexing is rebuilt in first-appearance order."""
        return Manifest([r for r in self.records if keep(r[2])])


def load_manifest(path):
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty manifest") from None
        if [c.strip() for c in header] != ["path", "label", "source"]:
            raise ManifestError(f"{path}: expected header 'path,label,source', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            img_path, label, source = row
            if label not in ("0", "1"):
                raise ManifestError(f"{path}:{lineno}: label must be 0 or 1, got {label!r}")
            rec_path = str((path.parent / img_path) if not Path(img_path).is_absolute() else img_path)
            records.append((rec_path, int(label), source))
    if not records:
        raise ManifestError(f"{path}: empty manifest")
    return Manifest(records)


def save_manifest(path, records, relative_to=None):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "label", "source"])
        for img_path, label, source in records:
            p = Path(img_path)
            if relative_to is not None:
                p = p.relative_to(relative_to)
            writer.writerow([str(p), label, source])


def load_examples(manifest, expect_hw=(IMAGE_SIZE, IMAGE_SIZE)):
    """Decode every record once -> (images (N,1,H,W), labels (N,), source ids (N,))."""
    cache = {}
    imgs = []
    for rec_path, _, _ in manifest.records:
        if rec_path not in cache:
            cache[rec_path] = decode_image(rec_path, expect_hw=expect_hw)
        imgs.append(cache[rec_path])
    return np.stack(imgs), manifest.labels(), manifest.source_ids()


# ---------------------------------------------------------------------------
# balanced resampling


def balanced_order(source_ids, rng):
    """One balanced epoch over example indices.

    Every source contributes exactly max-source-size picks: the largest source
    is a single shuffled pass, smaller ones are reshuffled cyclic repetitions
    truncated at the wrap.  The interleaved pool is then shuffled as a whole.
    """
    source_ids = np.asarray(source_ids)
    groups = [np.flatnonzero(source_ids == s) for s in range(source_ids.max() + 1)]
    for s, g in enumerate(groups):
        if g.size == 0:
            raise ManifestError(f"balanced_order: source {s} has no examples")
    max_size = max(g.size for g in groups)
    picks = []
    for g in groups:
        reps = []
        while len(reps) < max_size:
            reps.extend(rng.permutation(g))
        picks.extend(reps[:max_size])
    picks = np.array(picks, dtype=np.intp)
    return picks[rng.permutation(picks.size)]


def balanced_index_batches(source_ids, batch_size, rng):
    order = balanced_order(source_ids, rng)
    for start in range(0, order.size, batch_size):
        yield order[start : start + batch_size]


def balanced_stream(manifest, batch_size, seed):
    """One epoch of record batches; each source contributes max-source-size
    examples, the largest each exactly once."""
    rng = np.random.default_rng(seed)
    for idx in balanced_index_batches(manifest.source_ids(), batch_size, rng):
        yield [manifest.records[i] for i in idx]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class SynthSpec:
    sources: int = 3  # training sources; one extra held-out source is added
    n: int = 1000  # examples per source per split
    size: int = IMAGE_SIZE
    a_c: float = 0.15  # causal blob amplitude
    a_sp: float = 0.6  # spurious watermark amplitude
    rho: float = TRAIN_RHO  # watermark-label correlation inside training sources
    sigma: float = 0.1  # background noise level
    a_spread: float = 0.3  # relative spread of per-source watermark amplitudes
    seed: int = 0

    def __post_init__(self):
        if self.a_c < 0 or self.a_sp < 0:
            raise ValueError("SynthSpec: amplitudes must be >= 0")
        if abs(self.rho) > 1:
            raise ValueError("SynthSpec: |rho| must be <= 1")
        if self.size % 8:
            raise ValueError("SynthSpec: size must be divisible by 8")


_SPEC_FIELDS = {"sources": int, "n": int, "size": int, "a_c": float, "a_sp": float, "rho": float, "sigma": float, "a_spread": float, "seed": int}


def load_synth_spec(path):
    """Parse a key=value spec file; unknown keys are rejected."""
    kwargs = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _SPEC_FIELDS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        kwargs[key] = _SPEC_FIELDS[key](value)
    return SynthSpec(**kwargs)


def watermark_corner(source_idx, size, wm=WATERMARK_SIZE):
    """Top-left coordinate of the 6x6 watermark block for a source index."""
    corners = [(0, 0), (0, size - wm), (size - wm, 0), (size - wm, size - wm)]
    return corners[source_idx % 4]


def watermark_pattern(source_idx, wm=WATERMARK_SIZE):
    """Unit-mean 6x6 texture stamp for a source index.

    Each source watermarks with a distinct texture (solid, horizontal
    stripes, vertical stripes, checkerboard) so its signature survives global
    average pooling as channel energy, not just location.  All stamps carry
    the same total mass."""
    rows, cols = np.indices((wm, wm))
    styles = [
        np.ones((wm, wm)),
        (rows % 2 == 0) * 2.0,
        (cols % 2 == 0) * 2.0,
        ((rows + cols) % 2 == 0) * 2.0,
    ]
    return styles[source_idx % 4]


def blob_slice(size, blob=BLOB_SIZE):
    start = (size - blob) // 2
    return slice(start, start + blob), slice(start, start + blob)


def watermark_amplitude(spec, source_idx):
    """Per-source watermark strength: training sources are spread around a_sp
    so the watermark signature identifies its source; the held-out source uses
    the mean amplitude."""
    if source_idx >= spec.sources or spec.sources < 2:
        return spec.a_sp
    rel = (2 * source_idx - (spec.sources - 1)) / (spec.sources - 1)  # in [-1, 1]
    return spec.a_sp * (1.0 + spec.a_spread * rel)


def _render_example(rng, spec, source_idx, rho):
    y = int(rng.integers(0, 2))
    img = rng.normal(0.0, spec.sigma, (spec.size, spec.size))
    if y == 1:
        rs, cs = blob_slice(spec.size)
        img[rs, cs] += spec.a_c
    p_wm = (1.0 + rho * (2 * y - 1)) / 2.0
    if rng.random() < p_wm:
        r0, c0 = watermark_corner(source_idx, spec.size)
        stamp = watermark_pattern(source_idx) * watermark_amplitude(spec, source_idx)
        img[r0 : r0 + WATERMARK_SIZE, c0 : c0 + WATERMARK_SIZE] += stamp
    return np.clip(img, 0.0, 1.0), y


def synth_generate(spec, out_dir):
    """Write PGM blobs and manifests for spec.sources training sources plus
    one held-out source (watermark uncorrelated with the label).

    Returns {"train": ..., "test": ..., "held_out": source name, and
    per-source manifest paths}.  Byte-reproducible for a fixed spec.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_total = spec.sources + 1
    held_out = f"src{spec.sources}"
    per_source = {}
    all_records = {"train": [], "test": []}
    for s in range(n_total):
        name = f"src{s}"
        rho = spec.rho if s < spec.sources else 0.0
        src_dir = out_dir / name
        src_dir.mkdir(exist_ok=True)
        for split_idx, split in enumerate(("train", "test")):
            rng = np.random.default_rng([spec.seed, s, split_idx])
            records = []
            for i in range(spec.n):
                img, y = _render_example(rng, spec, s, rho)
                img_path = src_dir / f"{split}_{i:05d}.pgm"
                encode_image(img_path, img)
                records.append((str(img_path), y, name))
            manifest_path = out_dir / f"{name}_{split}.csv"
            save_manifest(manifest_path, records, relative_to=out_dir)
            per_source[(name, split)] = manifest_path
            all_records[split].extend(records)
    for split in ("train", "test"):
        save_manifest(out_dir / f"{split}.csv", all_records[split], relative_to=out_dir)
    (out_dir / "spec.txt").write_text(
        "".join(f"{k}={getattr(spec, k)}\n" for k in _SPEC_FIELDS)
    )
    return {
        "train": out_dir / "train.csv",
        "test": out_dir / "test.csv",
        "held_out": held_out,
        "per_source": per_source,
    }
