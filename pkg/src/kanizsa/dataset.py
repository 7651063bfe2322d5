"""Dataset assembly, persistence and the MNIST reference subset."""
from __future__ import annotations

import csv
import gzip
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .geometry import (DEFAULT_RANGES, DatasetKind, GenerationExhausted, GeometryRanges,
                       Label, StimulusSpec, sample_stimulus)
from .raster import RasterConfig, rasterize

SPLITS = ("train", "val", "test")
MASK64 = (1 << 64) - 1

PACKED_MAGIC = b"KNZ1"
PACKED_VERSION = 1
# magic, u32 version, u16 width, u16 height, u32 count
_PACKED_HEADER = struct.Struct("<4sIHHI")
PACKED_HEADER_SIZE = _PACKED_HEADER.size

MANIFEST_FIELDS = ("index", "split", "filename", "label", "kind", "targets", "offset_d",
                   "offset_sign", "angle_delta", "rot_deltas", "seed")


class FormatError(ValueError):
    pass


class InsufficientClassCount(ValueError):
    pass


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def derive_seed(master_seed: int, split_id: int, index: int) -> int:
    """Stateless per-sample seed; distinct (split, index) give distinct seeds.

    Each argument passes through its own finalizer round so that the mapping
    is a bijection in ``index`` for fixed ``(master_seed, split_id)``.
    """
    h = splitmix64(master_seed & MASK64)
    h = splitmix64(h ^ ((split_id * 0xD1B54A32D192ED03) & MASK64))
    return splitmix64(h ^ (index & MASK64))


def sample_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class GenConfig:
    kind: DatasetKind = DatasetKind.COMB
    counts: tuple[int, int, int] = (8000, 2000, 2000)
    image: RasterConfig = field(default_factory=RasterConfig)
    ranges: GeometryRanges = DEFAULT_RANGES
    master_seed: int = 0
    write_png: bool = True

    def __post_init__(self):
        self.kind = DatasetKind(self.kind)
        self.counts = tuple(int(c) for c in self.counts)
        if len(self.counts) != 3 or any(c < 0 for c in self.counts):
            raise ValueError("counts must be three non-negative integers")
        if any(c % 2 for c in self.counts):
            raise ValueError(f"split counts must be even for exact class balance: {self.counts}")
        if self.ranges.aspect != self.image.aspect:
            self.ranges = GeometryRanges(**{**asdict(self.ranges), "aspect": self.image.aspect})
        if not 0 <= self.master_seed <= MASK64:
            raise ValueError("master_seed must be an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass
class ManifestRow:
    index: int
    split: str
    filename: str
    label: int
    kind: str
    targets: str
    offset_d: float
    offset_sign: int
    angle_delta: float
    rot_deltas: str
    seed: int


def manifest_row(index: int, split: str, stim: StimulusSpec, seed: int) -> ManifestRow:
    rec = stim.record
    return ManifestRow(
        index=index, split=split, filename=f"{split}/{index:06d}.png",
        label=int(stim.label), kind=rec.kind.value,
        targets=" ".join(str(t) for t in rec.target_vertices),
        offset_d=rec.offset_distance, offset_sign=rec.offset_sign,
        angle_delta=rec.angle_delta,
        rot_deltas=" ".join(repr(d) for d in rec.rotation_deltas),
        seed=seed)


def generate_sample(cfg: GenConfig, split_id: int, index: int):
    """Return ``(seed, stimulus)`` for one dataset slot; even index = valid."""
    seed = derive_seed(cfg.master_seed, split_id, index)
    label = Label.VALID if index % 2 == 0 else Label.INVALID
    try:
        stim = sample_stimulus(sample_rng(seed), label, cfg.kind, cfg.ranges)
    except GenerationExhausted as exc:
        raise GenerationExhausted(f"{SPLITS[split_id]}[{index}]: {exc}") from exc
    return seed, stim


def encode_png(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    PILImage.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8), mode="L").save(
        buf, format="PNG", optimize=False, compress_level=6)
    return buf.getvalue()


def write_packed(path, images: np.ndarray, labels) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or len(images) != len(labels):
        raise ValueError("images must be (count, height, width) with one label each")
    count, h, w = images.shape
    with open(path, "wb") as f:
        f.write(_PACKED_HEADER.pack(PACKED_MAGIC, PACKED_VERSION, w, h, count))
        rows = np.concatenate([labels[:, None], images.reshape(count, h * w)], axis=1)
        f.write(rows.tobytes())


def load_packed(path):
    """Read a packed file; returns ``(images[count, h, w], labels[count])``."""
    data = Path(path).read_bytes()
    if len(data) < PACKED_HEADER_SIZE:
        raise FormatError(f"{path}: file has {len(data)} bytes, shorter than the header")
    magic, version, w, h, count = _PACKED_HEADER.unpack_from(data)
    if magic != PACKED_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != PACKED_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = PACKED_HEADER_SIZE + count * (1 + w * h)
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    rows = np.frombuffer(data, dtype=np.uint8, offset=PACKED_HEADER_SIZE).reshape(count, 1 + w * h)
    return rows[:, 1:].reshape(count, h, w).copy(), rows[:, 0].copy()


def write_manifest(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in rows:
            writer.writerow([getattr(r, name) for name in MANIFEST_FIELDS])


def read_manifest(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def generate_dataset(cfg: GenConfig, out_dir) -> list[ManifestRow]:
    """Render every split of one dataset into ``out_dir``.

    Writes ``<split>.knz`` packed files, ``manifest.csv``, ``config.json`` and,
    if enabled, one PNG per sample under ``<split>/``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for split_id, (split, n) in enumerate(zip(SPLITS, cfg.counts)):
        images = np.empty((n, cfg.image.height, cfg.image.width), dtype=np.uint8)
        labels = np.empty(n, dtype=np.uint8)
        if cfg.write_png:
            (out / split).mkdir(exist_ok=True)
        for i in range(n):
            seed, stim = generate_sample(cfg, split_id, i)
            images[i] = rasterize(stim, cfg.image).to_array()
            labels[i] = int(stim.label)
            row = manifest_row(i, split, stim, seed)
            if cfg.write_png:
                (out / row.filename).write_bytes(encode_png(images[i]))
            manifest.append(row)
        write_packed(out / f"{split}.knz", images, labels)
    write_manifest(out / "manifest.csv", manifest)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def regenerate_stimulus(cfg: GenConfig, row: dict) -> StimulusSpec:
    """Rebuild the stimulus behind a manifest row from its split and index."""
    _, stim = generate_sample(cfg, SPLITS.index(row["split"]), int(row["index"]))
    return stim


# --- IDX / MNIST -----------------------------------------------------------

_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def parse_idx(data: bytes) -> np.ndarray:
    if len(data) < 4 or data[0] != 0 or data[1] != 0:
        raise FormatError("not an IDX file (bad magic)")
    code, ndim = data[2], data[3]
    if code not in _IDX_DTYPES:
        raise FormatError(f"unknown IDX element type 0x{code:02x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise FormatError("truncated IDX header")
    shape = struct.unpack(f">{ndim}I", data[4:header])
    dtype = np.dtype(_IDX_DTYPES[code])
    expected = header + int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"IDX payload size mismatch: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype=dtype, offset=header).reshape(shape).astype(dtype.newbyteorder("="))


def read_idx(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


def encode_idx(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    codes = {np.dtype(v).newbyteorder("="): k for k, v in _IDX_DTYPES.items()}
    code = codes[arr.dtype]
    header = bytes([0, 0, code, arr.ndim]) + struct.pack(f">{arr.ndim}I", *arr.shape)
    return header + arr.astype(arr.dtype.newbyteorder(">")).tobytes()


MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "val_images": "t10k-images-idx3-ubyte",
    "val_labels": "t10k-labels-idx1-ubyte",
}


def find_mnist(root) -> dict | None:
    """Locate the four MNIST IDX files (optionally gzipped) under ``root``."""
    root = Path(root)
    found = {}
    for key, stem in MNIST_FILES.items():
        for cand in (root / stem, root / f"{stem}.gz", root / stem.replace("-idx", ".idx")):
            if cand.exists():
                found[key] = cand
                break
        else:
            return None
    return found


def load_mnist(root):
    paths = find_mnist(root)
    if paths is None:
        raise FileNotFoundError(f"MNIST IDX files not found under {root}")
    return {k: read_idx(p) for k, p in paths.items()}


def largest_remainder(total: int, weights) -> np.ndarray:
    """Integer apportionment of ``total`` proportional to ``weights``."""
    weights = np.asarray(weights, dtype=np.int64)
    quota = total * weights
    base = quota // weights.sum()
    remainder = quota - base * weights.sum()
    short = total - int(base.sum())
    # ties go to the lower class index (stable sort)
    order = np.argsort(-remainder, kind="stable")
    base[order[:short]] += 1
    return base


@dataclass
class MnistSplit:
    train_idx: np.ndarray
    test_idx: np.ndarray
    deleted_idx: np.ndarray


def mnist_subset(train_images, train_labels, seed: int, n_test: int = 10000,
                 n_delete: int = 20000):
    """Stratified carve-out of a test set and a deletion set from MNIST training data.

    Returns ``(train_images, train_labels), (test_images, test_labels), split``
    where ``split`` holds the original indices of each part.
    """
    labels = np.asarray(train_labels)
    if len(labels) != len(train_images):
        raise FormatError("image and label counts differ")
    classes, counts = np.unique(labels, return_counts=True)
    move = largest_remainder(n_test, counts)
    delete = largest_remainder(n_delete, counts)
    if np.any(move + delete > counts):
        bad = classes[np.argmax(move + delete > counts)]
        raise InsufficientClassCount(f"class {bad} has too few samples")
    rng = sample_rng(derive_seed(seed, 3, 0))
    train_parts, test_parts, del_parts = [], [], []
    for c, m, d in zip(classes, move, delete):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test_parts.append(idx[:m])
        del_parts.append(idx[m:m + d])
        train_parts.append(idx[m + d:])
    split = MnistSplit(*(np.sort(np.concatenate(p)) for p in (train_parts, test_parts, del_parts)))
    images = np.asarray(train_images)
    return ((images[split.train_idx], labels[split.train_idx]),
            (images[split.test_idx], labels[split.test_idx]), split)


def class_frequencies(labels, n_classes: int = 10) -> np.ndarray:
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=n_classes)
    return counts / max(1, counts.sum())


def expected_file_size(count: int, width: int, height: int) -> int:
    return PACKED_HEADER_SIZE + count * (1 + width * height)

