"""Bags of patches: digit ingestion, synthetic prime-sum bags, 3-D patch tiling, phantoms.

A :class:`Bag` is one subject. Its patches are stacked in a single array whose
leading axis indexes instances, so ``bag.patches[j]`` is patch ``j``.
"""

from __future__ import annotations

import gzip
import importlib.util
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import DomainError, FormatError, UsageError
from .seeding import substream

PRIMES = (2, 3, 5, 7)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {dt.newbyteorder("="): code for code, dt in _IDX_TYPES.items()}


@dataclass
class Bag:
    patches: np.ndarray
    y: Optional[float] = None
    relevance: Optional[np.ndarray] = None
    coordinates: Optional[np.ndarray] = None
    subject_id: str = ""
    instance_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.patches = np.asarray(self.patches)
        n = len(self.patches)
        if n < 1:
            raise DomainError(f"bag {self.subject_id!r} has no patches")
        for name in ("relevance", "coordinates", "instance_labels"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value)
                if len(value) != n:
                    raise UsageError(f"bag {self.subject_id!r}: {name} has length {len(value)}, expected {n}")
                setattr(self, name, value)
        if self.relevance is not None:
            self.relevance = self.relevance.astype(bool)

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def patch_shape(self) -> tuple:
        return self.patches.shape[1:]

    def permuted(self, order: Sequence[int]) -> "Bag":
        order = np.asarray(order)
        pick = lambda v: None if v is None else v[order]  # noqa: E731
        return Bag(self.patches[order], self.y, pick(self.relevance), pick(self.coordinates),
                   self.subject_id, pick(self.instance_labels))


@dataclass
class DigitDataset:
    images: np.ndarray  # [n, 28, 28] in [0, 1]
    labels: np.ndarray  # [n] ints 0-9

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise FormatError("pixel values must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# IDX container
# ---------------------------------------------------------------------------


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an IDX byte stream (optionally gzip-compressed) into a native-endian array."""
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise FormatError(f"IDX stream too short for a magic number ({len(raw)} bytes)")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim == 0:
        raise FormatError(f"bad IDX magic 0x{raw[:4].hex()}")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"IDX header truncated: expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    dtype = _IDX_TYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    actual = len(raw) - header
    if actual != expected:
        raise FormatError(f"IDX payload size mismatch: expected {expected} bytes, got {actual}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims).astype(dtype.newbyteorder("="))


def serialize_idx(array: np.ndarray) -> bytes:
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype.newbyteorder("="))
    if code is None:
        raise UsageError(f"dtype {array.dtype} has no IDX type code")
    header = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    return header + array.astype(_IDX_TYPES[code]).tobytes()


def parse_idx_images(raw: bytes) -> np.ndarray:
    """Unsigned-byte image stream -> float64 pixels scaled to [0, 1]."""
    arr = parse_idx(raw)
    if arr.dtype != np.uint8:
        raise FormatError(f"image stream must hold unsigned bytes, got {arr.dtype}")
    return arr.astype(np.float64) / 255.0


def parse_idx_labels(raw: bytes) -> np.ndarray:
    arr = parse_idx(raw)
    if arr.ndim != 1 or arr.dtype != np.uint8:
        raise FormatError(f"label stream must be a 1-D unsigned byte vector, got {arr.dtype} {arr.shape}")
    return arr.astype(np.int64)


def load_digits(images_path, labels_path) -> DigitDataset:
    images_path, labels_path = Path(images_path), Path(labels_path)
    for p in (images_path, labels_path):
        if not p.is_file():
            raise FileNotFoundError(f"{p} not found; run `setvec fetch-digits --out <dir>` or point to MNIST IDX files")
    return DigitDataset(parse_idx_images(images_path.read_bytes()), parse_idx_labels(labels_path.read_bytes()))


IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_idx_pair(directory, split: str) -> tuple:
    """Locate the image/label files of ``split`` in ``directory`` (plain or .gz)."""
    directory = Path(directory)
    out = []
    for stem in IDX_NAMES[split]:
        for candidate in (directory / stem, directory / f"{stem}.gz"):
            if candidate.is_file():
                out.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{directory / stem} not found; run `setvec fetch-digits --out {directory}`")
    return tuple(out)


def write_bundled_digits(out_dir, train_per_class: int = 400) -> dict:
    """Write the 5,000-image MNIST sample shipped with mlxtend as IDX train/test files.

    The sample is sorted by class (500 per digit); the first ``train_per_class``
    images of each digit form the train partition and the rest the test
    partition.
    """
    spec = importlib.util.find_spec("mlxtend")
    if spec is None or not spec.submodule_search_locations:
        raise FileNotFoundError("mlxtend is not installed; `pip install mlxtend` provides the bundled digit sample")
    csv = Path(spec.submodule_search_locations[0]) / "data" / "data" / "mnist_5k.csv.gz"
    table = np.loadtxt(gzip.open(csv), delimiter=",", dtype=np.int64)
    pixels, labels = table[:, :-1].astype(np.uint8).reshape(-1, 28, 28), table[:, -1].astype(np.uint8)
    train_idx, test_idx = [], []
    for digit in range(10):
        members = np.flatnonzero(labels == digit)
        train_idx.extend(members[:train_per_class])
        test_idx.extend(members[train_per_class:])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split, idx in (("train", np.array(train_idx)), ("test", np.array(test_idx))):
        img_name, lab_name = IDX_NAMES[split]
        (out_dir / img_name).write_bytes(serialize_idx(pixels[idx]))
        (out_dir / lab_name).write_bytes(serialize_idx(labels[idx]))
        counts[split] = len(idx)
    return counts


# ---------------------------------------------------------------------------
# prime-sum bags
# ---------------------------------------------------------------------------


def prime_sum(digits: Iterable[int]) -> int:
    """Sum of the prime digits (2, 3, 5, 7) of a multiset, duplicates included."""
    return int(sum(d for d in digits if d in PRIMES))


def make_bags(ds: DigitDataset, rng_seed: int, n_bags: int, min_size: int = 20, max_size: int = 100,
              prefix: str = "bag") -> list:
    if min_size > max_size:
        raise UsageError(f"min_size {min_size} exceeds max_size {max_size}")
    if min_size < 1:
        raise UsageError("min_size must be >= 1")
    if len(ds) == 0:
        raise DomainError("digit dataset is empty")
    rng = np.random.default_rng(rng_seed)
    prime_mask = np.isin(np.arange(10), PRIMES)
    bags = []
    for i in range(n_bags):
        size = int(rng.integers(min_size, max_size + 1))
        idx = rng.integers(0, len(ds), size=size)
        digits = ds.labels[idx]
        relevance = prime_mask[digits]
        bags.append(Bag(ds.images[idx], float(digits[relevance].sum()), relevance,
                        subject_id=f"{prefix}{i:05d}", instance_labels=digits))
    return bags


# ---------------------------------------------------------------------------
# 3-D tiling and phantoms
# ---------------------------------------------------------------------------


def window_starts(extent: int, patch: int, overlap: float) -> list:
    if not 0 <= overlap < 1:
        raise UsageError(f"overlap must lie in [0, 1), got {overlap}")
    if extent < patch:
        raise DomainError(f"extent {extent} is smaller than patch {patch}")
    stride = max(1, math.floor(patch * (1 - overlap) + 1e-9))
    starts = list(range(0, extent - patch + 1, stride))
    if starts[-1] + patch < extent:
        starts.append(extent - patch)
    return starts


def extract_patches_3d(volume: np.ndarray, patch: int = 32, overlap: float = 0.4, subject_id: str = "") -> Bag:
    """Tile ``volume`` with ``patch``-sized cubes; the last window on each axis is clamped to the border."""
    volume = np.asarray(volume)
    if volume.ndim != 3:
        raise DomainError(f"expected a 3-D volume, got shape {volume.shape}")
    axes = [window_starts(extent, patch, overlap) for extent in volume.shape]
    coords = np.array([(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]], dtype=np.int64)
    patches = np.stack([volume[a:a + patch, b:b + patch, c:c + patch] for a, b, c in coords])
    return Bag(patches, coordinates=coords, subject_id=subject_id)


def synth_phantom(rng_seed: int, size: int = 64, n_lesions: int = 3, lesion_intensity: float = -1.0,
                  radius_range: tuple = (4, 8)):
    """Smooth-noise volume with dark spherical lesions.

    Returns ``(volume, severity, lesion_mask)``; severity is the fraction of
    voxels covered by lesions. Volumes are float32.
    """
    if n_lesions < 0:
        raise UsageError("n_lesions must be >= 0")
    rng = np.random.default_rng(rng_seed)
    noise = ndimage.gaussian_filter(rng.standard_normal((size, size, size)), sigma=2.0, mode="wrap")
    noise = noise / (noise.std() + 1e-12)
    volume = 0.5 + 0.25 * noise
    grid = np.indices((size, size, size)).astype(np.float64)
    mask = np.zeros((size, size, size), dtype=bool)
    lo, hi = radius_range
    for _ in range(n_lesions):
        radius = rng.uniform(lo, hi)
        centre = rng.uniform(radius, size - radius, size=3)
        dist2 = sum((grid[k] - centre[k]) ** 2 for k in range(3))
        mask |= dist2 <= radius * radius
    volume = np.where(mask, lesion_intensity + 0.05 * noise, volume).astype(np.float32)
    return volume, float(mask.mean()), mask


def sphere_mask(size: int, centre, radius: float) -> np.ndarray:
    grid = np.indices((size, size, size)).astype(np.float64)
    return sum((grid[k] - centre[k]) ** 2 for k in range(3)) <= radius * radius


def make_phantom_bags(rng_seed: int, n: int, size: int = 64, patch: int = 32, overlap: float = 0.4,
                      max_lesions: int = 6, prefix: str = "phantom") -> list:
    """Phantom subjects as bags: y = lesion fraction, relevance = patch touches a lesion."""
    rng = np.random.default_rng(rng_seed)
    bags = []
    for i in range(n):
        seed = int(rng.integers(0, 2**63 - 1))
        n_lesions = int(rng.integers(0, max_lesions + 1))
        volume, severity, mask = synth_phantom(seed, size=size, n_lesions=n_lesions)
        bag = extract_patches_3d(volume, patch, overlap, subject_id=f"{prefix}{i:05d}")
        bag.y = severity
        bag.relevance = np.array([mask[a:a + patch, b:b + patch, c:c + patch].any() for a, b, c in bag.coordinates])
        bags.append(bag)
    return bags


def make_digit_splits(train_ds: DigitDataset, test_ds: DigitDataset, seed: int, n_train: int, n_test: int,
                      min_size: int, max_size: int) -> tuple:
    """Disjoint train/test bag sets drawn from the matching image partitions."""
    rng = substream(seed, "data")
    train_seed, test_seed = (int(s) for s in rng.integers(0, 2**63 - 1, size=2))
    return (make_bags(train_ds, train_seed, n_train, min_size, max_size, prefix="train"),
            make_bags(test_ds, test_seed, n_test, min_size, max_size, prefix="test"))


def make_phantom_splits(seed: int, n_train: int, n_test: int, size: int = 64, patch: int = 32,
                        overlap: float = 0.4, max_lesions: int = 6) -> tuple:
    """Independent train/test phantom cohorts seeded from the ``data`` sub-stream."""
    rng = substream(seed, "data")
    train_seed, test_seed = (int(s) for s in rng.integers(0, 2**63 - 1, size=2))
    return (make_phantom_bags(train_seed, n_train, size, patch, overlap, max_lesions, prefix="train"),
            make_phantom_bags(test_seed, n_test, size, patch, overlap, max_lesions, prefix="test"))


# ---------------------------------------------------------------------------
# on-disk bag datasets
# ---------------------------------------------------------------------------

MANIFEST_VERSION = 1


def _encode_blob(patches: np.ndarray) -> tuple:
    """Store k/255 pixel data as bytes (exact round trip), anything else as-is."""
    if patches.dtype == np.float64 and patches.min() >= 0 and patches.max() <= 1:
        as_bytes = np.round(patches * 255.0).astype(np.uint8)
        if np.array_equal(as_bytes.astype(np.float64) / 255.0, patches):
            return as_bytes, "u8/255"
    return patches, "raw"


def _decode_blob(arr: np.ndarray, encoding: str) -> np.ndarray:
    if encoding == "u8/255":
        return arr.astype(np.float64) / 255.0
    if encoding == "raw":
        return arr
    raise FormatError(f"unknown blob encoding {encoding!r}")


def _opt_list(v):
    return None if v is None else np.asarray(v).tolist()


def save_bags(bags: Sequence[Bag], directory, name: str = "bags") -> Path:
    """Write ``<directory>/<name>.json`` (manifest) plus one ``.npy`` blob per bag."""
    directory = Path(directory)
    blob_dir = directory / f"{name}_blobs"
    blob_dir.mkdir(parents=True, exist_ok=True)
    subjects = []
    for bag in bags:
        blob, encoding = _encode_blob(bag.patches)
        blob_name = f"{bag.subject_id}.npy"
        np.save(blob_dir / blob_name, blob, allow_pickle=False)
        subjects.append({
            "subject_id": bag.subject_id,
            "y": bag.y,
            "n_patches": len(bag),
            "patch_shape": list(bag.patch_shape),
            "coordinates": _opt_list(bag.coordinates),
            "relevance": _opt_list(bag.relevance),
            "instance_labels": _opt_list(bag.instance_labels),
            "blob": f"{blob_dir.name}/{blob_name}",
            "encoding": encoding,
        })
    manifest = directory / f"{name}.json"
    manifest.write_text(json.dumps({"version": MANIFEST_VERSION, "subjects": subjects}, indent=1, sort_keys=True))
    return manifest


def load_bags(manifest_path) -> list:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{manifest_path} not found; run `setvec gen-data` first")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{manifest_path}: unsupported manifest version {manifest.get('version')!r}")
    bags = []
    for s in manifest["subjects"]:
        patches = _decode_blob(np.load(manifest_path.parent / s["blob"], allow_pickle=False), s["encoding"])
        if len(patches) != s["n_patches"]:
            raise FormatError(f"{s['subject_id']}: blob holds {len(patches)} patches, manifest says {s['n_patches']}")
        bags.append(Bag(patches, s["y"], s["relevance"],
                        None if s["coordinates"] is None else np.asarray(s["coordinates"], dtype=np.int64),
                        s["subject_id"], s["instance_labels"]))
    return bags


@dataclass
class BagSummary:
    n_bags: int
    sizes: dict = field(default_factory=dict)
    y_mean: float = float("nan")
    y_std: float = float("nan")
    y_min: float = float("nan")
    y_max: float = float("nan")


def summarize(bags: Sequence[Bag], bins: int = 8) -> BagSummary:
    sizes = np.array([len(b) for b in bags])
    ys = np.array([b.y for b in bags if b.y is not None], dtype=np.float64)
    counts, edges = np.histogram(sizes, bins=min(bins, max(1, len(np.unique(sizes)))))
    hist = {f"{int(math.ceil(lo))}-{int(math.floor(hi))}": int(c) for lo, hi, c in zip(edges[:-1], edges[1:], counts)}
    if len(ys) == 0:
        return BagSummary(len(bags), hist)
    return BagSummary(len(bags), hist, float(ys.mean()), float(ys.std()), float(ys.min()), float(ys.max()))
