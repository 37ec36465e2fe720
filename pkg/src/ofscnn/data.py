"""Datasets: planted-scale synthetic images, IDX files, and the OFST tensor format."""
from __future__ import annotations

import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

OFST_MAGIC = b"OFST"
OFST_VERSION = 1
_OFST_HEADER = struct.Struct("<4sHH")


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


@dataclass
class Dataset:
    samples: np.ndarray            # (N, 1, H, W) float64
    labels: np.ndarray             # (N,) in {0, 1}
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 4 or len(self.samples) < 1:
            raise ValueError(f"samples must have shape (N>=1, C, H, W), got {self.samples.shape}")
        if self.labels.shape != (len(self.samples),):
            raise ValueError(f"{len(self.labels)} labels for {len(self.samples)} samples")
        if not np.isin(self.labels, (0, 1)).all():
            raise ValueError("labels must be binary")
        if not np.isfinite(self.samples).all():
            raise ValueError("samples contain non-finite values")

    def __len__(self):
        return len(self.labels)


def standardize(images: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance per image; constant images become zeros."""
    flat = images.reshape(len(images), -1)
    mean = flat.mean(axis=1, keepdims=True)
    std = flat.std(axis=1, keepdims=True)
    flat = flat - mean
    flat_std = np.where(std > 0, std, 1.0)
    if np.any(std == 0):
        warnings.warn(f"{int(np.sum(std == 0))} constant image(s) standardized to zeros", RuntimeWarning, stacklevel=2)
    return (flat / flat_std).reshape(images.shape)


# --------------------------------------------------------------------------
# planted-scale generator
# --------------------------------------------------------------------------

@dataclass
class PlantedConfig:
    """Box blobs of a class-specific extent on Gaussian noise.

    Class 1 images carry blobs of ``positive_extent`` pixels, class 0 images
    blobs of ``negative_extent``.  Random numbers come from numpy's PCG64
    seeded through ``SeedSequence(seed)``.
    """
    resolution: tuple = (64, 48)
    positive_extent: int = 7
    negative_extent: int = 3
    blobs_per_image: int = 1
    noise_sigma: float = 1.0
    n_samples: int = 1000
    seed: int = 0

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)

    def validate(self) -> None:
        h, w = self.resolution
        for name in ("positive_extent", "negative_extent"):
            e = getattr(self, name)
            if e < 1 or e % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 1, got {e}")
            if e >= min(h, w):
                raise ValueError(f"{name}={e} cannot fit in a {h}x{w} image")
        if self.positive_extent == self.negative_extent:
            raise ValueError("positive and negative extents must differ")
        if self.blobs_per_image < 1 or self.n_samples < 1:
            raise ValueError("blobs_per_image and n_samples must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def generate_planted(cfg: PlantedConfig) -> Dataset:
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    h, w = cfg.resolution
    images = np.empty((cfg.n_samples, 1, h, w))
    labels = np.empty(cfg.n_samples, dtype=np.int64)
    for i in range(cfg.n_samples):
        label = 1 - i % 2
        extent = cfg.positive_extent if label else cfg.negative_extent
        img = rng.normal(0.0, cfg.noise_sigma, size=(h, w)) if cfg.noise_sigma > 0 else np.zeros((h, w))
        blobs = np.zeros((h, w))
        for _ in range(cfg.blobs_per_image):
            top = rng.integers(0, h - extent + 1)
            left = rng.integers(0, w - extent + 1)
            blobs[top:top + extent, left:left + extent] = 1.0
        images[i, 0] = img + blobs
        labels[i] = label
    meta = {"source": "planted", **asdict(cfg)}
    meta["resolution"] = list(cfg.resolution)
    return Dataset(standardize(images), labels, meta)


# --------------------------------------------------------------------------
# IDX files
# --------------------------------------------------------------------------

def _read_idx(path, expected_magic: int, rank: int) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: bad magic, expected 0x{expected_magic:08x}, found 0x{magic:08x}")
    header_len = 4 + 4 * rank
    if len(raw) < header_len:
        raise FormatError(f"{path}: truncated header ({len(raw)} of {header_len} bytes)")
    dims = struct.unpack(f">{rank}I", raw[4:header_len])
    n = int(np.prod(dims))
    payload = raw[header_len:]
    if len(payload) != n:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, dimensions {dims} need {n}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def read_idx_images(path) -> np.ndarray:
    return _read_idx(path, IDX_IMAGES_MAGIC, 3)


def read_idx_labels(path) -> np.ndarray:
    return _read_idx(path, IDX_LABELS_MAGIC, 1)


def write_idx(path, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}[array.ndim]
    with open(path, "wb") as f:
        f.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        f.write(array.tobytes())


def load_idx(images_path, labels_path, positive_class: int) -> Dataset:
    """Byte images scaled to [0, 1] and standardized; labels one-vs-rest."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64)[:, None] / 255.0
    y = (labels == positive_class).astype(np.int64)
    return Dataset(standardize(x), y, {"source": "idx", "images": str(images_path),
                                       "labels": str(labels_path), "positive_class": positive_class})


# --------------------------------------------------------------------------
# OFST tensor files
# --------------------------------------------------------------------------

def encode_tensor(t) -> bytes:
    t = np.asarray(t, dtype="<f8")
    header = _OFST_HEADER.pack(OFST_MAGIC, OFST_VERSION, t.ndim)
    dims = struct.pack(f"<{t.ndim}Q", *t.shape)
    return header + dims + np.ascontiguousarray(t).tobytes()


def decode_tensor(buf: bytes, offset: int = 0, exact: bool = True):
    """Parse one tensor at ``offset``; returns ``(array, end_offset)``."""
    if len(buf) - offset < _OFST_HEADER.size:
        raise FormatError("truncated tensor header")
    magic, version, rank = _OFST_HEADER.unpack_from(buf, offset)
    if magic != OFST_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}, expected {OFST_MAGIC!r}")
    if version != OFST_VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    pos = offset + _OFST_HEADER.size
    if len(buf) - pos < 8 * rank:
        raise FormatError(f"truncated dimension list for rank {rank}")
    shape = struct.unpack_from(f"<{rank}Q", buf, pos)
    pos += 8 * rank
    nbytes = 8 * int(np.prod(shape, dtype=np.int64))
    available = len(buf) - pos
    if available < nbytes or (exact and available != nbytes):
        raise FormatError(f"payload length {available} bytes does not match shape {shape} ({nbytes} bytes)")
    arr = np.frombuffer(buf, dtype="<f8", count=nbytes // 8, offset=pos).astype(np.float64).reshape(shape)
    return arr, pos + nbytes


def save_tensor(path, t) -> None:
    Path(path).write_bytes(encode_tensor(t))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())[0]
