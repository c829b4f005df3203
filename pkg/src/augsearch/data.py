"""Datasets: the AUG1 binary format, subsets, batching and synthetic toy sets.

AUG1 layout (little-endian)::

    b"AUG1"  u32 version  u32 N  u32 C  u32 H  u32 W  u32 class_count
    float32 pixels[N*C*H*W]  u32 labels[N]  u32 crc32(everything before it)
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import reference
from .operations import SPEC_BY_NAME

log = logging.getLogger(__name__)

MAGIC = b"AUG1"
VERSION = 1
_HEADER = struct.Struct("<4s6I")


class FormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class LabelRangeError(FormatError):
    pass


class PixelRangeError(FormatError):
    pass


@dataclass(frozen=True)
class DatasetBundle:
    """Images ``[N, C, H, W]`` in [0, 1] (float32) with integer labels in [0, class_count)."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise ValueError(f"images must be [N, C, H, W], got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError(f"expected {images.shape[0]} labels, got shape {labels.shape}")
        if self.class_count < 1:
            raise ValueError(f"class_count must be >= 1, got {self.class_count}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise LabelRangeError(f"label out of range [0, {self.class_count}): "
                                  f"found [{labels.min()}, {labels.max()}]")
        if images.size and not (np.all(np.isfinite(images)) and images.min() >= 0 and images.max() <= 1):
            raise PixelRangeError("pixel values must be finite and lie in [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.images.shape[1:]

    def take(self, indices, name: str | None = None) -> DatasetBundle:
        indices = np.asarray(indices, dtype=np.intp)
        return DatasetBundle(self.images[indices], self.labels[indices], self.class_count, name or self.name)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)


def to_bytes(bundle: DatasetBundle) -> bytes:
    n, c, h, w = bundle.images.shape
    body = (_HEADER.pack(MAGIC, VERSION, n, c, h, w, bundle.class_count)
            + bundle.images.astype("<f4").tobytes()
            + bundle.labels.astype("<u4").tobytes())
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(raw: bytes, name: str = "dataset") -> DatasetBundle:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise TruncatedPayloadError(f"truncated payload: header needs {_HEADER.size} bytes, file has {len(raw)}")
    _, version, n, c, h, w, class_count = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionError(f"unsupported AUG1 version {version} (this reader handles {VERSION})")
    pixels = n * c * h * w
    expected = _HEADER.size + 4 * pixels + 4 * n + 4
    if len(raw) < expected:
        raise TruncatedPayloadError(f"truncated payload: expected {expected} bytes, got {len(raw)}")
    if len(raw) > expected:
        raise FormatError(f"{len(raw) - expected} unexpected trailing bytes")
    (stored,) = struct.unpack_from("<I", raw, expected - 4)
    actual = zlib.crc32(raw[:expected - 4])
    if stored != actual:
        raise ChecksumError(f"checksum mismatch: stored {stored:#010x}, computed {actual:#010x}")
    images = np.frombuffer(raw, dtype="<f4", count=pixels, offset=_HEADER.size).reshape(n, c, h, w)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=_HEADER.size + 4 * pixels)
    if n and labels.max() >= class_count:
        raise LabelRangeError(f"label out of range [0, {class_count}): found {labels.max()}")
    return DatasetBundle(images.astype(np.float32), labels.astype(np.int64), class_count, name)


def save_binary(bundle: DatasetBundle, path) -> None:
    Path(path).write_bytes(to_bytes(bundle))


def load_binary(path) -> DatasetBundle:
    path = Path(path)
    return from_bytes(path.read_bytes(), name=path.stem)


def subset(bundle: DatasetBundle, size: int, seed: int = 0) -> DatasetBundle:
    """Uniform random subset without replacement; logs the per-class counts drawn."""
    if not 0 <= size <= len(bundle):
        raise ValueError(f"subset size {size} must lie in [0, {len(bundle)}]")
    idx = np.random.default_rng(seed).permutation(len(bundle))[:size]
    out = bundle.take(idx, name=f"{bundle.name}[{size}]")
    log.info("subset %s: per-class counts %s", out.name, out.class_counts().tolist())
    return out


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(bundle: DatasetBundle, batch_size: int, seed: int = 0, epoch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Shuffled minibatches for one epoch; the ragged tail is dropped."""
    if batch_size < 2:
        raise ValueError(f"batch_size must be >= 2, got {batch_size}")
    order = epoch_order(len(bundle), seed, epoch)
    for b in range(len(bundle) // batch_size):
        idx = order[b * batch_size:(b + 1) * batch_size]
        yield bundle.images[idx], bundle.labels[idx]


def disjoint_partner(n: int, taken: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """``size`` indices in ``range(n)`` drawn without replacement and avoiding ``taken``."""
    free = np.setdiff1d(np.arange(n), taken, assume_unique=False)
    if free.size < size:
        raise ValueError(f"need {size} indices outside the current batch, only {free.size} available")
    return np.sort(rng.choice(free, size=size, replace=False))


# ---------------------------------------------------------------------------
# synthetic sets

SYNTHETIC_KINDS = ("rotated_pair", "brightness_pair", "two_gaussians")


@dataclass(frozen=True)
class SyntheticSpec:
    """``param`` is the rotation angle in degrees (rotated_pair), the brightness
    magnitude mu (brightness_pair) or the mean gap (two_gaussians)."""

    kind: str = "rotated_pair"
    param: float = 20.0
    n: int = 256
    h: int = 16
    w: int = 16
    c: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}; valid: {', '.join(SYNTHETIC_KINDS)}")
        if self.n < 1 or self.h < 2 or self.w < 2 or self.c < 1:
            raise ValueError("synthetic sets need n >= 1, h, w >= 2 and c >= 1")

    @classmethod
    def parse(cls, text: str) -> SyntheticSpec:
        """Parse ``kind[:key=value,...]``, e.g. ``rotated_pair:angle=20,n=256``."""
        kind, _, rest = text.partition(":")
        kw: dict = {}
        for item in filter(None, rest.split(",")):
            key, sep, value = item.partition("=")
            if not sep:
                raise ValueError(f"expected key=value in synthetic spec, got {item!r}")
            key = key.strip()
            if key in ("angle", "mu", "gap", "param"):
                kw["param"] = float(value)
            elif key in ("n", "h", "w", "c", "seed"):
                kw[key] = int(value)
            else:
                raise ValueError(f"unknown synthetic spec key {key!r}")
        return cls(kind=kind.strip(), **kw)


@dataclass(frozen=True)
class GroundTruth:
    op: str | None
    mu: float | None


def rotation_mu(angle_deg: float) -> float:
    """Magnitude whose rotate parameter equals ``angle_deg``."""
    spec = SPEC_BY_NAME["rotate"]
    return (angle_deg - spec.offset) / spec.scale


def _blob_images(spec: SyntheticSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Two classes of elongated Gaussian blobs.

    Class 0 sits right of the centre, class 1 above it; each blob is stretched
    along the tangent of its polar angle, so a rotation both moves and tilts
    it, which no shear or translation of the whole batch reproduces.
    """
    n, h, w, c = spec.n, spec.h, spec.w, spec.c
    labels = rng.integers(0, 2, size=n)
    radius = 0.22 * min(h, w)
    phi = np.where(labels == 0, 0.0, np.pi / 2) + rng.normal(0, 0.08, size=n)
    r = radius + rng.normal(0, 0.03 * min(h, w), size=n)
    cx = (w - 1) / 2 + r * np.cos(phi)
    cy = (h - 1) / 2 - r * np.sin(phi)
    long_s = 0.16 * min(h, w) * rng.uniform(0.9, 1.1, size=n)
    short_s = 0.06 * min(h, w) * rng.uniform(0.9, 1.1, size=n)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dx = xx[None] - cx[:, None, None]
    dy = -(yy[None] - cy[:, None, None])
    # tangent direction (-sin phi, cos phi), radial (cos phi, sin phi)
    t = -np.sin(phi)[:, None, None] * dx + np.cos(phi)[:, None, None] * dy
    rad = np.cos(phi)[:, None, None] * dx + np.sin(phi)[:, None, None] * dy
    blob = np.exp(-0.5 * ((t / long_s[:, None, None]) ** 2 + (rad / short_s[:, None, None]) ** 2))
    colour = rng.uniform(0.6, 1.0, size=(n, c))
    images = colour[:, :, None, None] * blob[:, None]
    return np.clip(images, 0, 1), labels


def make_synthetic(spec: SyntheticSpec) -> tuple[DatasetBundle, DatasetBundle, GroundTruth]:
    """(source, target, ground truth) for a synthetic matching task."""
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "two_gaussians":
        labels = rng.integers(0, 2, size=spec.n)
        shape = (spec.n, spec.c, spec.h, spec.w)
        gap = spec.param if spec.param <= 1 else 0.5
        lo = np.clip(rng.normal(0.5 - gap / 2, 0.05, size=shape), 0, 1)
        hi = np.clip(rng.normal(0.5 + gap / 2, 0.05, size=shape), 0, 1)
        return (DatasetBundle(lo, labels, 2, "two_gaussians_source"),
                DatasetBundle(hi, labels, 2, "two_gaussians_target"), GroundTruth(None, None))

    images, labels = _blob_images(spec, rng)
    images = images.astype(np.float32)
    if spec.kind == "rotated_pair":
        op, mu = "rotate", rotation_mu(spec.param)
        if not 0 <= mu <= 1:
            raise ValueError(f"angle {spec.param} outside the rotate range")
    else:
        op, mu = "brightness", float(spec.param)
    target = reference.apply(op, images, mu).astype(np.float32)
    return (DatasetBundle(images, labels, 2, f"{spec.kind}_source"),
            DatasetBundle(target, labels, 2, f"{spec.kind}_target"), GroundTruth(op, mu))


def steps_per_epoch(n: int, batch_size: int) -> int:
    return max(1, math.floor(n / batch_size))
