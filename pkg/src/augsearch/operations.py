"""Differentiable image operations used as the candidate set of every stage.

Each operation takes a batch ``X`` of shape [N, C, H, W] with values in
[0, 1] and a scalar magnitude ``mu`` in [0, 1] and returns a batch of the same
shape, clamped to [0, 1].  Operations whose forward pass is piecewise
constant in ``mu`` (solarize, posterize, cutout) receive a straight-through
gradient of exactly 1 per output element with respect to ``mu``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CONTINUOUS = "continuous"
DISCRETE = "discrete"
NONE = "none"

LUMA = (0.299, 0.587, 0.114)
SHARPEN_KERNEL = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float32) / 13.0
SHARPNESS_FACTOR = 1.5
CUTOUT_FILL = 0.5


@dataclass(frozen=True)
class OpSpec:
    """Operation metadata: magnitude class plus ``param = offset + scale * mu``."""

    name: str
    magnitude_class: str
    param: str
    offset: float = 0.0
    scale: float = 0.0

    def magnitude_to_param(self, mu: float) -> float:
        return self.offset + self.scale * mu

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "magnitude_class": self.magnitude_class,
            "param": self.param,
            "offset": self.offset,
            "scale": self.scale,
        }


OP_SPECS: tuple[OpSpec, ...] = (
    OpSpec("shear_x", CONTINUOUS, "shear_factor", -0.3, 0.6),
    OpSpec("shear_y", CONTINUOUS, "shear_factor", -0.3, 0.6),
    OpSpec("translate_x", CONTINUOUS, "shift_fraction", -0.3, 0.6),
    OpSpec("translate_y", CONTINUOUS, "shift_fraction", -0.3, 0.6),
    OpSpec("rotate", CONTINUOUS, "angle_degrees", -30.0, 60.0),
    OpSpec("flip", NONE, "none"),
    OpSpec("solarize", DISCRETE, "threshold", 1.0, -1.0),
    OpSpec("posterize", DISCRETE, "bits", 1.0, 7.0),
    OpSpec("invert", NONE, "none"),
    OpSpec("contrast", CONTINUOUS, "blend", 0.1, 1.8),
    OpSpec("color", CONTINUOUS, "blend", 0.1, 1.8),
    OpSpec("brightness", CONTINUOUS, "blend", 0.1, 1.8),
    OpSpec("sharpness", NONE, "none"),
    OpSpec("auto_contrast", NONE, "none"),
    OpSpec("equalize", NONE, "none"),
    OpSpec("cutout", DISCRETE, "side_fraction", 0.0, 0.5),
    OpSpec("sample_pairing", CONTINUOUS, "blend", 0.0, 0.4),
)

OP_NAMES: tuple[str, ...] = tuple(s.name for s in OP_SPECS)
OP_INDEX = {name: i for i, name in enumerate(OP_NAMES)}
SPEC_BY_NAME = {s.name: s for s in OP_SPECS}


def op_table() -> list[dict]:
    return [s.to_dict() for s in OP_SPECS]


def posterize_bits(mu: float) -> int:
    return int(min(8, max(1, math.floor(1.0 + 7.0 * float(mu) + 0.5))))


def cutout_side(mu: float, h: int, w: int) -> int:
    return int(math.floor(0.5 * float(mu) * min(h, w) + 0.5))


def cutout_centers(rng: np.random.Generator, n: int, h: int, w: int) -> np.ndarray:
    """Patch centres as an [n, 2] integer array of (row, col)."""
    return np.stack([rng.integers(0, h, size=n), rng.integers(0, w, size=n)], axis=1)


def pairing_permutation(rng: np.random.Generator, n: int) -> np.ndarray:
    """Random partner index per image; no image is paired with itself when n > 1."""
    order = rng.permutation(n)
    partner = np.empty(n, dtype=np.intp)
    partner[order] = np.roll(order, -1)
    return partner


def _as_mu(mu) -> Tensor:
    return mu if isinstance(mu, Tensor) else Tensor(mu)


def straight_through(out: Tensor, mu: Tensor) -> Tensor:
    """Add ``mu - stop_grad(mu)``: the value is unchanged, d(out_ij)/d(mu) gains 1."""
    return out + (mu - ad.stop_grad(mu))


def straight_through_wrap(forward, x: Tensor, mu) -> Tensor:
    """Wrap an arbitrary (possibly non-differentiable) image map.

    The forward value is ``forward(x, mu)`` exactly; the backward pass sees
    d(out)/d(mu) = 1 per element and nothing else.
    """
    mu = _as_mu(mu)
    value = forward(x.data if isinstance(x, Tensor) else np.asarray(x), float(mu.data))
    return straight_through(Tensor(np.asarray(value, dtype=mu.dtype)), mu)


# ---------------------------------------------------------------------------
# affine family


def _centered_coords(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys = np.arange(h, dtype=np.float64) - (h - 1) / 2.0
    xs = np.arange(w, dtype=np.float64) - (w - 1) / 2.0
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return xx, yy


def affine_matrix(kind: str, mu: float, h: int, w: int) -> np.ndarray:
    """Entries (m00, m01, m02, m10, m11, m12) mapping output to input pixel offsets.

    Coordinates are in pixels relative to the image centre, y pointing down.
    Positive rotation turns content counter-clockwise on screen, positive
    translation moves content right/down.
    """
    spec = SPEC_BY_NAME[kind]
    if kind == "flip":
        return np.array([-1.0, 0.0, 0.0, 0.0, 1.0, 0.0])
    p = spec.offset + spec.scale * mu
    if kind == "rotate":
        a = math.radians(p)
        c, s = math.cos(a), math.sin(a)
        return np.array([c, -s, 0.0, s, c, 0.0])
    if kind == "shear_x":
        return np.array([1.0, p, 0.0, 0.0, 1.0, 0.0])
    if kind == "shear_y":
        return np.array([1.0, 0.0, 0.0, p, 1.0, 0.0])
    if kind == "translate_x":
        return np.array([1.0, 0.0, -p * w, 0.0, 1.0, 0.0])
    if kind == "translate_y":
        return np.array([1.0, 0.0, 0.0, 0.0, 1.0, -p * h])
    raise ValueError(f"{kind!r} is not an affine operation")


def affine_matrix_grad(kind: str, mu: float, h: int, w: int) -> np.ndarray:
    """d(affine_matrix)/d(mu)."""
    spec = SPEC_BY_NAME[kind]
    d = np.zeros(6)
    if kind == "rotate":
        a = math.radians(spec.offset + spec.scale * mu)
        c, s = math.cos(a), math.sin(a)
        d[:] = np.array([-s, -c, 0.0, c, -s, 0.0]) * math.radians(spec.scale)
    elif kind == "shear_x":
        d[1] = spec.scale
    elif kind == "shear_y":
        d[3] = spec.scale
    elif kind == "translate_x":
        d[2] = -spec.scale * w
    elif kind == "translate_y":
        d[5] = -spec.scale * h
    return d


def _grid_from_matrix(m: np.ndarray, h: int, w: int) -> np.ndarray:
    xx, yy = _centered_coords(h, w)
    gx = (m[0] * xx + m[1] * yy + m[2]) * (2.0 / w)
    gy = (m[3] * xx + m[4] * yy + m[5]) * (2.0 / h)
    return np.stack([gx, gy], axis=-1)[None]


def affine_grid(kind: str, mu, h: int, w: int) -> Tensor:
    """Normalized sampling grid [1, H, W, 2] (float64) for an affine op, differentiable in mu."""
    mu = _as_mu(mu)
    m = float(mu.data)
    grid = _grid_from_matrix(affine_matrix(kind, m, h, w), h, w)

    def backward(g):
        dgrid = _grid_from_matrix(affine_matrix_grad(kind, m, h, w), h, w)
        return (np.asarray(np.sum(g * dgrid), dtype=mu.dtype).reshape(mu.shape),)

    return ad.primitive(grid, (mu,), backward)


def apply_affine(kind: str, x: Tensor, mu) -> Tensor:
    _, _, h, w = x.shape
    grid = affine_grid(kind, mu, h, w)
    return ad.clamp01(ad.grid_sample_bilinear(x, grid))


def apply_affine_many(kinds, x: Tensor, mus) -> Tensor:
    """Several affine operations on the same batch at once: [G, N, C, H, W].

    Slice ``g`` is bitwise equal to ``apply_affine(kinds[g], x, mus[g])``.
    """
    _, _, h, w = x.shape
    grids = ad.concat([affine_grid(k, mu, h, w) for k, mu in zip(kinds, mus)], axis=0)
    return ad.clamp01(ad.grid_sample_many(x, grids))


# ---------------------------------------------------------------------------
# colour family


def luminance(x: Tensor) -> Tensor:
    """Per-pixel grey level [N, 1, H, W]."""
    c = x.shape[1]
    if c == 3:
        weights = Tensor(np.array(LUMA, dtype=np.float32).reshape(1, 3, 1, 1), dtype=x.dtype)
        return (x * weights).sum(axis=1, keepdims=True)
    return x.mean(axis=1, keepdims=True)


def blend_weight(kind: str, mu: Tensor) -> Tensor:
    spec = SPEC_BY_NAME[kind]
    t = spec.offset + spec.scale * mu
    return 2.0 * ad.clamp01(t * 0.5)


def blur(x: Tensor) -> Tensor:
    """3x3 smoothing of interior pixels; the one-pixel border is left as is."""
    n, c, h, w = x.shape
    if h < 3 or w < 3:
        return x
    k = Tensor(SHARPEN_KERNEL.reshape(1, 1, 3, 3), dtype=x.dtype)
    inner = ad.conv2d(x.reshape(n * c, 1, h, w), k).reshape(n, c, h - 2, w - 2)
    mask = np.zeros((1, 1, h, w), dtype=bool)
    mask[..., 1:-1, 1:-1] = True
    return ad.where(mask, ad.pad2d(inner, 1), x)


def apply_color_enhance(kind: str, x: Tensor, mu) -> Tensor:
    mu = _as_mu(mu)
    if kind == "sharpness":
        return ad.clamp01(SHARPNESS_FACTOR * x - (SHARPNESS_FACTOR - 1.0) * blur(x))
    t = blend_weight(kind, mu)
    if kind == "brightness":
        return ad.clamp01(t * x)
    if kind == "contrast":
        degenerate = luminance(x).mean(axis=(1, 2, 3), keepdims=True)
    elif kind == "color":
        degenerate = luminance(x)
    else:
        raise ValueError(f"{kind!r} is not a colour-enhancing operation")
    return ad.clamp01((1.0 - t) * degenerate + t * x)


def apply_invert(x: Tensor) -> Tensor:
    return 1.0 - x


def apply_solarize(x: Tensor, mu) -> Tensor:
    mu = _as_mu(mu)
    threshold = 1.0 - float(mu.data)
    inverted = x.data >= np.float32(threshold)
    return straight_through(ad.where(inverted, 1.0 - x, x), mu)


def apply_posterize(x: Tensor, mu) -> Tensor:
    mu = _as_mu(mu)
    levels = float(2 ** posterize_bits(float(mu.data)) - 1)
    q = np.floor(x.data.astype(np.float64) * levels + 0.5) / levels
    return straight_through(ad.pass_through(x, q.astype(x.dtype)), mu)


def apply_auto_contrast(x: Tensor) -> Tensor:
    lo = x.data.min(axis=(2, 3), keepdims=True)
    hi = x.data.max(axis=(2, 3), keepdims=True)
    spread = hi > lo
    scale = np.where(spread, 1.0 / np.where(spread, hi - lo, 1.0), 1.0).astype(x.dtype)
    offset = np.where(spread, lo, 0.0).astype(x.dtype)
    return ad.clamp01((x - Tensor(offset)) * Tensor(scale))


def equalize_lut(levels: np.ndarray) -> np.ndarray:
    """Cumulative-histogram lookup tables for 8-bit ``levels`` [M, P] -> [M, 256].

    Rows whose histogram has a single populated bin (or too few samples to
    form a step) get an identity table, flagged by returning -1 in column 0.
    """
    m = levels.shape[0]
    offsets = (np.arange(m) * 256)[:, None]
    hist = np.bincount((levels + offsets).ravel(), minlength=m * 256).reshape(m, 256)
    nonzero = hist > 0
    last_bin = 255 - np.argmax(nonzero[:, ::-1], axis=1)
    last = hist[np.arange(m), last_bin]
    step = (hist.sum(axis=1) - last) // 255
    degenerate = (nonzero.sum(axis=1) <= 1) | (step == 0)
    safe_step = np.where(degenerate, 1, step)[:, None]
    before = np.cumsum(hist, axis=1) - hist
    lut = np.minimum(255, (safe_step // 2 + before) // safe_step)
    lut[degenerate] = -1
    return lut


def apply_equalize(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    flat = x.data.reshape(n * c, h * w)
    levels = np.clip(np.floor(flat.astype(np.float64) * 255.0 + 0.5), 0, 255).astype(np.int64)
    lut = equalize_lut(levels)
    mapped = np.take_along_axis(lut, levels, axis=1) / 255.0
    keep = lut[:, :1] < 0
    out = np.where(keep, flat, mapped).reshape(x.shape).astype(x.dtype)
    return ad.pass_through(x, out)


# ---------------------------------------------------------------------------
# other


def cutout_mask(centers: np.ndarray, side: int, h: int, w: int) -> np.ndarray:
    n = centers.shape[0]
    mask = np.zeros((n, 1, h, w), dtype=bool)
    if side <= 0:
        return mask
    for i, (cy, cx) in enumerate(centers):
        top, left = int(cy) - side // 2, int(cx) - side // 2
        mask[i, 0, max(top, 0):max(top + side, 0), max(left, 0):max(left + side, 0)] = True
    return mask


def apply_cutout(x: Tensor, mu, rng: np.random.Generator | None = None, centers: np.ndarray | None = None) -> Tensor:
    mu = _as_mu(mu)
    n, _, h, w = x.shape
    if centers is None:
        centers = cutout_centers(rng if rng is not None else np.random.default_rng(), n, h, w)
    mask = cutout_mask(centers, cutout_side(float(mu.data), h, w), h, w)
    out = ad.where(mask, Tensor(np.float32(CUTOUT_FILL), dtype=x.dtype), x)
    return straight_through(out, mu)


def apply_sample_pairing(x: Tensor, mu, rng: np.random.Generator | None = None, perm: np.ndarray | None = None) -> Tensor:
    mu = _as_mu(mu)
    n = x.shape[0]
    if n < 2:
        return x
    if perm is None:
        perm = pairing_permutation(rng if rng is not None else np.random.default_rng(), n)
    spec = SPEC_BY_NAME["sample_pairing"]
    alpha = spec.offset + spec.scale * mu
    return ad.clamp01((1.0 - alpha) * x + alpha * x[perm])


AFFINE_OPS = ("shear_x", "shear_y", "translate_x", "translate_y", "rotate", "flip")
COLOR_OPS = ("contrast", "color", "brightness", "sharpness")


def apply(kind: str, x: Tensor, mu, rng: np.random.Generator | None = None) -> Tensor:
    """Apply operation ``kind`` to the batch ``x`` at magnitude ``mu``."""
    if kind in AFFINE_OPS:
        return apply_affine(kind, x, mu)
    if kind in COLOR_OPS:
        return apply_color_enhance(kind, x, mu)
    if kind == "invert":
        return apply_invert(x)
    if kind == "solarize":
        return apply_solarize(x, mu)
    if kind == "posterize":
        return apply_posterize(x, mu)
    if kind == "auto_contrast":
        return apply_auto_contrast(x)
    if kind == "equalize":
        return apply_equalize(x)
    if kind == "cutout":
        return apply_cutout(x, mu, rng)
    if kind == "sample_pairing":
        return apply_sample_pairing(x, mu, rng)
    raise ValueError(f"unknown operation {kind!r}; expected one of {', '.join(OP_NAMES)}")
