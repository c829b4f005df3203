"""Plain numpy reference implementations of every operation.

These are written directly from the operation definitions (pixel loops,
explicit histograms) and never touch the autodiff engine.  They serve as the
forward oracle in tests and as the generator for synthetic target sets.
All functions take and return float arrays of shape [N, C, H, W].
"""

import math

import numpy as np

from .operations import CUTOUT_FILL, SPEC_BY_NAME, cutout_side, posterize_bits


def _param(kind, mu):
    spec = SPEC_BY_NAME[kind]
    return spec.offset + spec.scale * mu


def _bilinear_zero(img, sx, sy):
    """Sample [N, C, H, W] at pixel position (sx, sy), zero outside."""
    n, c, h, w = img.shape
    x0, y0 = math.floor(sx), math.floor(sy)
    fx, fy = sx - x0, sy - y0
    acc = np.zeros((n, c))
    for yy, wy in ((y0, 1 - fy), (y0 + 1, fy)):
        for xx, wx in ((x0, 1 - fx), (x0 + 1, fx)):
            if 0 <= xx < w and 0 <= yy < h and wx * wy != 0:
                acc += wx * wy * img[:, :, yy, xx]
    return acc


def source_position(kind, mu, i, j, h, w):
    """Input pixel position read by output pixel (row i, col j)."""
    cx, cy = (w - 1) / 2, (h - 1) / 2
    x, y = j - cx, i - cy
    if kind == "flip":
        sx, sy = -x, y
    elif kind == "rotate":
        a = math.radians(_param(kind, mu))
        sx = math.cos(a) * x - math.sin(a) * y
        sy = math.sin(a) * x + math.cos(a) * y
    elif kind == "shear_x":
        sx, sy = x + _param(kind, mu) * y, y
    elif kind == "shear_y":
        sx, sy = x, y + _param(kind, mu) * x
    elif kind == "translate_x":
        sx, sy = x - _param(kind, mu) * w, y
    elif kind == "translate_y":
        sx, sy = x, y - _param(kind, mu) * h
    else:
        raise ValueError(kind)
    return sx + cx, sy + cy


def affine(kind, x, mu):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            sx, sy = source_position(kind, mu, i, j, h, w)
            out[:, :, i, j] = _bilinear_zero(x, sx, sy)
    return np.clip(out, 0, 1)


def _gray(x):
    if x.shape[1] == 3:
        return 0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3]
    return x.mean(axis=1, keepdims=True)


def _blend(degenerate, x, t):
    return np.clip((1 - t) * degenerate + t * x, 0, 1)


def contrast(x, mu):
    x = np.asarray(x, dtype=np.float64)
    g = _gray(x)
    means = np.array([g[k].mean() for k in range(x.shape[0])]).reshape(-1, 1, 1, 1)
    return _blend(means, x, _param("contrast", mu))


def color(x, mu):
    x = np.asarray(x, dtype=np.float64)
    return _blend(_gray(x), x, _param("color", mu))


def brightness(x, mu):
    x = np.asarray(x, dtype=np.float64)
    return np.clip(_param("brightness", mu) * x, 0, 1)


def sharpness(x, mu=None):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    smooth = x.copy()
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            window = x[:, :, i - 1:i + 2, j - 1:j + 2]
            smooth[:, :, i, j] = (window.sum(axis=(2, 3)) + 4 * x[:, :, i, j]) / 13
    return np.clip(1.5 * x - 0.5 * smooth, 0, 1)


def invert(x, mu=None):
    return 1.0 - np.asarray(x)


def solarize(x, mu):
    x = np.asarray(x)
    threshold = np.float32(1.0 - np.float32(mu))
    return np.where(x >= threshold, 1.0 - x, x)


def posterize(x, mu):
    x = np.asarray(x, dtype=np.float64)
    levels = 2 ** posterize_bits(mu) - 1
    return np.floor(x * levels + 0.5) / levels


def auto_contrast(x, mu=None):
    x = np.asarray(x, dtype=np.float64)
    out = x.copy()
    for k in range(x.shape[0]):
        for ch in range(x.shape[1]):
            lo, hi = x[k, ch].min(), x[k, ch].max()
            if hi > lo:
                out[k, ch] = (x[k, ch] - lo) / (hi - lo)
    return out


def _equalize_channel(values):
    """Histogram equalization of one channel given 8-bit integer levels."""
    hist = [0] * 256
    for v in values:
        hist[v] += 1
    populated = [count for count in hist if count]
    if len(populated) <= 1:
        return None
    step = (sum(populated) - populated[-1]) // 255
    if not step:
        return None
    lut = []
    acc = step // 2
    for i in range(256):
        lut.append(min(255, acc // step))
        acc += hist[i]
    return [lut[v] / 255.0 for v in values]


def equalize(x, mu=None):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    out = x.copy()
    for k in range(n):
        for ch in range(c):
            levels = [min(255, max(0, int(math.floor(v * 255 + 0.5)))) for v in x[k, ch].ravel()]
            mapped = _equalize_channel(levels)
            if mapped is not None:
                out[k, ch] = np.array(mapped).reshape(h, w)
    return out


def cutout(x, mu, centers):
    x = np.asarray(x, dtype=np.float64)
    n, c, h, w = x.shape
    side = cutout_side(mu, h, w)
    out = x.copy()
    for k in range(n):
        cy, cx = centers[k]
        for i in range(h):
            for j in range(w):
                if cy - side // 2 <= i < cy - side // 2 + side and cx - side // 2 <= j < cx - side // 2 + side:
                    out[k, :, i, j] = CUTOUT_FILL
    return out


def sample_pairing(x, mu, perm):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        return x.copy()
    alpha = _param("sample_pairing", mu)
    return np.clip((1 - alpha) * x + alpha * x[perm], 0, 1)


def apply(kind, x, mu, centers=None, perm=None):
    """Dispatch by name; ``centers``/``perm`` carry the random draws."""
    if kind in ("shear_x", "shear_y", "translate_x", "translate_y", "rotate", "flip"):
        return affine(kind, x, mu)
    if kind == "cutout":
        return cutout(x, mu, centers)
    if kind == "sample_pairing":
        return sample_pairing(x, mu, perm)
    return globals()[kind](x, mu)
