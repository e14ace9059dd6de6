"""Geometry images: (3, H, W) grids of surface points.

Boundary handling uses rotational padding. The image is tiled over the plane
so that tile (ti, tj) holds the original when ti + tj is even and its 180
degree rotation otherwise; padding by k reads the k-pixel frame around the
centre tile.
"""
from __future__ import annotations

import os

import numpy as np

from .autodiff import Tensor, _result, tensor


def rotational_pad_indices(h: int, w: int, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Source (row, col) of every pixel of the padded (h+2k, w+2k) grid."""
    if k < 0:
        raise ValueError("rotational_pad: k must be non-negative")
    i = np.arange(h + 2 * k)[:, None] - k
    j = np.arange(w + 2 * k)[None, :] - k
    ti, li = np.divmod(i, h)
    tj, lj = np.divmod(j, w)
    flip = (ti + tj) % 2 == 1
    rows = np.where(flip, h - 1 - li, li)
    cols = np.where(flip, w - 1 - lj, lj)
    return rows, cols


def rotational_pad(x, k: int):
    """Pad the last two axes by ``k`` with rotated copies.

    Works on arrays and tensors of shape (..., h, w); tensors stay on the tape.
    """
    if not isinstance(x, Tensor):
        arr = np.asarray(x)
        rows, cols = rotational_pad_indices(arr.shape[-2], arr.shape[-1], k)
        return arr[..., rows, cols]
    h, w = x.shape[-2:]
    rows, cols = rotational_pad_indices(h, w, k)
    flat = (rows * w + cols).ravel()
    lead = x.shape[:-2]

    def fn(g):
        g2 = g.reshape(-1, flat.size)
        rows_ = g2.shape[0]
        target = (np.arange(rows_)[:, None] * (h * w) + flat[None, :]).ravel()
        dx = np.bincount(target, weights=g2.ravel(), minlength=rows_ * h * w)
        return (dx.reshape(*lead, h, w),)

    return _result(x.data[..., rows, cols], (x,), fn, "rotational_pad")


def rot180(image):
    """Rotate the last two axes by 180 degrees."""
    return np.asarray(image)[..., ::-1, ::-1].copy()


def to_point_cloud(image):
    """(3, H, W) -> (H*W, 3), row-major; a leading batch axis is kept."""
    if isinstance(image, Tensor):
        from .autodiff import reshape, transpose
        *lead, c, h, w = image.shape
        flat = reshape(image, (*lead, c, h * w))
        return transpose(flat, tuple(range(len(lead))) + (len(lead) + 1, len(lead)))
    arr = np.asarray(image, dtype=np.float64)
    *lead, c, h, w = arr.shape
    return np.swapaxes(arr.reshape(*lead, c, h * w), -1, -2).copy()


def from_point_cloud(points, height: int, width: int) -> np.ndarray:
    P = np.asarray(points, dtype=np.float64)
    if P.shape[-2] != height * width:
        raise ValueError(f"from_point_cloud: {P.shape[-2]} points do not fill {height}x{width}")
    return np.swapaxes(P, -1, -2).reshape(*P.shape[:-2], 3, height, width).copy()


def stretch_to_bytes(image) -> np.ndarray:
    """Per-channel linear stretch to 0..255 with round-half-up; returns (H, W, 3) uint8."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) geometry image, got {arr.shape}")
    out = np.zeros(arr.shape, dtype=np.uint8)
    for c in range(3):
        lo, hi = arr[c].min(), arr[c].max()
        if hi > lo:
            out[c] = np.floor(255.0 * (arr[c] - lo) / (hi - lo) + 0.5).astype(np.uint8)
    return out.transpose(1, 2, 0)


def ppm_bytes(image) -> bytes:
    rgb = stretch_to_bytes(image)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def render_raster(image, path: str | os.PathLike) -> None:
    """Write a binary PPM of the stretched geometry image."""
    with open(path, "wb") as fh:
        fh.write(ppm_bytes(image))
