"""Polar/cartesian B-scan representations and bilinear resampling.

Conventions used throughout the package:

* polar arrays are ``[A, D]``: axis 0 is the angle (A-scan index), axis 1 depth
* angle index 0 points along +x from the image center; angles increase
  counter-clockwise as displayed (row index grows downwards, so ``y = c - row``)
* depth 0 sits on the continuous center ``(N - 1) / 2`` of an ``N x N`` cartesian
  image and depth ``D - 1`` lies on the circle of radius ``N / 2``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import distance_transform_edt

PAD_VALUE = 0.0


def _check_image(data: np.ndarray, kind: str) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"{kind} data must be 2-D, got shape {data.shape}")
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{kind} data contains non-finite values")
    if data.min(initial=0.0) < 0.0 or data.max(initial=0.0) > 1.0:
        raise ValueError(f"{kind} data must lie in [0, 1]")
    return data


@dataclass(frozen=True)
class PolarImage:
    """B-scan indexed by (angle, depth)."""

    data: np.ndarray

    def __post_init__(self):
        data = _check_image(self.data, "polar")
        if data.shape[0] < 4 or data.shape[1] < 4:
            raise ValueError(f"polar image needs at least 4x4 samples, got {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def n_angles(self) -> int:
        return self.data.shape[0]

    @property
    def n_depth(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def disk_mask(size: int) -> np.ndarray:
    """Pixels whose center lies within radius ``size / 2`` of the image center."""
    c = (size - 1) / 2.0
    yy, xx = np.mgrid[0:size, 0:size]
    return (xx - c) ** 2 + (yy - c) ** 2 <= (size / 2.0) ** 2


@dataclass(frozen=True)
class CartesianImage:
    """Square cross-section with a field-of-view mask; outside pixels are 0."""

    data: np.ndarray
    fov_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        data = _check_image(self.data, "cartesian")
        if data.shape[0] != data.shape[1]:
            raise ValueError(f"cartesian image must be square, got {data.shape}")
        mask = self.fov_mask
        if mask is None:
            mask = disk_mask(data.shape[0])
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != data.shape:
            raise ValueError("fov_mask shape does not match data")
        if np.any(data[~mask] != PAD_VALUE):
            raise ValueError("pixels outside the field of view must equal the pad value")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "fov_mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape


def bilinear_sample(data: np.ndarray, rows: np.ndarray, cols: np.ndarray, *, wrap_rows: bool = False) -> np.ndarray:
    """Sample ``data`` at fractional (row, col) positions.

    Columns are clamped to the valid range; rows either clamp or wrap
    periodically (used for the angular axis of polar images).
    """
    n_rows, n_cols = data.shape
    cols = np.clip(cols, 0.0, n_cols - 1)
    c0 = np.floor(cols).astype(np.intp)
    c0 = np.minimum(c0, n_cols - 2) if n_cols > 1 else c0
    fc = cols - c0
    c1 = np.minimum(c0 + 1, n_cols - 1)
    if wrap_rows:
        rows = np.mod(rows, n_rows)
        r0 = np.floor(rows).astype(np.intp) % n_rows
        fr = rows - np.floor(rows)
        r1 = (r0 + 1) % n_rows
    else:
        rows = np.clip(rows, 0.0, n_rows - 1)
        r0 = np.floor(rows).astype(np.intp)
        r0 = np.minimum(r0, n_rows - 2) if n_rows > 1 else r0
        fr = rows - r0
        r1 = np.minimum(r0 + 1, n_rows - 1)
    # a + t * (b - a) reproduces equal neighbours bit-exactly
    top = data[r0, c0] + fc * (data[r0, c1] - data[r0, c0])
    bottom = data[r1, c0] + fc * (data[r1, c1] - data[r1, c0])
    return top + fr * (bottom - top)


def polar_to_cartesian(polar: PolarImage, out_size: int) -> CartesianImage:
    """Scan-convert a B-scan into an ``out_size x out_size`` cross-section."""
    if out_size < 4:
        raise ValueError(f"out_size must be >= 4, got {out_size}")
    if not isinstance(polar, PolarImage):
        polar = PolarImage(polar)
    n_angles, n_depth = polar.shape
    c = (out_size - 1) / 2.0
    yy, xx = np.mgrid[0:out_size, 0:out_size].astype(np.float64)
    x = xx - c
    y = c - yy
    radius = np.hypot(x, y)
    mask = radius <= out_size / 2.0
    depth_idx = radius * (n_depth - 1) / (out_size / 2.0)
    angle_idx = np.mod(np.arctan2(y, x), 2 * np.pi) * n_angles / (2 * np.pi)
    out = bilinear_sample(polar.data, angle_idx, depth_idx, wrap_rows=True)
    out = np.where(mask, out, PAD_VALUE)
    return CartesianImage(np.clip(out, 0.0, 1.0), mask)


def cartesian_to_polar(cart: CartesianImage, n_angles: int, n_depth: int) -> PolarImage:
    """Sample a cross-section along rays from its center."""
    if n_angles < 4 or n_depth < 4:
        raise ValueError("n_angles and n_depth must be >= 4")
    if not isinstance(cart, CartesianImage):
        cart = CartesianImage(cart)
    size = cart.shape[0]
    # rim rays straddle the mask edge; give outside pixels their nearest inside value
    nearest = distance_transform_edt(~cart.fov_mask, return_distances=False, return_indices=True)
    data = cart.data[tuple(nearest)]
    c = (size - 1) / 2.0
    theta = 2 * np.pi * np.arange(n_angles) / n_angles
    radius = np.arange(n_depth) * (size / 2.0) / (n_depth - 1)
    rr, tt = np.meshgrid(radius, theta)
    cols = c + rr * np.cos(tt)
    rows = c - rr * np.sin(tt)
    out = bilinear_sample(data, rows, cols)
    return PolarImage(np.clip(out, 0.0, 1.0))


def resize_array(data: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centers (no antialiasing)."""
    in_h, in_w = data.shape
    if (in_h, in_w) == (h, w):
        return data.copy()
    rows = (np.arange(h) + 0.5) * (in_h / h) - 0.5
    cols = (np.arange(w) + 0.5) * (in_w / w) - 0.5
    rr, cc = np.meshgrid(np.maximum(rows, 0.0), np.maximum(cols, 0.0), indexing="ij")
    return bilinear_sample(data, rr, cc)


def resize(img, h: int, w: int):
    """Resize a polar or cartesian image; values are clamped to [0, 1]."""
    if h < 4 or w < 4:
        raise ValueError(f"target shape must be >= 4x4, got {(h, w)}")
    if isinstance(img, PolarImage):
        return PolarImage(np.clip(resize_array(img.data, h, w), 0.0, 1.0))
    if isinstance(img, CartesianImage):
        if h != w:
            raise ValueError("cartesian images stay square")
        if img.shape == (h, w):
            return CartesianImage(img.data.copy(), img.fov_mask.copy())
        mask = resize_array(img.fov_mask.astype(np.float64), h, w) >= 0.5
        data = np.clip(resize_array(img.data, h, w), 0.0, 1.0)
        return CartesianImage(np.where(mask, data, PAD_VALUE), mask)
    raise TypeError(f"unsupported image type {type(img).__name__}")


def crop(img, top: int, left: int, size: int):
    """Cut a ``size x size`` window with its top-left corner at (top, left)."""
    h, w = img.shape
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image extent {img.shape}")
    if not (0 <= top <= h - size and 0 <= left <= w - size):
        raise ValueError("crop window outside image")
    window = (slice(top, top + size), slice(left, left + size))
    if isinstance(img, PolarImage):
        return PolarImage(img.data[window].copy())
    return CartesianImage(img.data[window].copy(), img.fov_mask[window].copy())


def center_crop(img, size: int):
    """Centered window; odd leftover margins go to the bottom/right."""
    h, w = img.shape
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image extent {img.shape}")
    return crop(img, (h - size) // 2, (w - size) // 2, size)


def save_png16(data: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    scaled = np.round(np.clip(data, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(scaled).save(path)


def load_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype != np.uint16:
        arr = arr.astype(np.uint16)
    return arr.astype(np.float64) / 65535.0
