"""Preprocessed in-memory image stacks for training and evaluation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import PolarImage, load_png16, polar_to_cartesian, resize_array
from .manifest import DatasetManifest, LabeledFrame

_CACHE: dict[tuple[str, int], tuple[np.ndarray, np.ndarray]] = {}
_CACHE_LIMIT_PX = 128


@dataclass
class FrameArrays:
    """Resized polar and cartesian stacks ``[N, R, R]`` with class ids ``[N]``."""

    polar: np.ndarray
    cartesian: np.ndarray
    cart_mask: np.ndarray
    labels: np.ndarray
    n_classes: int
    frames: tuple[LabeledFrame, ...] | None = None

    def __post_init__(self):
        n = len(self.labels)
        if self.polar.shape[0] != n or self.cartesian.shape[0] != n:
            raise ValueError("image stacks and labels differ in length")

    def __len__(self):
        return len(self.labels)

    @property
    def size(self) -> int:
        return self.polar.shape[1]

    def take(self, idx) -> "FrameArrays":
        idx = np.asarray(idx, dtype=np.int64)
        frames = None if self.frames is None else tuple(self.frames[i] for i in idx)
        return FrameArrays(
            self.polar[idx], self.cartesian[idx], self.cart_mask, self.labels[idx], self.n_classes, frames
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def cartesian_mask(resize_to: int) -> np.ndarray:
    from ..geometry import disk_mask

    return resize_array(disk_mask(2 * resize_to).astype(np.float64), resize_to, resize_to) >= 0.5


def preprocess(polar: np.ndarray, resize_to: int) -> tuple[np.ndarray, np.ndarray]:
    """Resize the polar frame and its scan-converted cross-section to ``resize_to``."""
    img = PolarImage(polar)
    cart = polar_to_cartesian(img, 2 * img.n_depth)
    mask = cartesian_mask(resize_to)
    p = np.clip(resize_array(img.data, resize_to, resize_to), 0.0, 1.0)
    c = np.clip(resize_array(cart.data, resize_to, resize_to), 0.0, 1.0)
    return p.astype(np.float32), np.where(mask, c, 0.0).astype(np.float32)


def arrays_from_images(images, labels, n_classes: int, resize_to: int, frames=None) -> FrameArrays:
    pairs = [preprocess(im, resize_to) for im in images]
    polar = np.stack([p for p, _ in pairs]) if pairs else np.zeros((0, resize_to, resize_to), np.float32)
    cart = np.stack([c for _, c in pairs]) if pairs else np.zeros((0, resize_to, resize_to), np.float32)
    return FrameArrays(polar, cart, cartesian_mask(resize_to), np.asarray(labels, dtype=np.int64), n_classes, frames)


def load_arrays(manifest: DatasetManifest, n_classes: int, resize_to: int) -> FrameArrays:
    """Read, scan-convert and resize every frame of ``manifest``."""
    polar, cart = [], []
    for frame in manifest.frames:
        path = str(manifest.resolve(frame))
        key = (path, resize_to)
        if key not in _CACHE:
            pair = preprocess(load_png16(path), resize_to)
            if resize_to > _CACHE_LIMIT_PX:
                polar.append(pair[0])
                cart.append(pair[1])
                continue
            _CACHE[key] = pair
        polar.append(_CACHE[key][0])
        cart.append(_CACHE[key][1])
    shape = (0, resize_to, resize_to)
    return FrameArrays(
        np.stack(polar) if polar else np.zeros(shape, np.float32),
        np.stack(cart) if cart else np.zeros(shape, np.float32),
        cartesian_mask(resize_to),
        manifest.labels(n_classes),
        n_classes,
        manifest.frames,
    )


def clear_cache() -> None:
    _CACHE.clear()
