"""Representation-specific augmentation and the evaluation-time policy."""

from __future__ import annotations

from enum import Enum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .geometry import (
    PAD_VALUE,
    CartesianImage,
    PolarImage,
    bilinear_sample,
    center_crop,
    crop,
)


class Representation(str, Enum):
    polar = "polar"
    cartesian = "cartesian"


class RngStream:
    """Counter-based random stream: each draw is a pure function of (seed, counter).

    Every call consumes one counter value, so two streams with the same
    ``(seed, counter)`` produce identical sequences regardless of history.
    """

    def __init__(self, seed: int, counter: int = 0):
        if seed < 0 or counter < 0:
            raise ValueError("seed and counter must be unsigned")
        self.seed = int(seed)
        self.counter = int(counter)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def __eq__(self, other):
        return isinstance(other, RngStream) and (self.seed, self.counter) == (
            other.seed,
            other.counter,
        )

    def generator(self) -> np.random.Generator:
        gen = np.random.default_rng([self.seed, self.counter])
        self.counter += 1
        return gen

    def integers(self, low: int, high: int, size=None):
        """Uniform integers on the closed interval [low, high]."""
        return self.generator().integers(low, high, size=size, endpoint=True)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator().uniform(low, high, size=size)

    def spawn(self, worker_id: int) -> "RngStream":
        """Independent child stream for a parallel worker."""
        seed = int(np.random.SeedSequence([self.seed, worker_id]).generate_state(1)[0])
        return RngStream(seed)


class AugmentPolicy(BaseModel):
    model_config = ConfigDict(extra="forbid")

    representation: Representation
    train_mode: bool = True
    crop_size: int = Field(270, gt=0)
    rotation_range_deg: tuple[float, float] | None = None  # None: [0, 360] cartesian, none polar
    shift_range_px: tuple[int, int] | None = None  # None: [0, A] polar (one full turn), none cartesian
    flip_axes: frozenset[str] = frozenset()
    rng_seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check(self):
        cartesian = self.representation is Representation.cartesian
        allowed = {"x", "y"} if cartesian else {"theta"}
        unknown = set(self.flip_axes) - allowed
        if unknown:
            raise ValueError(f"flip axes {sorted(unknown)} invalid for {self.representation.value} images")
        if cartesian:
            if self.shift_range_px not in (None, (0, 0)):
                raise ValueError("cartesian policies cannot contain circular shifts")
            rot = self.rotation_range_deg if self.rotation_range_deg is not None else (0.0, 360.0)
            object.__setattr__(self, "rotation_range_deg", rot)
            object.__setattr__(self, "shift_range_px", (0, 0))
        else:
            if self.rotation_range_deg not in (None, (0.0, 0.0)):
                raise ValueError("polar policies cannot contain rotations")
            object.__setattr__(self, "rotation_range_deg", (0.0, 0.0))
        lo, hi = self.rotation_range_deg
        if lo > hi:
            raise ValueError("rotation_range_deg must be an increasing interval")
        if self.shift_range_px is not None:
            lo, hi = self.shift_range_px
            if lo > hi or lo < 0:
                raise ValueError("shift_range_px must be a non-negative increasing interval")
        return self

    @classmethod
    def standard_train(cls, representation, crop_size: int = 270, seed: int = 0) -> "AugmentPolicy":
        representation = Representation(representation)
        flips = {"x", "y"} if representation is Representation.cartesian else {"theta"}
        return cls(
            representation=representation,
            crop_size=crop_size,
            flip_axes=frozenset(flips),
            rng_seed=seed,
        )

    @classmethod
    def no_augmentation(cls, representation, crop_size: int = 270, seed: int = 0) -> "AugmentPolicy":
        """Train-mode policy that only random-crops."""
        return cls(
            representation=Representation(representation),
            crop_size=crop_size,
            rotation_range_deg=(0.0, 0.0),
            shift_range_px=(0, 0),
            rng_seed=seed,
        )

    def evaluation(self) -> "AugmentPolicy":
        return self.model_copy(update={"train_mode": False})


def rotate_array(data: np.ndarray, alpha_deg: float, fill: float = PAD_VALUE) -> np.ndarray:
    """Counter-clockwise rotation about the image center with bilinear sampling."""
    if not np.isfinite(alpha_deg):
        raise ValueError("rotation angle must be finite")
    alpha = float(alpha_deg) % 360.0
    if alpha == 0.0:
        return data.copy()
    h, w = data.shape
    # quarter turns are exact permutations
    if h == w and alpha in (90.0, 180.0, 270.0):
        return np.rot90(data, k=int(alpha // 90)).copy()
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    x = xx - cx
    y = cy - yy
    a = np.deg2rad(alpha)
    cos_a, sin_a = np.cos(a), np.sin(a)
    # inverse rotation finds the source location of every output pixel
    xs = cos_a * x + sin_a * y
    ys = -sin_a * x + cos_a * y
    cols = xs + cx
    rows = cy - ys
    inside = (cols >= -1e-9) & (cols <= w - 1 + 1e-9) & (rows >= -1e-9) & (rows <= h - 1 + 1e-9)
    out = bilinear_sample(data, rows, cols)
    return np.where(inside, out, fill)


def rotate_cartesian(img: CartesianImage, alpha_deg: float) -> CartesianImage:
    data = rotate_array(img.data, alpha_deg)
    mask = rotate_array(img.fov_mask.astype(np.float64), alpha_deg) >= 0.5
    return CartesianImage(np.clip(np.where(mask, data, PAD_VALUE), 0.0, 1.0), mask)


def flip_cartesian(img: CartesianImage, axis: str) -> CartesianImage:
    """Mirror along x (columns reversed) or y (rows reversed)."""
    if axis == "x":
        sl = (slice(None), slice(None, None, -1))
    elif axis == "y":
        sl = (slice(None, None, -1), slice(None))
    else:
        raise ValueError(f"unknown flip axis {axis!r}")
    return CartesianImage(img.data[sl].copy(), img.fov_mask[sl].copy())


def circular_shift_polar(img: PolarImage, s: int) -> PolarImage:
    """Rotate A-scans cyclically: row r moves to row (r + s) mod A."""
    return PolarImage(np.roll(img.data, int(s) % img.n_angles, axis=0))


def flip_polar(img: PolarImage) -> PolarImage:
    return PolarImage(img.data[::-1].copy())


def random_crop(img, size: int, rng: RngStream):
    h, w = img.shape
    if size > min(h, w):
        raise ValueError(f"crop size {size} exceeds image extent {img.shape}")
    top, left = rng.integers(0, [h - size, w - size])
    return crop(img, int(top), int(left), size)


def _check_kind(img, policy: AugmentPolicy):
    expected = PolarImage if policy.representation is Representation.polar else CartesianImage
    if not isinstance(img, expected):
        raise TypeError(f"{policy.representation.value} policy cannot be applied to {type(img).__name__}")


def apply_policy(img, policy: AugmentPolicy, rng: RngStream | None = None):
    """Training: flips, then rotation/shift, then random crop. Evaluation: center crop."""
    _check_kind(img, policy)
    if not policy.train_mode:
        return center_crop(img, policy.crop_size)
    if rng is None:
        rng = RngStream(policy.rng_seed)
    if policy.representation is Representation.cartesian:
        for axis in sorted(policy.flip_axes):
            if rng.uniform() < 0.5:
                img = flip_cartesian(img, axis)
        lo, hi = policy.rotation_range_deg
        if hi > lo:
            img = rotate_cartesian(img, rng.uniform(lo, hi))
        elif lo != 0.0:
            img = rotate_cartesian(img, lo)
    else:
        if "theta" in policy.flip_axes and rng.uniform() < 0.5:
            img = flip_polar(img)
        lo, hi = policy.shift_range_px if policy.shift_range_px is not None else (0, img.n_angles)
        if hi > lo:
            img = circular_shift_polar(img, int(rng.integers(lo, hi)))
        elif lo != 0:
            img = circular_shift_polar(img, lo)
    return random_crop(img, policy.crop_size, rng)
