"""Synthetic IVOCT pullbacks with frame-level plaque labels.

Every frame is rendered in polar coordinates (angle x depth). Depth is handled
as the fraction ``u`` in [0, 1] of the imaging range so the appearance does not
depend on the sampling resolution. Appearance constants:

======================  ==========================================
lumen background        0.02
catheter sheath         0.55 at u = 0.06 (gaussian, width 0.008)
lumen radius            0.25 .. 0.40 plus harmonics 1..3 (sd 0.02)
healthy wall            0.75 * exp(-t / 0.30) + intima 0.20 band
lipid / fibrous         bright cap 0.30, attenuation length 0.05,
                        soft angular edges (0.12 rad)
calcified               pocket 0.08 between depths t0 .. t1 with
                        0.70 borders, sharp angular edges (0.015 rad)
speckle                 multiplicative, mean 1, sd 0.35, grain
                        1.5 angular x 3 depth samples at 128 x 64
guidewire               bright spot then zero shadow, 3..5 deg half width
residual blood          haze 0.25 in the lumen, wall attenuated x0.6
======================  ==========================================

With ``cue_mode="complementary"`` plaque sectors keep the healthy wall and
instead carry one of two cues, chosen per plaque run. The depth ripple
(period 1/24 of the depth range, band 0 <= t <= 0.25) is resolved by the desk
polar input but lies above the Nyquist limit of the desk cartesian input. The
grain cue is angular texture of 40..60 cycles per turn with random phases in
the deep band 0.7 <= u <= 0.95; the desk polar input keeps only 60 angular
samples (Nyquist 30 cycles) while the cartesian input resolves it at those
radii. Each single representation therefore sees only one of the two cues.

``t`` is the depth below the lumen boundary in the same fractional units.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.ndimage import gaussian_filter

from ..augment import RngStream
from ..geometry import save_png16
from .manifest import LABELS, DatasetManifest, Label, LabeledFrame, save_manifest

LUMEN_LEVEL = 0.02
SHEATH_LEVEL, SHEATH_DEPTH, SHEATH_WIDTH = 0.55, 0.06, 0.008
WALL_LEVEL, WALL_ATTENUATION = 0.75, 0.30
INTIMA_LEVEL, INTIMA_WIDTH = 0.20, 0.015
LIPID_CAP, LIPID_ATTENUATION, LIPID_EDGE = 0.30, 0.05, 0.12
CALC_POCKET, CALC_BORDER, CALC_EDGE = 0.08, 0.70, 0.015
SPECKLE_SD = 0.35
SPECKLE_GRAIN = (1.5 / 128, 3.0 / 64)
HAZE_LEVEL, HAZE_WALL_FACTOR = 0.25, 0.6
RUN_LENGTH = (4, 12)
CUE_DEPTH_PERIOD, CUE_BAND = 1.0 / 24, 0.25
GRAIN_CYCLES, GRAIN_BAND = (40, 60), (0.7, 0.95)
CUES = ("depth", "grain")


class PhantomParams(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_patients: int = Field(24, ge=1)
    frames_per_pullback: int = Field(60, ge=1)
    pullbacks_per_patient: int = Field(1, ge=1)
    polar_shape: tuple[int, int] = (128, 64)
    class_mix: tuple[float, float, float] = (0.5, 0.4, 0.1)
    artifact_rate: float = Field(0.2, ge=0.0, le=1.0)
    label_noise_rate: float = Field(0.0, ge=0.0, le=1.0)
    cue_mode: Literal["standard", "complementary"] = "standard"
    cue_contrast: float = Field(0.35, ge=0.0, le=1.0)
    seed: int = Field(0, ge=0)

    @field_validator("polar_shape")
    @classmethod
    def _shape(cls, v):
        if v[0] < 8 or v[1] < 8:
            raise ValueError(f"polar_shape {v} is degenerate (need >= 8 x 8)")
        return v

    @model_validator(mode="after")
    def _mix(self):
        mix = self.class_mix
        if any(p < 0 or p > 1 for p in mix) or abs(sum(mix) - 1.0) > 1e-9:
            raise ValueError(f"class_mix {mix} must be probabilities summing to 1")
        return self

    @classmethod
    def full_scale(cls, **overrides) -> "PhantomParams":
        """49 patients with ~82 frames each (about 4000 B-scans of 496 x 960)."""
        base = dict(n_patients=49, frames_per_pullback=82, polar_shape=(496, 960))
        base.update(overrides)
        return cls(**base)


ARTIFACT_CLASSES = ("none", "guidewire", "blood", "guidewire+blood")
PROXY_SEED_OFFSET = 1_000_003


@dataclass
class Pullback:
    frames: list[LabeledFrame]
    images: list[np.ndarray]
    truth: list[Label]
    artifacts: list[int]  # index into ARTIFACT_CLASSES


def _allocate_counts(mix, n: int) -> np.ndarray:
    """Largest-remainder rounding of ``mix * n`` to integers summing to n."""
    raw = np.asarray(mix) * n
    counts = np.floor(raw).astype(int)
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[: n - counts.sum()]] += 1
    return counts


def _class_runs(mix, n_frames: int, gen: np.random.Generator) -> list[Label]:
    runs = []
    for label, count in zip(LABELS, _allocate_counts(mix, n_frames)):
        while count > 0:
            length = min(count, int(gen.integers(*RUN_LENGTH, endpoint=True)))
            runs.append((label, length))
            count -= length
    order = gen.permutation(len(runs))
    sequence = []
    for i in order:
        label, length = runs[i]
        sequence.extend([label] * length)
    return sequence


def _angle_delta(phi, center):
    return np.angle(np.exp(1j * (phi - center)))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def speckle_field(shape, gen: np.random.Generator) -> np.ndarray:
    """Correlated multiplicative noise; the grain spans several output pixels so
    interpolation during augmentation barely changes its statistics."""
    sigma = (SPECKLE_GRAIN[0] * shape[0], SPECKLE_GRAIN[1] * shape[1])
    field = gaussian_filter(gen.standard_normal(shape), sigma=sigma, mode=("wrap", "reflect"))
    field = (field - field.mean()) / (field.std() + 1e-12)
    return np.maximum(1.0 + SPECKLE_SD * field, 0.0)


def apply_cue(tissue, cue, phi, u, t, window):
    """Add one complementary cue to the wall; ``phi`` is relative to the sector centre."""
    kind, contrast, phases = cue
    if kind == "depth":
        band = window * (t >= 0) * (t <= CUE_BAND)
        return tissue * (1.0 + band * contrast * np.cos(2 * np.pi * u / CUE_DEPTH_PERIOD))
    cycles = np.arange(GRAIN_CYCLES[0], GRAIN_CYCLES[1] + 1)
    texture = np.cos(cycles[:, None, None] * phi[None] + phases[:, None, None]).sum(axis=0)
    texture = texture / np.sqrt(len(cycles) / 2)  # unit variance
    band = window * (u >= GRAIN_BAND[0]) * (u <= GRAIN_BAND[1])
    return tissue * (1.0 + band * contrast * texture)


def render_frame(shape, lumen, plaque, artifacts, gen: np.random.Generator, cue=None) -> np.ndarray:
    """Render one polar frame from its latent state.

    ``cue`` is ``(kind, contrast, grain phases)`` for complementary-cue plaques, which
    keep the healthy wall and only add the cue around the plaque sector.
    """
    n_angles, n_depth = shape
    phi = 2 * np.pi * np.arange(n_angles)[:, None] / n_angles
    u = np.linspace(0.0, 1.0, n_depth)[None, :]

    rho0, amps, phases = lumen
    rho = rho0 + sum(a * np.cos((h + 1) * phi + p) for h, (a, p) in enumerate(zip(amps, phases)))
    t = u - rho
    inside_wall = _sigmoid(t / 0.006)
    tpos = np.maximum(t, 0.0)

    healthy = WALL_LEVEL * np.exp(-tpos / WALL_ATTENUATION) + INTIMA_LEVEL * np.exp(-((t / INTIMA_WIDTH) ** 2))
    tissue = healthy
    if plaque is not None:
        kind, center, half_width, t0, t1 = plaque
        dist = np.abs(_angle_delta(phi, center))
        if cue is not None:
            window = _sigmoid((half_width - dist) / CALC_EDGE * 4.0)
            tissue = apply_cue(healthy, cue, _angle_delta(phi, center), u, t, window)
        elif kind is Label.lipid_fibrous:
            window = _sigmoid((half_width - dist) / LIPID_EDGE * 4.0)
            lipid = LIPID_CAP * np.exp(-((t / 0.02) ** 2)) + WALL_LEVEL * np.exp(-tpos / LIPID_ATTENUATION)
            tissue = (1 - window) * healthy + window * lipid
        else:
            window = _sigmoid((half_width - dist) / CALC_EDGE * 4.0)
            pocket = _sigmoid((t - t0) / 0.004) * _sigmoid((t1 - t) / 0.004)
            border = np.exp(-(((t - t0) / 0.008) ** 2)) + np.exp(-(((t - t1) / 0.008) ** 2))
            side = np.exp(-(((dist - half_width) / 0.03) ** 2)) * pocket
            calc = healthy * (1 - pocket) + CALC_POCKET * pocket + CALC_BORDER * np.minimum(border + side, 1.0)
            tissue = (1 - window) * healthy + window * calc

    lumen_level = np.full_like(t, LUMEN_LEVEL)
    if artifacts.get("blood"):
        haze = gaussian_filter(gen.random(t.shape), sigma=(2.0, 3.0), mode=("wrap", "nearest"))
        lumen_level = lumen_level + HAZE_LEVEL * (haze - haze.min()) / (np.ptp(haze) + 1e-12)
        tissue = tissue * HAZE_WALL_FACTOR
    sheath = SHEATH_LEVEL * np.exp(-(((u - SHEATH_DEPTH) / SHEATH_WIDTH) ** 2))
    img = (1 - inside_wall) * lumen_level + inside_wall * tissue + sheath

    img = img * speckle_field(shape, gen)

    wire = artifacts.get("guidewire")
    if wire is not None:
        center, half_width = wire
        in_wedge = np.abs(_angle_delta(phi, center)) < half_width
        spot = np.exp(-(((t + 0.02) / 0.01) ** 2))
        img = np.where(in_wedge & (t > -0.02), 0.0, img) + np.where(in_wedge, 0.9 * spot, 0.0)
    return np.clip(img, 0.0, 1.0)


def generate_pullback(
    params: PhantomParams,
    patient_id: str,
    rng: RngStream | np.random.Generator,
    pullback_id: str | None = None,
    root: str | Path | None = None,
) -> Pullback:
    """Render one pullback; when ``root`` is given, write its frames as 16-bit PNGs."""
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    pullback_id = pullback_id or f"{patient_id}-PB0"
    n_frames = params.frames_per_pullback
    truth = _class_runs(params.class_mix, n_frames, gen)

    rho0 = gen.uniform(0.25, 0.40)
    amps = gen.normal(0.0, 0.02, size=3)
    phases = gen.uniform(0, 2 * np.pi, size=3)
    wire_angle = gen.uniform(0, 2 * np.pi)

    frames, images, labels, artifact_ids = [], [], [], []
    plaque = None
    previous = None
    cue = None
    complementary = params.cue_mode == "complementary"
    for i in range(n_frames):
        rho0 = float(np.clip(rho0 + gen.normal(0.0, 0.005), 0.25, 0.40))
        amps = 0.95 * amps + gen.normal(0.0, 0.005, size=3)
        phases = phases + gen.normal(0.0, 0.02, size=3)
        wire_angle += gen.normal(0.0, 0.02)

        kind = truth[i]
        if kind is Label.no_plaque:
            plaque = None
        elif kind is not previous or plaque is None:
            t0 = gen.uniform(0.03, 0.06)
            plaque = [kind, gen.uniform(0, 2 * np.pi), np.deg2rad(gen.uniform(25, 60)), t0, t0 + gen.uniform(0.12, 0.2)]
            if complementary:
                cue_kind = CUES[int(gen.integers(2))]
                grain = gen.uniform(0, 2 * np.pi, size=GRAIN_CYCLES[1] - GRAIN_CYCLES[0] + 1)
                cue = (cue_kind, params.cue_contrast, grain)
        else:
            plaque[1] += gen.normal(0.0, np.deg2rad(2.0))
            plaque[2] = float(np.clip(plaque[2] + gen.normal(0.0, np.deg2rad(1.5)), np.deg2rad(20), np.deg2rad(65)))
        previous = kind

        artifacts = {}
        if gen.random() < params.artifact_rate:
            artifacts["guidewire"] = (wire_angle, np.deg2rad(gen.uniform(3, 5)))
        if gen.random() < params.artifact_rate:
            artifacts["blood"] = True
        image = render_frame(
            params.polar_shape, (rho0, amps, phases), plaque, artifacts, gen, cue if plaque is not None else None
        )

        label = kind
        if params.label_noise_rate > 0 and gen.random() < params.label_noise_rate:
            others = [c for c in LABELS if c is not kind]
            label = others[int(gen.integers(len(others)))]

        rel = f"{patient_id}/{pullback_id}/{i:04d}.png"
        if root is not None:
            save_png16(image, Path(root) / rel)
        frames.append(LabeledFrame(patient_id, pullback_id, i, rel, label))
        images.append(image)
        labels.append(kind)
        artifact_ids.append(int("guidewire" in artifacts) + 2 * int("blood" in artifacts))
    return Pullback(frames, images, labels, artifact_ids)


def _patient_job(args):
    params, patient_index, root = args
    patient_id = f"P{patient_index:03d}"
    stream = RngStream(params.seed).spawn(patient_index)
    frames = []
    for b in range(params.pullbacks_per_patient):
        pb = generate_pullback(params, patient_id, stream, f"{patient_id}-PB{b}", root)
        frames.extend(pb.frames)
    return frames


def generate_dataset(params: PhantomParams, root, workers: int = 1, name: str = "manifest.jsonl") -> DatasetManifest:
    """Generate every patient's pullbacks under ``root`` and write the manifest."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    jobs = [(params, i, root) for i in range(params.n_patients)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_patient_job, jobs))
    else:
        results = [_patient_job(job) for job in jobs]
    frames = [f for patient_frames in results for f in patient_frames]
    manifest = DatasetManifest(
        tuple(frames),
        "unassigned",
        {"generator": "phantom", "params": params.model_dump(mode="json")},
        root=root,
    )
    save_manifest(manifest, root / name)
    return manifest


def generate_proxy_frames(params: PhantomParams, n_pullbacks: int):
    """Frames and artifact-type labels for the pretraining proxy task.

    Streams are seeded from a range disjoint from :func:`generate_dataset`.
    """
    stream = RngStream(PROXY_SEED_OFFSET + params.seed)
    images, targets = [], []
    for i in range(n_pullbacks):
        pb = generate_pullback(params, f"X{i:03d}", stream.spawn(i))
        images.extend(pb.images)
        targets.extend(pb.artifacts)
    return images, np.asarray(targets, dtype=np.int64)
