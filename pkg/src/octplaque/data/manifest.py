"""Labeled frames, manifests and patient-level splitting."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from ..augment import RngStream

DATA_ROOT_ENV = "OCTPLAQUE_DATA_ROOT"


class Label(str, Enum):
    no_plaque = "no_plaque"
    lipid_fibrous = "lipid_fibrous"
    calcified = "calcified"

    @property
    def index(self) -> int:
        return _LABEL_ORDER.index(self)

    @property
    def is_plaque(self) -> bool:
        return self is not Label.no_plaque

    def class_id(self, n_classes: int) -> int:
        """Class index in the binary (2) or multi-type (3) view."""
        if n_classes == 2:
            return int(self.is_plaque)
        if n_classes == 3:
            return self.index
        raise ValueError(f"n_classes must be 2 or 3, got {n_classes}")


_LABEL_ORDER = (Label.no_plaque, Label.lipid_fibrous, Label.calcified)
LABELS = _LABEL_ORDER
BINARY_CLASS_NAMES = ("no_plaque", "plaque")
MULTI_CLASS_NAMES = tuple(label.value for label in LABELS)


def class_names(n_classes: int) -> tuple[str, ...]:
    return BINARY_CLASS_NAMES if n_classes == 2 else MULTI_CLASS_NAMES


@dataclass(frozen=True)
class LabeledFrame:
    patient_id: str
    pullback_id: str
    frame_index: int
    polar_path: str
    label: Label

    def to_json(self) -> dict:
        return {
            "patient_id": self.patient_id,
            "pullback_id": self.pullback_id,
            "frame_index": self.frame_index,
            "polar_path": self.polar_path,
            "label": self.label.value,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "LabeledFrame":
        expected = {"patient_id", "pullback_id", "frame_index", "polar_path", "label"}
        if set(obj) != expected:
            raise ValueError(f"expected fields {sorted(expected)}, got {sorted(obj)}")
        index = obj["frame_index"]
        if not isinstance(index, int) or isinstance(index, bool) or index < 0:
            raise ValueError(f"frame_index must be a non-negative integer, got {index!r}")
        for key in ("patient_id", "pullback_id", "polar_path"):
            if not isinstance(obj[key], str) or not obj[key]:
                raise ValueError(f"{key} must be a non-empty string")
        return cls(obj["patient_id"], obj["pullback_id"], index, obj["polar_path"], Label(obj["label"]))


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetManifest:
    frames: tuple[LabeledFrame, ...]
    split_tag: str = "unassigned"
    provenance: dict = field(default_factory=dict)
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if self.split_tag not in ("train", "val", "test", "unassigned"):
            raise ManifestError(f"unknown split tag {self.split_tag!r}")
        keys = set()
        per_pullback: dict[tuple[str, str], list[int]] = {}
        for frame in self.frames:
            key = (frame.patient_id, frame.pullback_id, frame.frame_index)
            if key in keys:
                raise ManifestError(f"duplicate frame {key}")
            keys.add(key)
            per_pullback.setdefault(key[:2], []).append(frame.frame_index)
        for pullback, indices in per_pullback.items():
            if sorted(indices) != list(range(len(indices))):
                raise ManifestError(f"frame indices of pullback {pullback} are not contiguous from 0")

    def __len__(self):
        return len(self.frames)

    @property
    def patients(self) -> list[str]:
        return sorted({f.patient_id for f in self.frames})

    @property
    def pullbacks(self) -> list[str]:
        return sorted({f.pullback_id for f in self.frames})

    def labels(self, n_classes: int) -> np.ndarray:
        return np.array([f.label.class_id(n_classes) for f in self.frames], dtype=np.int64)

    def subset(self, patients, split_tag: str | None = None) -> "DatasetManifest":
        patients = set(patients)
        return replace(
            self,
            frames=tuple(f for f in self.frames if f.patient_id in patients),
            split_tag=split_tag or self.split_tag,
        )

    def pullback(self, pullback_id: str) -> list[LabeledFrame]:
        frames = [f for f in self.frames if f.pullback_id == pullback_id]
        if not frames:
            raise KeyError(f"unknown pullback id {pullback_id!r}")
        return sorted(frames, key=lambda f: f.frame_index)

    def resolve(self, frame: LabeledFrame) -> Path:
        path = Path(frame.polar_path)
        if path.is_absolute():
            return path
        root = os.environ.get(DATA_ROOT_ENV) or self.root
        if root is None:
            raise ManifestError(f"cannot resolve relative path {path}: no data root")
        return Path(root) / path


def _meta_path(path: Path) -> Path:
    return path.with_name(path.name + ".meta.json")


def save_manifest(manifest: DatasetManifest, path) -> Path:
    """Write one frame per JSON line plus a ``.meta.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for frame in manifest.frames:
            fh.write(json.dumps(frame.to_json(), sort_keys=True) + "\n")
    meta = {"split_tag": manifest.split_tag, "provenance": manifest.provenance}
    _meta_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                frames.append(LabeledFrame.from_json(json.loads(line)))
            except (ValueError, TypeError, KeyError) as exc:
                raise ManifestError(f"{path}:{lineno}: corrupted row ({exc})") from exc
    meta = {"split_tag": "unassigned", "provenance": {}}
    if _meta_path(path).is_file():
        meta.update(json.loads(_meta_path(path).read_text()))
    return DatasetManifest(tuple(frames), meta["split_tag"], meta["provenance"], root=path.parent)


def patient_split(
    manifest: DatasetManifest, test_fraction_patients: float, rng: RngStream
) -> tuple[DatasetManifest, DatasetManifest]:
    """Split by patient; the test part receives round(fraction * n_patients) patients."""
    patients = manifest.patients
    if len(patients) < 2:
        raise ValueError("patient_split needs at least 2 patients")
    if not 0.0 <= test_fraction_patients < 1.0:
        raise ValueError("test_fraction_patients must lie in [0, 1)")
    n_test = int(round(test_fraction_patients * len(patients)))
    order = rng.generator().permutation(len(patients))
    test = {patients[i] for i in order[:n_test]}
    train = set(patients) - test
    return manifest.subset(train, "train"), manifest.subset(test, "test")


def kfold(manifest: DatasetManifest, k: int = 3, rng: RngStream | None = None):
    """Patient-level folds; validation fold sizes differ by at most one patient."""
    patients = manifest.patients
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > len(patients):
        raise ValueError(f"k={k} exceeds the number of patients ({len(patients)})")
    if rng is not None:
        patients = [patients[i] for i in rng.generator().permutation(len(patients))]
    folds = [patients[i::k] for i in range(k)]
    return [(manifest.subset(set(patients) - set(fold), "train"), manifest.subset(fold, "val")) for fold in folds]


def class_weights(manifest: DatasetManifest, n_classes: int = 3) -> np.ndarray:
    """Inverse-frequency weights normalised to mean 1."""
    counts = np.bincount(manifest.labels(n_classes), minlength=n_classes).astype(np.float64)
    return class_weights_from_counts(counts)


def class_weights_from_counts(counts) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.float64)
    if np.count_nonzero(counts) < counts.size:
        raise ValueError(f"every class needs at least one example, counts={counts.tolist()}")
    inv = counts.sum() / counts
    return inv / inv.mean()
