"""Classification metrics, evaluation reports and pullback strip rendering."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

# undefined metrics are NaN and additionally listed by name in ``undefined``
NAN = float("nan")


def predict(logits) -> np.ndarray:
    """Argmax with ties resolved towards the lower class index."""
    return np.argmax(np.asarray(logits), axis=1)


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    if preds.size and (min(preds.min(), labels.min()) < 0 or max(preds.max(), labels.max()) >= n_classes):
        raise ValueError("class id out of range")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _ratio(num, den, name, undefined):
    if den == 0:
        undefined.add(name)
        return NAN
    return num / den


@dataclass(frozen=True)
class BinaryMetrics:
    acc: float
    sens: float
    spec: float
    f1: float
    undefined: frozenset = frozenset()

    def as_dict(self) -> dict:
        return {
            "acc": self.acc,
            "sens": self.sens,
            "spec": self.spec,
            "f1": self.f1,
            "undefined": sorted(self.undefined),
        }


def binary_metrics(confusion, positive_class: int = 1) -> BinaryMetrics:
    cm = np.asarray(confusion)
    if cm.shape != (2, 2):
        raise ValueError("binary metrics need a 2x2 confusion matrix")
    neg = 1 - positive_class
    tp, fn = cm[positive_class, positive_class], cm[positive_class, neg]
    tn, fp = cm[neg, neg], cm[neg, positive_class]
    undefined: set[str] = set()
    acc = _ratio(tp + tn, cm.sum(), "acc", undefined)
    sens = _ratio(tp, tp + fn, "sens", undefined)
    spec = _ratio(tn, tn + fp, "spec", undefined)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", undefined)
    return BinaryMetrics(float(acc), float(sens), float(spec), float(f1), frozenset(undefined))


def per_class_weighted_accuracy(confusion) -> tuple[np.ndarray, frozenset]:
    """Per-class recall; rows without examples are NaN and flagged by index."""
    cm = np.asarray(confusion, dtype=np.float64)
    rows = cm.sum(axis=1)
    out = np.full(cm.shape[0], NAN)
    ok = rows > 0
    out[ok] = np.diag(cm)[ok] / rows[ok]
    return out, frozenset(int(i) for i in np.flatnonzero(~ok))


def per_class_f1(confusion) -> np.ndarray:
    cm = np.asarray(confusion, dtype=np.float64)
    tp = np.diag(cm)
    den = 2 * tp + (cm.sum(axis=0) - tp) + (cm.sum(axis=1) - tp)
    # a class absent from both truth and predictions has no defined F1
    return np.divide(2 * tp, den, out=np.full_like(tp, NAN), where=den > 0)


def multiclass_f1(confusion) -> float:
    """Macro-averaged F1; classes with undefined F1 are skipped."""
    scores = per_class_f1(confusion)
    valid = scores[~np.isnan(scores)]
    return float(valid.mean()) if valid.size else NAN


def model_selection_f1(confusion) -> float:
    """Plaque-positive F1 for two classes, macro F1 otherwise."""
    cm = np.asarray(confusion)
    if cm.shape == (2, 2):
        f1 = binary_metrics(cm).f1
        return 0.0 if math.isnan(f1) else f1
    f1 = multiclass_f1(cm)
    return 0.0 if math.isnan(f1) else f1


@dataclass
class EvalReport:
    confusion: list[list[int]]
    n: int
    class_names: list[str]
    binary_metrics: dict | None = None
    per_class_weighted_acc: list[float] | None = None
    multi_f1: float | None = None
    undefined: list[str] = field(default_factory=list)

    @classmethod
    def from_confusion(cls, confusion, class_names) -> "EvalReport":
        cm = np.asarray(confusion, dtype=np.int64)
        wa, missing = per_class_weighted_accuracy(cm)
        report = cls(cm.tolist(), int(cm.sum()), list(class_names))
        report.per_class_weighted_acc = [float(v) for v in wa]
        report.undefined = [f"weighted_acc[{class_names[i]}]" for i in sorted(missing)]
        if cm.shape == (2, 2):
            bm = binary_metrics(cm)
            report.binary_metrics = bm.as_dict()
            report.undefined += sorted(bm.undefined)
        else:
            report.multi_f1 = multiclass_f1(cm)
        return report

    @classmethod
    def from_predictions(cls, preds, labels, class_names) -> "EvalReport":
        return cls.from_confusion(confusion_matrix(preds, labels, len(class_names)), class_names)

    def to_json(self) -> dict:
        def clean(v):
            if isinstance(v, float) and math.isnan(v):
                return None
            if isinstance(v, dict):
                return {k: clean(x) for k, x in v.items()}
            if isinstance(v, list):
                return [clean(x) for x in v]
            return v

        return clean(asdict(self))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path


REPORT_SCHEMA = {
    "type": "object",
    "required": ["confusion", "n", "class_names"],
    "properties": {
        "confusion": {"type": "array", "items": {"type": "array", "items": {"type": "integer", "minimum": 0}}},
        "n": {"type": "integer", "minimum": 0},
        "class_names": {"type": "array", "items": {"type": "string"}},
        "binary_metrics": {
            "type": ["object", "null"],
            "properties": {
                k: {"type": ["number", "null"], "minimum": 0, "maximum": 1} for k in ("acc", "sens", "spec", "f1")
            },
        },
        "per_class_weighted_acc": {
            "type": ["array", "null"],
            "items": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        },
        "multi_f1": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "undefined": {"type": "array", "items": {"type": "string"}},
    },
}

STRIP_COLORS = {
    "no_plaque": (0, 170, 0),
    "plaque": (220, 0, 0),
    "lipid_fibrous": (220, 0, 0),
    "calcified": (30, 90, 255),
}


def render_pullback(
    frame_indices,
    predictions,
    labels,
    cartesian_images,
    out_path,
    class_names=("no_plaque", "plaque"),
    column_width: int = 1,
    strip_height: int = 12,
) -> np.ndarray:
    """Write a three-band PNG: longitudinal view, predicted strip, ground-truth strip.

    The longitudinal view stacks the central vertical line of every cartesian
    frame; frame ``i`` occupies pixel columns ``i * column_width`` onwards.
    Returns the RGB array that was written.
    """
    indices = list(frame_indices)
    if not indices:
        raise ValueError("cannot render an empty pullback")
    if indices != sorted(indices) or len(set(indices)) != len(indices):
        raise ValueError("frames must be ordered by strictly increasing frame index")
    if not (len(predictions) == len(labels) == len(cartesian_images) == len(indices)):
        raise ValueError("frame, prediction, label and image counts differ")

    centre = np.stack([np.asarray(img)[:, np.asarray(img).shape[1] // 2] for img in cartesian_images], axis=1)
    top = np.repeat((np.clip(centre, 0, 1) * 255).astype(np.uint8)[..., None], 3, axis=2)

    def strip(classes):
        colors = np.array([STRIP_COLORS[class_names[c]] for c in classes], dtype=np.uint8)
        return np.repeat(colors[None, :, :], strip_height, axis=0)

    gap = np.full((2, len(indices), 3), 255, dtype=np.uint8)
    figure = np.concatenate([top, gap, strip(predictions), gap, strip(labels)], axis=0)
    figure = np.repeat(figure, column_width, axis=1)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(figure).save(out_path)
    return figure
