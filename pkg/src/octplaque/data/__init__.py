from .manifest import (
    DATA_ROOT_ENV,
    LABELS,
    DatasetManifest,
    Label,
    LabeledFrame,
    ManifestError,
    class_names,
    class_weights,
    kfold,
    load_manifest,
    patient_split,
    save_manifest,
)
from .phantom import PhantomParams, Pullback, generate_dataset, generate_pullback, render_frame

__all__ = [
    "DATA_ROOT_ENV",
    "LABELS",
    "DatasetManifest",
    "Label",
    "LabeledFrame",
    "ManifestError",
    "PhantomParams",
    "Pullback",
    "class_names",
    "class_weights",
    "generate_dataset",
    "generate_pullback",
    "kfold",
    "load_manifest",
    "patient_split",
    "render_frame",
    "save_manifest",
]
