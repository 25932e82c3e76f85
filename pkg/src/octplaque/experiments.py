"""Desk-scale analogues of the four result tables.

Each table is a list of rows; every row is one :class:`Experiment` trained on
a patient-level split of a phantom dataset and scored on held-out patients.
The published numbers are printed next to ours as references only: they come
from a private clinical dataset and are not comparable.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from .augment import RngStream
from .config import RunConfig
from .data.arrays import FrameArrays, load_arrays
from .data.manifest import DatasetManifest, load_manifest, patient_split
from .data.phantom import generate_dataset
from .evaluation import binary_metrics, multiclass_f1, per_class_weighted_accuracy
from .models import BackboneConfig, FreezeSpec, FusionConfig, WeightStore, proxy_arrays, proxy_pretrain
from .train import Experiment, TrainConfig, evaluate_experiment, run_experiment

log = logging.getLogger(__name__)

TABLE_IDS = ("tableI", "tableII", "tableIII", "tableIV")
DESK_BUDGET_S = 4 * 3600
BINARY_COLUMNS = ("Acc.", "Sens.", "Spec.", "F1-Score")
MULTI_COLUMNS = ("W.A. c1", "W.A. c2", "W.A. c3", "F1-Score")

# published values (private clinical data), shown for orientation only
PUBLISHED_REFERENCE = {
    "tableI": {
        ("Data Aug.", "Densenet Cart."): (0.892, 0.874, 0.907, 0.885),
        ("Data Aug.", "Densenet Polar"): (0.871, 0.852, 0.883, 0.865),
        ("Data Aug.", "Resnet Cart."): (0.903, 0.861, 0.937, 0.888),
        ("Data Aug.", "Resnet Polar"): (0.872, 0.888, 0.859, 0.861),
        ("No Data Aug.", "Densenet Cart."): (0.755, 0.693, 0.807, 0.714),
        ("No Data Aug.", "Densenet Polar"): (0.821, 0.802, 0.831, 0.818),
        ("No Data Aug.", "Resnet Cart."): (0.740, 0.776, 0.719, 0.737),
        ("No Data Aug.", "Resnet Polar"): (0.814, 0.810, 0.854, 0.813),
    },
    "tableII": {
        ("Densenet", "Full"): (0.892, 0.874, 0.907, 0.885),
        ("Densenet", "From Scratch"): (0.737, 0.761, 0.718, 0.721),
        ("Densenet", "p_r=1"): (0.861, 0.842, 0.891, 0.866),
        ("Densenet", "p_r=2"): (0.848, 0.817, 0.892, 0.840),
        ("Densenet", "From Scratch (Polar)"): (0.758, 0.770, 0.743, 0.751),
        ("Resnet", "Full"): (0.903, 0.861, 0.937, 0.888),
        ("Resnet", "From Scratch"): (0.758, 0.733, 0.770, 0.716),
        ("Resnet", "p_r=1"): (0.882, 0.870, 0.893, 0.868),
        ("Resnet", "p_r=2"): (0.851, 0.785, 0.894, 0.823),
        ("Resnet", "From Scratch (Polar)"): (0.774, 0.765, 0.800, 0.757),
    },
    "tableIII": {
        ("Densenet", "No Init."): (0.853, 0.836, 0.875, 0.846),
        ("Densenet", "c_c=2"): (0.871, 0.843, 0.895, 0.864),
        ("Densenet", "c_c=3"): (0.910, 0.892, 0.919, 0.908),
        ("Densenet", "c_c=4"): (0.903, 0.881, 0.923, 0.895),
        ("Resnet", "No Init."): (0.871, 0.850, 0.883, 0.862),
        ("Resnet", "c_c=2"): (0.867, 0.871, 0.852, 0.856),
        ("Resnet", "c_c=3"): (0.917, 0.909, 0.924, 0.913),
        ("Resnet", "c_c=4"): (0.904, 0.899, 0.906, 0.901),
    },
    "tableIV": {
        ("Data Aug.", "Densenet Cart."): (0.780, 0.848, 0.897, 0.833),
        ("Data Aug.", "Densenet Polar"): (0.755, 0.803, 0.867, 0.794),
        ("Data Aug.", "Resnet Cart."): (0.794, 0.822, 0.873, 0.829),
        ("Data Aug.", "Resnet Polar"): (0.762, 0.799, 0.856, 0.805),
        ("No Data Aug.", "Densenet Cart."): (0.646, 0.702, 0.755, 0.708),
        ("No Data Aug.", "Densenet Polar"): (0.691, 0.737, 0.801, 0.757),
        ("No Data Aug.", "Resnet Cart."): (0.630, 0.689, 0.753, 0.694),
        ("No Data Aug.", "Resnet Polar"): (0.687, 0.691, 0.770, 0.733),
    },
}

TABLE_TITLES = {
    "tableI": "Binary plaque classification (pretrained, all weights fine-tuned)",
    "tableII": "Transfer learning scenarios (cartesian unless indicated)",
    "tableIII": "Two-path architecture (complementary-cue phantoms)",
    "tableIV": "Multi-class classification (c1 calcified, c2 lipid/fibrous, c3 no plaque)",
}

FAMILY_LABEL = {"dense": "Densenet", "residual": "Resnet"}
REP_LABEL = {"cartesian": "Cart.", "polar": "Polar"}


@dataclass(frozen=True)
class RowSpec:
    table: str
    group: str
    label: str
    experiment: Experiment
    dataset: str  # "standard" or "complementary"
    pretrained: bool = True


@dataclass
class RowResult:
    spec: RowSpec
    values: tuple[float, ...]
    confusion: list
    seconds: float
    best_val_f1: float

    def as_dict(self) -> dict:
        return {
            "table": self.spec.table,
            "group": self.spec.group,
            "row": self.spec.label,
            "values": list(self.values),
            "published": list(PUBLISHED_REFERENCE[self.spec.table][(self.spec.group, self.spec.label)]),
            "confusion": self.confusion,
            "seconds": self.seconds,
            "best_val_f1": self.best_val_f1,
        }


def _experiment(cfg: RunConfig, family: str, representation: str, **overrides) -> Experiment:
    data = cfg.experiment().model_dump()
    data["train"]["epochs"] = cfg.tables.epochs
    make = BackboneConfig.desk if cfg.model.backbone.scale == "desk" else BackboneConfig.full
    data["backbone"] = make(family).model_dump()
    data["representation"] = representation
    for key, value in overrides.items():
        data[key] = value.model_dump() if isinstance(value, BaseModel) else value
    return Experiment(**data)


def table_rows(cfg: RunConfig, subset=None) -> list[RowSpec]:
    """Row definitions of the requested tables, in the published order."""
    subset = tuple(subset or TABLE_IDS)
    unknown = set(subset) - set(TABLE_IDS)
    if unknown:
        raise ValueError(f"unknown table(s) {sorted(unknown)}; choose from {TABLE_IDS}")
    full = FreezeSpec()
    rows: list[RowSpec] = []
    families = ("dense", "residual")

    def single(table, group, family, rep, dataset="standard", pretrained=True, **kw):
        label = f"{FAMILY_LABEL[family]} {REP_LABEL[rep]}"
        rows.append(RowSpec(table, group, label, _experiment(cfg, family, rep, **kw), dataset, pretrained))

    if "tableI" in subset:
        for aug, group in ((True, "Data Aug."), (False, "No Data Aug.")):
            for family in families:
                for rep in ("cartesian", "polar"):
                    single("tableI", group, family, rep, augment=aug, freeze=full, n_classes=2)
    if "tableII" in subset:
        scenarios = (
            ("Full", "cartesian", full),
            ("From Scratch", "cartesian", FreezeSpec(mode="from_scratch")),
            ("p_r=1", "cartesian", FreezeSpec.freeze_at(1)),
            ("p_r=2", "cartesian", FreezeSpec.freeze_at(2)),
            ("From Scratch (Polar)", "polar", FreezeSpec(mode="from_scratch")),
        )
        for family in families:
            for label, rep, freeze in scenarios:
                exp = _experiment(cfg, family, rep, freeze=freeze, n_classes=2, augment=True)
                rows.append(
                    RowSpec("tableII", FAMILY_LABEL[family], label, exp, "standard", freeze.mode != "from_scratch")
                )
    if "tableIII" in subset:
        variants = (
            ("No Init.", FusionConfig(concat_point=3, sliced_init=False)),
            ("c_c=2", FusionConfig(concat_point=2)),
            ("c_c=3", FusionConfig(concat_point=3)),
            ("c_c=4", FusionConfig(concat_point=4)),
        )
        for family in families:
            for label, fusion in variants:
                exp = _experiment(cfg, family, "two-path", fusion=fusion, freeze=full, n_classes=2, augment=True)
                rows.append(RowSpec("tableIII", FAMILY_LABEL[family], label, exp, "complementary"))
    if "tableIV" in subset:
        weighted = cfg.train.model_copy(
            update={"class_weights": "inverse_frequency", "seed": cfg.run.seed, "epochs": cfg.tables.epochs}
        )
        for aug, group in ((True, "Data Aug."), (False, "No Data Aug.")):
            for family in families:
                for rep in ("cartesian", "polar"):
                    single("tableIV", group, family, rep, augment=aug, freeze=full, n_classes=3, train=weighted)
    return rows


@dataclass
class SplitArrays:
    train: FrameArrays
    val: FrameArrays
    test: FrameArrays


def split_manifest(manifest: DatasetManifest, test_fraction: float, val_fraction: float, seed: int):
    """Patient-level train / validation / test split."""
    rng = RngStream(seed)
    rest, test = patient_split(manifest, test_fraction, rng)
    train, val = patient_split(rest, val_fraction, rng)
    return train.subset(train.patients, "train"), val.subset(val.patients, "val"), test


@dataclass
class TableRunner:
    cfg: RunConfig
    out_dir: Path
    results: list[RowResult] = field(default_factory=list)
    _manifests: dict = field(default_factory=dict)
    _stores: dict = field(default_factory=dict)
    _cache: dict = field(default_factory=dict)

    def __post_init__(self):
        self.out_dir = Path(self.out_dir)

    def dataset(self, kind: str) -> DatasetManifest:
        if kind not in self._manifests:
            params = self.cfg.data.phantom
            if kind == "complementary":
                params = params.model_copy(
                    update={"cue_mode": "complementary", "cue_contrast": self.cfg.tables.cue_contrast}
                )
            root = self.out_dir / "data" / kind
            path = root / self.cfg.data.manifest
            if path.is_file():
                manifest = load_manifest(path)
            else:
                manifest = generate_dataset(params, root, workers=self.cfg.run.workers, name=self.cfg.data.manifest)
            self._manifests[kind] = manifest
        return self._manifests[kind]

    def arrays(self, kind: str, n_classes: int) -> SplitArrays:
        d = self.cfg.data
        parts = split_manifest(self.dataset(kind), d.test_fraction, d.val_fraction, self.cfg.run.seed)
        return SplitArrays(*(load_arrays(m, n_classes, self.cfg.augment.resize_to) for m in parts))

    def pretrained(self, backbone: BackboneConfig) -> WeightStore:
        key = backbone.model_dump_json()
        if key not in self._stores:
            self._stores[key] = pretrained_store(self.cfg, backbone)
        return self._stores[key]

    def run_row(self, spec: RowSpec) -> RowResult:
        exp = spec.experiment
        key = (spec.dataset, spec.pretrained, exp.model_dump_json())
        start = time.perf_counter()
        if key in self._cache:
            model_cm, best_f1 = self._cache[key]
        else:
            arrays = self.arrays(spec.dataset, exp.n_classes)
            store = self.pretrained(exp.backbone) if spec.pretrained else None
            model, history = run_experiment(exp, arrays.train, arrays.val, store)
            model_cm = evaluate_experiment(model, arrays.test, exp.crop_size)
            best_f1 = history.best_val_f1
            self._cache[key] = (model_cm, best_f1)
        values = row_values(model_cm)
        result = RowResult(spec, values, model_cm.tolist(), time.perf_counter() - start, best_f1)
        self.results.append(result)
        log.info("%s | %s | %s: %s", spec.table, spec.group, spec.label, " ".join(f"{v:.3f}" for v in values))
        return result

    def run(self, subset=None, progress=None) -> list[RowResult]:
        for spec in table_rows(self.cfg, subset):
            result = self.run_row(spec)
            if progress is not None:
                progress(result)
        return self.results


def pretrained_store(cfg: RunConfig, backbone: BackboneConfig) -> WeightStore:
    """External weights when configured, otherwise proxy pretraining on held-out phantoms."""
    pre = cfg.pretrain
    if pre.external_weights:
        return WeightStore.load(pre.external_weights)
    params = cfg.data.phantom.model_copy(update={"artifact_rate": pre.artifact_rate, "cue_mode": "standard"})
    n_val = max(2, pre.n_pullbacks // 4)
    proxy_train = proxy_arrays(params, pre.n_pullbacks, cfg.augment.resize_to)
    proxy_val = proxy_arrays(params.model_copy(update={"seed": params.seed + 1}), n_val, cfg.augment.resize_to)
    train_cfg = TrainConfig(lr0=pre.lr0, epochs=pre.epochs, seed=cfg.run.seed)
    return proxy_pretrain(backbone, proxy_train, proxy_val, train_cfg, crop_size=cfg.augment.crop_size)


def row_values(confusion) -> tuple[float, ...]:
    cm = np.asarray(confusion)
    if cm.shape == (2, 2):
        m = binary_metrics(cm)
        return (m.acc, m.sens, m.spec, m.f1)
    wa, _ = per_class_weighted_accuracy(cm)
    # c1 calcified, c2 lipid/fibrous, c3 no plaque
    return (float(wa[2]), float(wa[1]), float(wa[0]), multiclass_f1(cm))


def _fmt(v: float) -> str:
    return "n/a" if v is None or np.isnan(v) else f"{v:.3f}"


def render_markdown(results: list[RowResult], seconds: float | None = None) -> str:
    lines = [
        "# Desk-scale table analogues",
        "",
        "Synthetic phantom results next to the published values. The published",
        "values come from a private clinical dataset and are **not comparable**;",
        "they are listed only to show the row layout and the expected orderings.",
        "",
    ]
    for table in TABLE_IDS:
        rows = [r for r in results if r.spec.table == table]
        if not rows:
            continue
        cols = MULTI_COLUMNS if table == "tableIV" else BINARY_COLUMNS
        lines += [f"## {table}: {TABLE_TITLES[table]}", ""]
        header = ["Group", "Row", *cols, *(f"ref {c}" for c in cols)]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for r in rows:
            ref = PUBLISHED_REFERENCE[table][(r.spec.group, r.spec.label)]
            cells = [r.spec.group, r.spec.label, *map(_fmt, r.values), *(f"({v:.3f})" for v in ref)]
            lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    if seconds is not None:
        lines.append(f"Total runtime: {seconds / 60:.1f} min (desk budget {DESK_BUDGET_S / 3600:.0f} h).")
    return "\n".join(lines) + "\n"


def write_outputs(results: list[RowResult], out_dir, seconds: float, csv_rows: bool = False) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {"markdown": out_dir / "tables.md", "json": out_dir / "tables.json"}
    paths["markdown"].write_text(render_markdown(results, seconds))
    payload = {"seconds": seconds, "budget_seconds": DESK_BUDGET_S, "rows": [r.as_dict() for r in results]}
    paths["json"].write_text(json.dumps(payload, indent=2))
    if csv_rows:
        paths["csv"] = out_dir / "tables.csv"
        with open(paths["csv"], "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["table", "group", "row", "m1", "m2", "m3", "m4", "seconds"])
            for r in results:
                writer.writerow([r.spec.table, r.spec.group, r.spec.label, *r.values, f"{r.seconds:.1f}"])
    return paths
