import json

import numpy as np
import pytest

from octplaque.cli import main
from octplaque.config import load_config
from octplaque.experiments import PUBLISHED_REFERENCE, TABLE_IDS, row_values, split_manifest, table_rows

from .test_data import synthetic_manifest

TINY = [
    "--set", "data.phantom.n_patients=6",
    "--set", "data.phantom.frames_per_pullback=12",
    "--set", "data.test_fraction=0.34",
    "--set", "pretrain.n_pullbacks=2",
    "--set", "pretrain.epochs=1",
]  # fmt: skip


def test_row_sets_match_reference_layout():
    rows = table_rows(load_config())
    for table in TABLE_IDS:
        keys = [(r.group, r.label) for r in rows if r.table == table]
        assert keys == list(PUBLISHED_REFERENCE[table])
    assert [len(PUBLISHED_REFERENCE[t]) for t in TABLE_IDS] == [8, 10, 8, 8]


def test_rows_carry_their_scenario():
    rows = {(r.table, r.group, r.label): r for r in table_rows(load_config(overrides={"tables.epochs": 7}))}
    assert all(r.experiment.train.epochs == 7 for r in rows.values())
    assert not rows[("tableI", "No Data Aug.", "Resnet Cart.")].experiment.augment
    scratch = rows[("tableII", "Resnet", "From Scratch (Polar)")]
    assert scratch.experiment.representation == "polar" and not scratch.pretrained
    assert rows[("tableII", "Densenet", "p_r=2")].experiment.freeze.point == 2
    noinit = rows[("tableIII", "Resnet", "No Init.")]
    assert noinit.dataset == "complementary" and not noinit.experiment.fusion.sliced_init
    assert rows[("tableIII", "Densenet", "c_c=4")].experiment.fusion.concat_point == 4
    multi = rows[("tableIV", "Data Aug.", "Densenet Polar")].experiment
    assert multi.n_classes == 3 and multi.train.class_weights == "inverse_frequency"
    assert multi.backbone.family.value == "dense"


def test_shared_rows_are_identical_experiments():
    rows = {(r.table, r.group, r.label): r for r in table_rows(load_config())}
    a = rows[("tableI", "Data Aug.", "Resnet Cart.")]
    b = rows[("tableII", "Resnet", "Full")]
    assert a.experiment == b.experiment and a.pretrained == b.pretrained


def test_unknown_table_rejected():
    with pytest.raises(ValueError, match="tableV"):
        table_rows(load_config(), ["tableV"])


def test_row_values_order():
    assert row_values([[8, 2], [1, 9]]) == pytest.approx((0.85, 0.9, 0.8, 2 * 9 / (2 * 9 + 2 + 1)))
    cm = np.array([[10, 0, 0], [0, 8, 2], [0, 1, 3]])
    values = row_values(cm)
    assert values[:3] == pytest.approx((0.75, 0.8, 1.0))  # calcified, lipid/fibrous, no plaque


def test_split_is_patient_level_and_seeded():
    m = synthetic_manifest(24)
    train, val, test = split_manifest(m, 9 / 49, 0.2, seed=3)
    groups = [set(p.patients) for p in (train, val, test)]
    assert sum(len(g) for g in groups) == 24 and set().union(*groups) == set(m.patients)
    again = split_manifest(m, 9 / 49, 0.2, seed=3)
    assert [p.patients for p in again] == [p.patients for p in (train, val, test)]


def test_reproduce_tables_end_to_end(tmp_path):
    out = tmp_path / "tables"
    assert main(["reproduce-tables", *TINY, "--epochs", "1", "--out", str(out), "--csv"]) == 0
    payload = json.loads((out / "tables.json").read_text())
    got = {(r["table"], r["group"], r["row"]) for r in payload["rows"]}
    assert got == {(t, *key) for t in TABLE_IDS for key in PUBLISHED_REFERENCE[t]}
    assert all(len(r["values"]) == 4 and len(r["published"]) == 4 for r in payload["rows"])
    markdown = (out / "tables.md").read_text()
    assert all(f"## {t}" in markdown for t in TABLE_IDS) and "not comparable" in markdown
    assert len((out / "tables.csv").read_text().splitlines()) == 35
    assert (out / "data" / "complementary" / "manifest.jsonl").is_file()
