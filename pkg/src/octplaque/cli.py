"""Command-line entry points: generate, train, evaluate, reproduce-tables.

Exit codes: 0 success, 2 configuration or usage error, 3 runtime failure.
"""

from __future__ import annotations

import csv
import json
import logging
import sys
import time
from collections import Counter
from datetime import datetime
from pathlib import Path

import click
import tomli

from .config import ConfigError, RunConfig, load_config, save_config
from .data.arrays import load_arrays
from .data.manifest import DatasetManifest, ManifestError, class_names, load_manifest
from .data.phantom import PhantomParams, generate_dataset
from .evaluation import EvalReport, predict, render_pullback
from .experiments import DESK_BUDGET_S, TABLE_IDS, TableRunner, pretrained_store, split_manifest, write_outputs
from .models import BackboneConfig
from .train import grid_search, load_checkpoint, predict_logits, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("octplaque")


class RuntimeFailure(RuntimeError):
    """Valid configuration, but the work itself could not be completed."""


def _parse_value(raw: str):
    try:
        return tomli.loads(f"v = {raw}")["v"]
    except tomli.TOMLDecodeError:
        return raw


def _overrides(pairs, **flags) -> dict:
    out = {k: v for k, v in flags.items() if v is not None}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        out[key.strip()] = _parse_value(raw.strip())
    return out


def _full_scale_overrides() -> dict:
    return {
        "data.phantom": PhantomParams.full_scale().model_dump(mode="json"),
        "model.backbone": BackboneConfig.full().model_dump(mode="json"),
        "augment.resize_to": 300,
        "augment.crop_size": 270,
        "train.lr0": 1e-4,
    }


def _load(config_path, pairs, full_scale=False, **flags) -> RunConfig:
    overrides = _full_scale_overrides() if full_scale else {}
    overrides.update(_overrides(pairs, **flags))
    return load_config(config_path, overrides)


def _setup(cfg: RunConfig) -> None:
    import torch

    if cfg.run.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


def _run_dir(cfg: RunConfig, name: str | None = None) -> Path:
    stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
    path = Path(cfg.run.output_dir) / f"{stamp}-{name or cfg.run.name}"
    suffix = 1
    while path.exists():
        path = Path(cfg.run.output_dir) / f"{stamp}-{name or cfg.run.name}-{suffix}"
        suffix += 1
    path.mkdir(parents=True)
    return path


def _manifest_path(cfg: RunConfig, manifest: str | None) -> Path:
    return Path(manifest) if manifest else cfg.data_root() / cfg.data.manifest


def _read_manifest(path: Path):
    if not path.is_file():
        raise RuntimeFailure(f"manifest not found: {path} (run `octplaque generate` or set OCTPLAQUE_DATA_ROOT)")
    try:
        return load_manifest(path)
    except ManifestError as exc:
        raise RuntimeFailure(str(exc)) from exc


config_option = click.option(
    "-c", "--config", "config_path", type=click.Path(dir_okay=False), help="TOML run configuration."
)
set_option = click.option("--set", "pairs", multiple=True, metavar="KEY=VALUE", help="Override a dotted config key.")
seed_option = click.option("--seed", type=int, help="Run seed (run.seed).")
det_option = click.option("--deterministic", is_flag=True, default=None, help="Serial, bit-reproducible execution.")


@click.group()
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
def cli(verbose):
    """Plaque classification on synthetic IVOCT pullbacks."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command()
@config_option
@set_option
@seed_option
@click.option("--root", help="Dataset root (default: data.root, $OCTPLAQUE_DATA_ROOT, ./data).")
@click.option("--n-patients", type=int)
@click.option("--cue-mode", type=click.Choice(["standard", "complementary"]))
@click.option("--workers", type=int, help="Parallel patient workers.")
@click.option("--full-scale", is_flag=True, help="49 patients x 82 frames at 496 x 960.")
def generate(config_path, pairs, seed, root, n_patients, cue_mode, workers, full_scale):
    """Render a phantom dataset and its manifest."""
    cfg = _load(
        config_path,
        pairs,
        full_scale,
        **{
            "data.root": root,
            "data.phantom.seed": seed,
            "data.phantom.n_patients": n_patients,
            "data.phantom.cue_mode": cue_mode,
            "run.workers": workers,
        },
    )
    root = cfg.data_root()
    manifest = generate_dataset(cfg.data.phantom, root, workers=cfg.run.workers, name=cfg.data.manifest)
    counts = Counter(f.label.value for f in manifest.frames)
    click.echo(f"wrote {len(manifest)} frames from {len(manifest.patients)} patients to {root / cfg.data.manifest}")
    for label in sorted(counts):
        click.echo(f"  {label:15s} {counts[label]:6d}  ({counts[label] / len(manifest):.3f})")


@cli.command()
@config_option
@set_option
@seed_option
@det_option
@click.option(
    "--manifest", type=click.Path(dir_okay=False), help="Manifest path (default: <data root>/manifest.jsonl)."
)
@click.option("--representation", type=click.Choice(["cartesian", "polar", "two-path"]))
@click.option("--family", type=click.Choice(["residual", "dense"]))
@click.option("--epochs", type=int)
@click.option("--name", help="Run name used in the output directory.")
@click.option("--output-dir", help="Parent directory for run folders.")
@click.option("--full-scale", is_flag=True, help="Full-size backbone and 300/270 inputs.")
def train(
    config_path, pairs, seed, deterministic, manifest, representation, family, epochs, name, output_dir, full_scale
):
    """Split by patient, train one model and evaluate it on the test patients."""
    flags = {
        "run.seed": seed,
        "run.deterministic": deterministic,
        "model.representation": representation,
        "train.epochs": epochs,
        "run.name": name,
        "run.output_dir": output_dir,
    }
    if family is not None:
        make = BackboneConfig.full if full_scale else BackboneConfig.desk
        flags["model.backbone"] = make(family).model_dump(mode="json")
    cfg = _load(config_path, pairs, full_scale, **flags)
    _setup(cfg)
    manifest_path = _manifest_path(cfg, manifest)
    dataset = _read_manifest(manifest_path)
    # the snapshot pins the dataset actually used so `evaluate` and reruns find it
    cfg.data.root = str(manifest_path.parent.resolve())
    cfg.data.manifest = manifest_path.name
    out = _run_dir(cfg)
    save_config(cfg, out / "config.toml")
    (out / "figures").mkdir()

    train_m, val_m, test_m = split_manifest(dataset, cfg.data.test_fraction, cfg.data.val_fraction, cfg.run.seed)
    exp = cfg.experiment()
    needs_weights = exp.freeze.mode != "from_scratch" and cfg.pretrain.enabled
    store = pretrained_store(cfg, exp.backbone) if needs_weights else None
    if cfg.grid.enabled:
        result = grid_search(
            cfg.grid.as_grid(), dataset.subset(train_m.patients + val_m.patients), cfg.grid.k, exp, store
        )
        exp = result.best
        (out / "grid.json").write_text(
            json.dumps([{"point": p, "f1": f, "params": n} for p, f, n in result.scores], indent=2)
        )

    n = exp.n_classes
    train_a = load_arrays(train_m, n, exp.resize_to)
    val_a = load_arrays(val_m, n, exp.resize_to)
    start = time.perf_counter()
    model, history = run_experiment(exp, train_a, val_a, store, checkpoint_dir=out)
    history.write_csv(out / "history.csv")
    history.write_summary(out / "history.json")
    seconds = time.perf_counter() - start
    best = f"best val F1 {history.best_val_f1:.4f} at epoch {history.best_epoch}"
    click.echo(f"trained {len(history.epochs)} epochs in {seconds:.0f} s; {best}")

    if len(test_m):
        test_a = load_arrays(test_m, n, exp.resize_to)
        preds = predict(predict_logits(model, test_a, exp.crop_size))
        report = EvalReport.from_predictions(preds, test_a.labels, class_names(n))
        report.save(out / "report.json")
        click.echo(json.dumps(report.to_json(), indent=2))
    click.echo(f"run directory: {out}")


def _run_settings(run_dir: Path) -> RunConfig:
    path = run_dir / "config.toml"
    return load_config(path) if path.is_file() else RunConfig()


@cli.command()
@click.argument("checkpoint", type=click.Path(file_okay=False))
@click.option("--manifest", type=click.Path(dir_okay=False), help="Manifest to evaluate (default: the run's dataset).")
@click.option("--split", type=click.Choice(["test", "val", "train", "all"]), default="test", show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory (default: CHECKPOINT).")
@click.option("--render", "render_id", metavar="PULLBACK_ID", help="Write the strip figure of one pullback.")
@click.option("--csv", "csv_out", is_flag=True, help="Dump per-frame predictions to predictions.csv.")
def evaluate(checkpoint, manifest, split, out_dir, render_id, csv_out):
    """Evaluate a trained run under the evaluation (center-crop) policy."""
    run_dir = Path(checkpoint)
    cfg = _run_settings(run_dir)
    try:
        model = load_checkpoint(run_dir)
    except FileNotFoundError as exc:
        raise RuntimeFailure(str(exc)) from exc
    dataset = _read_manifest(_manifest_path(cfg, manifest))
    if split != "all":
        parts = dict(
            zip(
                ("train", "val", "test"),
                split_manifest(dataset, cfg.data.test_fraction, cfg.data.val_fraction, cfg.run.seed),
            )
        )
        subset = parts[split]
    else:
        subset = dataset
    if render_id is not None and render_id not in dataset.pullbacks:
        raise click.BadParameter(f"unknown pullback id {render_id!r}", param_hint="--render")
    if len(subset) == 0:
        raise RuntimeFailure(f"the {split} split is empty")

    n = model.n_classes
    names = class_names(n)
    arrays = load_arrays(subset, n, cfg.augment.resize_to)
    preds = predict(predict_logits(model, arrays, cfg.augment.crop_size))
    report = EvalReport.from_predictions(preds, arrays.labels, names)
    out = Path(out_dir) if out_dir else run_dir
    report.save(out / "report.json")
    click.echo(json.dumps(report.to_json(), indent=2))

    if csv_out:
        with open(out / "predictions.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["patient_id", "pullback_id", "frame_index", "label", "prediction"])
            for frame, y, p in zip(arrays.frames, arrays.labels, preds):
                writer.writerow([frame.patient_id, frame.pullback_id, frame.frame_index, names[y], names[p]])
    if render_id is not None:
        frames = sorted(dataset.pullback(render_id), key=lambda f: f.frame_index)
        pb_manifest = DatasetManifest(tuple(frames), "unassigned", dataset.provenance, dataset.root)
        pb_arrays = load_arrays(pb_manifest, n, cfg.augment.resize_to)
        pb_preds = predict(predict_logits(model, pb_arrays, cfg.augment.crop_size))
        figure = out / "figures" / f"{render_id}.png"
        render_pullback(
            [f.frame_index for f in pb_arrays.frames], pb_preds, pb_arrays.labels, pb_arrays.cartesian, figure, names
        )
        click.echo(f"figure: {figure}")


@cli.command("reproduce-tables")
@config_option
@set_option
@seed_option
@det_option
@click.option("--subset", multiple=True, type=click.Choice(TABLE_IDS), help="Only these tables (repeatable).")
@click.option("--epochs", type=int, help="Epochs per row (default: tables.epochs).")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory.")
@click.option("--csv", "csv_out", is_flag=True, help="Also write tables.csv.")
def reproduce_tables(config_path, pairs, seed, deterministic, subset, epochs, out_dir, csv_out):
    """Run the desk-scale grid behind the four result tables."""
    cfg = _load(config_path, pairs, **{"run.seed": seed, "run.deterministic": deterministic, "tables.epochs": epochs})
    _setup(cfg)
    out = Path(out_dir) if out_dir else _run_dir(cfg, "tables")
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.toml")
    runner = TableRunner(cfg, out)
    start = time.perf_counter()

    def progress(result):
        s = result.spec
        click.echo(
            f"[{time.perf_counter() - start:7.0f} s] {s.table} | {s.group} | {s.label}: "
            + " ".join(f"{v:.3f}" for v in result.values)
        )

    results = runner.run(subset or cfg.tables.subset, progress)
    elapsed = time.perf_counter() - start
    paths = write_outputs(results, out, elapsed, csv_out)
    click.echo(paths["markdown"].read_text())
    if elapsed > DESK_BUDGET_S:
        click.echo(f"warning: runtime {elapsed / 3600:.2f} h exceeds the desk budget", err=True)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, prog_name="octplaque", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_RUNTIME
    except click.UsageError as exc:
        exc.show()
        return EXIT_CONFIG
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to exit 3
        log.debug("runtime failure", exc_info=True)
        click.echo(f"error: {exc}", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
