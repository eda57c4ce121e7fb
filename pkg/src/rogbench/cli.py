"""Command-line interface for the benchmark pipeline.

Every command takes ``--config`` (a JSON experiment config) and ``--out``
(the artifact directory) and writes a ``run_manifest.json`` recording the
config hash, seeds, and library versions. Exit codes: 0 on success, 2 for
configuration errors, 3 for missing artifacts (files, checkpoints, or sweep
coverage).

Setting the ``ROGBENCH_DETERMINISTIC`` environment variable to a truthy value
pins torch to one thread and seeds its global generator so repeated runs of
the same config produce byte-identical CSVs.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import os
import platform
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .attacks import AttackConfig, UnitSpaceModel, run_autoattack
from .bench import (
    CLEAN_NAME,
    ExperimentConfig,
    SweepTable,
    evaluate_clean,
    make_report,
    parse_epsilon,
    run_attack_sweep,
    split_dataset,
    sweep_summary,
    with_clean_reference,
    write_summary_csv,
    _result_row,
)
from .errors import ConfigError, CoverageError, MissingReferenceError
from .model import (
    LatticeConfig,
    auto_configure,
    build_lattice,
    count_params,
    load_checkpoint,
    save_checkpoint,
)
from .training import train_free_adv, train_standard
from .volumes import (
    CaseEntry,
    DatasetStats,
    SynthConfig,
    compute_dataset_stats,
    load_case,
    load_manifest,
    make_synth_dataset,
    normalize,
    per_volume_stats,
    resample,
    save_manifest,
    save_mask_raw,
    save_volume_raw,
    to_attack_space,
)

DETERMINISM_ENV = "ROGBENCH_DETERMINISTIC"


def _deterministic() -> bool:
    return os.environ.get(DETERMINISM_ENV, "").strip().lower() not in ("", "0", "false")


def _handled(fn):
    """Map domain errors to the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except (CoverageError, MissingReferenceError, FileNotFoundError) as exc:
            click.echo(f"missing artifact: {exc}", err=True)
            sys.exit(3)
        except ValueError as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)

    return wrapper


def _existing(path: Path) -> Path:
    if not path.exists():
        raise FileNotFoundError(str(path))
    return path


def _load_config(path: Path) -> ExperimentConfig:
    return ExperimentConfig.from_json(_existing(path))


def _write_run_manifest(command, out_dir: Path, config_path=None, config=None, seeds=None):
    if seeds is None and config is not None:
        seeds = list(config.seeds)
    doc = {
        "command": command,
        "config_path": None if config_path is None else str(config_path),
        "config_sha256": (
            None if config_path is None
            else hashlib.sha256(Path(config_path).read_bytes()).hexdigest()
        ),
        "seeds": seeds,
        "deterministic": _deterministic(),
        "versions": {
            "rogbench": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
        },
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


config_option = click.option(
    "--config", "config_path", type=click.Path(path_type=Path), required=True,
    help="JSON experiment config.",
)
out_option = click.option(
    "--out", "out_dir", type=click.Path(path_type=Path), required=True,
    help="Directory to write artifacts into.",
)


@click.group()
@click.version_option(version=__version__, prog_name="rogbench")
def main():
    """Adversarial-robustness benchmarking for volumetric segmentation."""
    if _deterministic():
        torch.set_num_threads(1)
        torch.manual_seed(0)


# ---------------------------------------------------------------------------
# Shared pipeline plumbing
# ---------------------------------------------------------------------------


def _split_entries(entries, config: ExperimentConfig):
    """Use split tags from the manifest when present, else split on the fly."""
    tagged = [e for e in entries if e.split in ("train", "val")]
    if tagged:
        train = [e for e in entries if e.split == "train"]
        val = [e for e in entries if e.split == "val"]
    else:
        train, val = split_dataset(entries, config.split_fraction, config.split_seed)
    if not train or not val:
        raise ConfigError("manifest split leaves an empty train or validation set")
    return train, val


def _load_eval_setup(config: ExperimentConfig):
    """Checkpoint + validation cases + task with the clean reference filled in."""
    if not config.checkpoint:
        raise ConfigError("config needs a 'checkpoint' path for attack/sweep runs")
    model, _ = load_checkpoint(_existing(Path(config.checkpoint)))
    task, entries, root = load_manifest(_existing(Path(config.manifest)))
    _, val_entries = _split_entries(entries, config)
    val = [(e.case_id, *load_case(e, root, task.num_classes)) for e in val_entries]
    reports = evaluate_clean(model, val, task, config.overlap_fraction)
    task = with_clean_reference(task, reports)
    return model, task, val, reports


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


@main.command()
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--cases", default=20, show_default=True, help="Number of cases.")
@click.option("--shape", default=32, show_default=True, help="Cubic edge length in voxels.")
@click.option("--seed", default=0, show_default=True)
@_handled
def synth(out_dir, cases, shape, seed):
    """Generate a synthetic organ+lesion dataset with a manifest."""
    if cases < 2:
        raise ConfigError("need at least two cases for a usable dataset")
    pairs, task = make_synth_dataset(cases, base_seed=seed, cfg=SynthConfig(shape=(shape,) * 3))
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (vol, mask) in enumerate(pairs):
        cid = f"case_{i:03d}"
        save_volume_raw(vol, out_dir / f"{cid}.raw")
        save_mask_raw(mask, out_dir / f"{cid}_seg.raw")
        entries.append(CaseEntry(case_id=cid, images=[f"{cid}.raw"], label=f"{cid}_seg.raw"))
    save_manifest(task, entries, out_dir / "manifest.json")
    _write_run_manifest("synth", out_dir, seeds=[seed])
    click.echo(f"wrote {cases} cases to {out_dir}")


@main.command()
@config_option
@out_option
@_handled
def preprocess(config_path, out_dir):
    """Resample to the median spacing and normalize intensities."""
    config = _load_config(config_path)
    task, entries, root = load_manifest(_existing(Path(config.manifest)))
    train_entries, _ = _split_entries(entries, config)
    train_ids = {e.case_id for e in train_entries}
    stats = compute_dataset_stats([load_case(e, root, task.num_classes) for e in train_entries])

    out_dir.mkdir(parents=True, exist_ok=True)
    object_voxels = {c: [] for c in range(1, task.num_classes)}
    out_entries = []
    for entry in entries:
        vol, mask = load_case(entry, root, task.num_classes)
        vol, mask = resample(vol, mask, stats.median_spacing)
        # CT pools intensity statistics over the training set; MR renormalizes
        # each volume by its own foreground statistics.
        vol = normalize(vol, stats if task.modality == "CT" else per_volume_stats(vol))
        split = "train" if entry.case_id in train_ids else "val"
        if split == "train":
            for c in object_voxels:
                n = int((mask.labels == c).sum())
                if n:
                    object_voxels[c].append(n)
        save_volume_raw(vol, out_dir / f"{entry.case_id}.raw")
        save_mask_raw(mask, out_dir / f"{entry.case_id}_seg.raw")
        out_entries.append(CaseEntry(
            case_id=entry.case_id,
            images=[f"{entry.case_id}.raw"],
            label=f"{entry.case_id}_seg.raw",
            split=split,
        ))
    avg = {c: float(np.mean(v)) for c, v in object_voxels.items() if v}
    task_out = dataclasses.replace(task, avg_object_voxels=avg or None)
    save_manifest(task_out, out_entries, out_dir / "manifest.json")
    (out_dir / "stats.json").write_text(json.dumps(stats.to_dict(), indent=1))
    _write_run_manifest("preprocess", out_dir, config_path, config)
    click.echo(f"preprocessed {len(out_entries)} cases "
               f"({len(train_ids)} train) to {out_dir}")


def _train_impl(config_path, out_dir, free: bool):
    config = _load_config(config_path)
    task, entries, root = load_manifest(_existing(Path(config.manifest)))
    train_entries, val_entries = _split_entries(entries, config)
    train_cases = [load_case(e, root, task.num_classes) for e in train_entries]
    val_cases = [load_case(e, root, task.num_classes) for e in val_entries]

    seed = config.seeds[0]
    torch.manual_seed(seed)
    in_channels = train_cases[0][0].num_channels
    if config.init_from:
        model, _ = load_checkpoint(_existing(Path(config.init_from)))
    elif config.model.patch_size is not None:
        model = build_lattice(LatticeConfig(
            patch_size=config.model.patch_size,
            num_classes=task.num_classes,
            in_channels=in_channels,
            initial_factors=config.model.initial_factors,
            L=config.model.levels,
            widths=config.model.widths,
        ))
    else:
        stats_path = _existing(Path(config.manifest).parent / "stats.json")
        stats = DatasetStats.from_dict(json.loads(stats_path.read_text()))
        model = build_lattice(auto_configure(
            stats, task, config.model.memory_budget_voxels,
            in_channels=in_channels, L=config.model.levels, widths=config.model.widths,
        ))

    tc = config.train
    if free:
        tc = dataclasses.replace(tc, free_at=dataclasses.replace(tc.free_at, enabled=True))
        model, log = train_free_adv(model, train_cases, val_cases, tc, seed=seed)
        mode = "free-at"
    else:
        model, log = train_standard(model, train_cases, val_cases, tc, seed=seed)
        mode = "standard"

    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out_dir / "model.pt",
                    extra={"mode": mode, "seed": seed, "best_val_dice": log.best_val_dice})
    log.to_csv(out_dir / "train_log.csv")
    _write_run_manifest("train-free" if free else "train", out_dir, config_path, config)
    click.echo(f"{mode} training done: best val Dice {log.best_val_dice:.4f}, "
               f"{count_params(model)} parameters")


@main.command()
@config_option
@out_option
@_handled
def train(config_path, out_dir):
    """Train a segmentation model on the preprocessed training split."""
    _train_impl(config_path, out_dir, free=False)


@main.command("train-free")
@config_option
@out_option
@_handled
def train_free(config_path, out_dir):
    """Adversarially train with batch-replayed free perturbations.

    Set 'init_from' in the config to fine-tune from a clean checkpoint (the
    recommended flow); otherwise training starts from random weights.
    """
    _train_impl(config_path, out_dir, free=True)


@main.command()
@config_option
@out_option
@_handled
def attack(config_path, out_dir):
    """Run the four-attack ensemble at one budget on the validation split."""
    config = _load_config(config_path)
    model, task, val, clean_reports = _load_eval_setup(config)
    label = config.attack_epsilon
    eps = parse_epsilon(label)

    rows, worst_means, survived = [], [], []
    per_attack: dict[str, list[float]] = {}
    for case_id, vol, mask in val:
        unit, amap = to_attack_space(vol)
        wrapped = UnitSpaceModel(model, amap)
        acfg = AttackConfig(
            epsilon=eps, iterations=config.iterations, queries=config.queries,
            restarts=config.restarts, seed=config.seeds[0],
            overlap_fraction=config.overlap_fraction,
        )
        results, worst = run_autoattack(wrapped, unit.data, mask, task, acfg,
                                        early_exit=config.early_exit)
        rows.append(_result_row(config.seeds[0], case_id, CLEAN_NAME, "0", 0.0, 0, 0,
                                clean_reports[case_id], False))
        for name, res in results.items():
            iters = 0 if name == "square" else config.iterations
            queries = config.queries if name == "square" else 0
            rows.append(_result_row(config.seeds[0], case_id, name, label, eps,
                                    iters, queries, res.dice_report, res.success))
            per_attack.setdefault(name, []).append(res.dice_report.mean)
        worst_means.append(worst.mean)
        survived.append(int(not any(r.success for r in results.values())))

    out_dir.mkdir(parents=True, exist_ok=True)
    SweepTable(rows=rows, num_classes=task.num_classes).to_csv(out_dir / "attack_rows.csv")
    summary = {
        "epsilon": label,
        "clean_mean_dice": task.clean_mean_dice,
        "mean_worst_dice": float(np.mean(worst_means)),
        "robust_accuracy": float(np.mean(survived)),
        "per_attack_mean_dice": {k: float(np.mean(v)) for k, v in sorted(per_attack.items())},
    }
    (out_dir / "attack_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    _write_run_manifest("attack", out_dir, config_path, config)
    click.echo(f"robust accuracy {summary['robust_accuracy']:.3f} at epsilon {label} "
               f"(clean reference {task.clean_mean_dice:.4f})")


@main.command()
@config_option
@out_option
@_handled
def sweep(config_path, out_dir):
    """Run the full attack x epsilon x seed grid on the validation split."""
    config = _load_config(config_path)
    model, task, val, _ = _load_eval_setup(config)
    table = run_attack_sweep(model, val, task, config)
    out_dir.mkdir(parents=True, exist_ok=True)
    table.to_csv(out_dir / "sweep_rows.csv")
    write_summary_csv(sweep_summary(table), out_dir / "sweep_summary.csv")
    _write_run_manifest("sweep", out_dir, config_path, config)
    click.echo(f"swept {len(config.attacks)} attacks x {len(config.epsilons)} budgets "
               f"x {len(config.seeds)} seeds over {len(val)} cases")


@main.command()
@config_option
@out_option
@_handled
def report(config_path, out_dir):
    """Aggregate sweep CSVs into summary tables and figures."""
    config = _load_config(config_path)
    if not config.report.compare:
        raise ConfigError("report.compare must map model labels to sweep row CSVs")
    tables = {label: SweepTable.from_csv(_existing(Path(path)))
              for label, path in config.report.compare.items()}
    paths = make_report(
        tables, out_dir,
        epsilons=config.epsilons,
        attacks=config.attacks,
        table_epsilon=config.report.table_epsilon,
    )
    _write_run_manifest("report", out_dir, config_path, config)
    for p in paths.csvs + paths.figures:
        click.echo(str(p))
