"""Experiment orchestration: configs, splits, attack sweeps, and reports.

The pieces here turn the library primitives into reproducible experiments:
an :class:`ExperimentConfig` parsed from JSON (perturbation budgets are kept
as exact rational labels like ``"8/255"``), a deterministic train/val split,
clean-reference evaluation, the attack sweep that produces one row per
(seed, case, attack, epsilon) cell, and a report builder that aggregates the
rows into CSV tables and Dice-vs-epsilon figures.

Report CSVs are byte-stable: rows are sorted under a fixed key and floats are
serialized with ``repr``, so two runs of the same deterministic sweep produce
identical files.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
import torch

from .attacks import (
    ATTACK_ORDER,
    AttackConfig,
    UnitSpaceModel,
    apgd_attack,
    fab_t_attack,
    pgd_attack,
    square_attack,
)
from .errors import ConfigError, CoverageError, MissingReferenceError
from .inference import TiledPredictor
from .metrics import DiceReport, auc_dice_epsilon, dice_report
from .training import AugmentPolicy, FreeATConfig, TrainConfig
from .volumes import LabelMask, TaskSpec, Volume, to_attack_space
from . import plotting

# Names accepted in sweep grids: the ensemble plus the fixed-step baseline.
SWEEP_ATTACKS = ("pgd",) + ATTACK_ORDER
CLEAN_NAME = "clean"

# Fixed row ordering inside CSVs so identical runs serialize identically.
_ATTACK_RANK = {name: i for i, name in enumerate((CLEAN_NAME,) + SWEEP_ATTACKS)}


def parse_epsilon(label) -> float:
    """Parse a perturbation budget given as ``"8/255"``, ``"0.05"``, or a number."""
    if isinstance(label, bool):
        raise ConfigError(f"cannot parse epsilon {label!r}")
    if isinstance(label, (int, float)):
        value = float(label)
    else:
        try:
            value = float(Fraction(str(label).strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"cannot parse epsilon {label!r}") from exc
    if not 0.0 < value <= 1.0:
        raise ConfigError(f"epsilon must lie in (0, 1], got {label!r}")
    return value


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


@dataclass
class ModelSettings:
    """Architecture knobs; explicit patch/strides override the auto rule."""

    base_width: int = 60
    levels: int = 2
    memory_budget_voxels: int = 16_000_000
    patch_size: tuple[int, int, int] | None = None
    initial_factors: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.base_width < 1:
            raise ConfigError("model.base_width must be >= 1")
        if self.levels < 1:
            raise ConfigError("model.levels must be >= 1")
        if self.memory_budget_voxels < 32 ** 3:
            raise ConfigError("model.memory_budget_voxels is too small for one patch")
        if (self.patch_size is None) != (self.initial_factors is None):
            raise ConfigError("model.patch_size and model.initial_factors go together")
        if self.patch_size is not None:
            self.patch_size = tuple(int(p) for p in self.patch_size)
            self.initial_factors = tuple(int(f) for f in self.initial_factors)

    @property
    def widths(self) -> tuple[int, int, int, int]:
        return tuple(self.base_width * 2 ** k for k in range(4))


@dataclass
class ReportSettings:
    """Which epsilon anchors the summary table and which sweeps to compare."""

    table_epsilon: str = "8/255"
    compare: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        parse_epsilon(self.table_epsilon)
        if not isinstance(self.compare, dict):
            raise ConfigError("report.compare must map labels to sweep CSV paths")


@dataclass
class ExperimentConfig:
    """Everything one benchmark run needs, parsed and validated from JSON."""

    manifest: str
    epsilons: tuple[str, ...] = ("8/255",)
    iterations: int = 5
    queries: int = 2500
    restarts: int = 1
    attacks: tuple[str, ...] = ATTACK_ORDER
    seeds: tuple[int, ...] = (0,)
    early_exit: bool = False
    overlap_fraction: float = 0.5
    split_fraction: float = 0.8
    split_seed: int = 0
    attack_epsilon: str = "8/255"
    checkpoint: str | None = None
    init_from: str | None = None
    model: ModelSettings = field(default_factory=ModelSettings)
    train: TrainConfig = field(default_factory=TrainConfig)
    report: ReportSettings = field(default_factory=ReportSettings)

    def __post_init__(self):
        if not self.manifest:
            raise ConfigError("manifest path must be set")
        self.epsilons = tuple(str(e) for e in self.epsilons)
        if not self.epsilons:
            raise ConfigError("epsilon grid must be non-empty")
        values = [parse_epsilon(e) for e in self.epsilons]
        if any(b <= a for a, b in zip(values, values[1:])):
            raise ConfigError("epsilon grid must be strictly increasing")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.queries < 1:
            raise ConfigError("queries must be >= 1")
        if self.restarts < 1:
            raise ConfigError("restarts must be >= 1")
        self.attacks = tuple(self.attacks)
        if not self.attacks:
            raise ConfigError("attack list must be non-empty")
        for name in self.attacks:
            if name not in SWEEP_ATTACKS:
                raise ConfigError(f"unknown attack {name!r}; choose from {SWEEP_ATTACKS}")
        if len(set(self.attacks)) != len(self.attacks):
            raise ConfigError("attack list contains duplicates")
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.seeds:
            raise ConfigError("seed list must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seed list contains duplicates")
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ConfigError("overlap_fraction must lie in [0, 1)")
        if not 0.0 < self.split_fraction < 1.0:
            raise ConfigError("split_fraction must lie in (0, 1)")
        parse_epsilon(self.attack_epsilon)

    @property
    def epsilon_values(self) -> tuple[float, ...]:
        return tuple(parse_epsilon(e) for e in self.epsilons)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ConfigError("config root must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "manifest" not in doc:
            raise ConfigError("config is missing the 'manifest' key")
        kwargs = dict(doc)
        try:
            kwargs["model"] = _model_settings(doc.get("model", {}))
            kwargs["train"] = _train_config(doc.get("train", {}))
            kwargs["report"] = _report_settings(doc.get("report", {}))
            return cls(**kwargs)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        text = Path(path).read_text()
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        return cls.from_dict(doc)


def _sub_keys(doc: dict, cls, section: str) -> dict:
    if not isinstance(doc, dict):
        raise ConfigError(f"config section {section!r} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    return dict(doc)


def _model_settings(doc: dict) -> ModelSettings:
    return ModelSettings(**_sub_keys(doc, ModelSettings, "model"))


def _report_settings(doc: dict) -> ReportSettings:
    return ReportSettings(**_sub_keys(doc, ReportSettings, "report"))


def _train_config(doc: dict) -> TrainConfig:
    kwargs = _sub_keys(doc, TrainConfig, "train")
    if "augment" in kwargs:
        aug = _sub_keys(kwargs["augment"], AugmentPolicy, "train.augment")
        for key in ("scale_range", "gamma_range"):
            if key in aug:
                aug[key] = tuple(aug[key])
        kwargs["augment"] = AugmentPolicy(**aug)
    if "free_at" in kwargs:
        free = _sub_keys(kwargs["free_at"], FreeATConfig, "train.free_at")
        if "epsilon" in free:
            free["epsilon"] = parse_epsilon(free["epsilon"])
        kwargs["free_at"] = FreeATConfig(**free)
    try:
        return TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train section: {exc}") from exc


# ---------------------------------------------------------------------------
# Dataset split and clean reference
# ---------------------------------------------------------------------------


def split_dataset(items, fraction: float = 0.8, seed: int = 0) -> tuple[list, list]:
    """Deterministic shuffled split keeping at least one case on each side."""
    items = list(items)
    if len(items) < 2:
        raise ValueError("need at least two cases to split")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"split fraction must lie in (0, 1), got {fraction}")
    order = np.random.default_rng(seed).permutation(len(items))
    n_train = int(len(items) * fraction + 1e-9)
    n_train = min(max(n_train, 1), len(items) - 1)
    train_idx = sorted(order[:n_train].tolist())
    val_idx = sorted(order[n_train:].tolist())
    return [items[i] for i in train_idx], [items[i] for i in val_idx]


def evaluate_clean(model, cases, task: TaskSpec, overlap_fraction: float = 0.5):
    """Unperturbed Dice per case along the same path the attacks use.

    ``cases`` is a list of ``(case_id, Volume, LabelMask)``; volumes hold
    normalized intensities. Returns ``{case_id: DiceReport}``.
    """
    reports: dict[str, DiceReport] = {}
    for case_id, vol, mask in cases:
        unit, amap = to_attack_space(vol)
        predictor = TiledPredictor(UnitSpaceModel(model, amap), overlap_fraction=overlap_fraction)
        pred = predictor.predict_labels(torch.from_numpy(unit.data).float())
        reports[case_id] = dice_report(pred, mask.labels, task.num_classes)
    return reports


def clean_reference(reports: dict[str, DiceReport]) -> float:
    """The clean-performance reference: mean Dice over cases."""
    if not reports:
        raise ValueError("need at least one clean report")
    return float(np.mean([r.mean for r in reports.values()]))


def with_clean_reference(task: TaskSpec, reports: dict[str, DiceReport]) -> TaskSpec:
    return dataclasses.replace(task, clean_mean_dice=clean_reference(reports))


# ---------------------------------------------------------------------------
# Attack sweep
# ---------------------------------------------------------------------------


@dataclass
class SweepTable:
    """Flat result rows, one per (seed, case, attack, epsilon) cell."""

    rows: list[dict]
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least one foreground class")

    @property
    def fieldnames(self) -> list[str]:
        per_class = [f"dice_c{c}" for c in range(1, self.num_classes)]
        return ["seed", "case_id", "attack", "epsilon", "eps", "iterations",
                "queries", *per_class, "dice_mean", "success"]

    def sorted_rows(self) -> list[dict]:
        return sorted(
            self.rows,
            key=lambda r: (r["seed"], r["case_id"], r["eps"], _ATTACK_RANK[r["attack"]]),
        )

    def to_csv(self, path) -> None:
        path = Path(path)
        names = self.fieldnames
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(names)
            for row in self.sorted_rows():
                writer.writerow([_cell(row[k]) for k in names])

    @classmethod
    def from_csv(cls, path) -> "SweepTable":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            names = reader.fieldnames or []
            rows = [_parse_row(raw) for raw in reader]
        num_classes = 1 + sum(1 for n in names if n.startswith("dice_c"))
        return cls(rows=rows, num_classes=num_classes)


def _cell(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_row(raw: dict) -> dict:
    row = {}
    for key, value in raw.items():
        if key in ("seed", "iterations", "queries", "success"):
            row[key] = int(value)
        elif key == "eps" or key.startswith("dice"):
            row[key] = float(value)
        else:
            row[key] = value
    return row


def _result_row(seed, case_id, name, label, eps, iterations, queries, report, success):
    row = {
        "seed": seed,
        "case_id": case_id,
        "attack": name,
        "epsilon": label,
        "eps": float(eps),
        "iterations": iterations,
        "queries": queries,
        "dice_mean": float(report.mean),
        "success": int(success),
    }
    for c, v in report.per_class.items():
        row[f"dice_c{c}"] = float(v)
    return row


def dispatch_attack(name: str, model, x, mask: LabelMask, task: TaskSpec, cfg: AttackConfig):
    """Run one named attack; the APGD loss follows the name."""
    if name == "pgd":
        return pgd_attack(model, x, mask, task, dataclasses.replace(cfg, loss_kind="voxel-ce"))
    if name == "apgd-ce":
        return apgd_attack(model, x, mask, task, dataclasses.replace(cfg, loss_kind="voxel-ce"))
    if name == "apgd-dlr":
        return apgd_attack(model, x, mask, task, dataclasses.replace(cfg, loss_kind="voxel-dlr"))
    if name == "fab-t":
        return fab_t_attack(model, x, mask, task, cfg)
    if name == "square":
        return square_attack(model, x, mask, task, cfg)
    raise ConfigError(f"unknown attack {name!r}")


def run_attack_sweep(model, cases, task: TaskSpec, config: ExperimentConfig) -> SweepTable:
    """Evaluate every (seed, case, attack, epsilon) cell plus clean sentinel rows.

    ``cases`` is a list of ``(case_id, Volume, LabelMask)`` with normalized
    intensities; ``task.clean_mean_dice`` must be set so success flags are
    well-defined. A one-point grid still yields len(attacks) x len(seeds)
    attack rows per case.
    """
    if task.clean_mean_dice is None:
        raise MissingReferenceError("task needs clean_mean_dice before a sweep")
    rows = []
    for seed in config.seeds:
        for case_id, vol, mask in cases:
            unit, amap = to_attack_space(vol)
            wrapped = UnitSpaceModel(model, amap)
            x = unit.data
            base = AttackConfig(
                epsilon=0.0,
                iterations=config.iterations,
                queries=config.queries,
                restarts=config.restarts,
                seed=seed,
                overlap_fraction=config.overlap_fraction,
            )
            clean = pgd_attack(wrapped, x, mask, task, base)
            rows.append(_result_row(seed, case_id, CLEAN_NAME, "0", 0.0, 0, 0,
                                    clean.dice_report, False))
            for label in config.epsilons:
                eps = parse_epsilon(label)
                acfg = dataclasses.replace(base, epsilon=eps)
                for name in config.attacks:
                    res = dispatch_attack(name, wrapped, x, mask, task, acfg)
                    iters = 0 if name == "square" else config.iterations
                    queries = config.queries if name == "square" else 0
                    rows.append(_result_row(seed, case_id, name, label, eps,
                                            iters, queries, res.dice_report, res.success))
    return SweepTable(rows=rows, num_classes=task.num_classes)


def sweep_summary(table: SweepTable) -> list[dict]:
    """Mean Dice and success rate per (attack, epsilon) cell, sorted."""
    cells: dict[tuple, list[dict]] = {}
    for row in table.rows:
        cells.setdefault((row["attack"], row["epsilon"], row["eps"]), []).append(row)
    out = []
    for (attack, label, eps) in sorted(cells, key=lambda k: (k[2], _ATTACK_RANK[k[0]])):
        group = cells[(attack, label, eps)]
        out.append({
            "attack": attack,
            "epsilon": label,
            "eps": eps,
            "mean_dice": float(np.mean([r["dice_mean"] for r in group])),
            "success_rate": float(np.mean([r["success"] for r in group])),
        })
    return out


def write_summary_csv(summary: list[dict], path) -> None:
    names = ["attack", "epsilon", "eps", "mean_dice", "success_rate"]
    with open(Path(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(names)
        for row in summary:
            writer.writerow([_cell(row[k]) for k in names])


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------


@dataclass
class ReportPaths:
    csvs: list[Path]
    figures: list[Path]


def _coverage_gaps(tables, epsilons, attacks) -> list[str]:
    gaps = []
    for label in sorted(tables):
        table = tables[label]
        have = {(r["attack"], r["epsilon"]) for r in table.rows}
        if not any(a == CLEAN_NAME for a, _ in have):
            gaps.append(f"{label}: missing clean rows")
        for attack in attacks:
            for eps_label in epsilons:
                if (attack, eps_label) not in have:
                    gaps.append(f"{label}: missing {attack} at epsilon {eps_label}")
    return gaps


def _curve(table: SweepTable, attack: str, epsilons) -> list[tuple[float, float]]:
    points = []
    for eps_label in epsilons:
        group = [r["dice_mean"] for r in table.rows
                 if r["attack"] == attack and r["epsilon"] == eps_label]
        points.append((parse_epsilon(eps_label), float(np.mean(group))))
    return points


def _worst_case_stats(table: SweepTable, ensemble, epsilons):
    """Per epsilon: mean over (seed, case) of the worst attack, and survival rate."""
    out = {}
    for eps_label in epsilons:
        per_instance: dict[tuple, list[dict]] = {}
        for row in table.rows:
            if row["attack"] in ensemble and row["epsilon"] == eps_label:
                per_instance.setdefault((row["seed"], row["case_id"]), []).append(row)
        worst = [min(r["dice_mean"] for r in rows) for rows in per_instance.values()]
        survived = [int(not any(r["success"] for r in rows)) for rows in per_instance.values()]
        out[eps_label] = (float(np.mean(worst)), float(np.mean(survived)))
    return out


def make_report(
    tables: dict[str, SweepTable],
    out_dir,
    *,
    epsilons,
    attacks=ATTACK_ORDER,
    table_epsilon: str = "8/255",
) -> ReportPaths:
    """Aggregate sweep tables into CSV summaries and Dice-vs-epsilon figures.

    ``tables`` maps a model label (e.g. training regime) to its sweep rows.
    Every requested (attack, epsilon) cell must be present in every table;
    otherwise a :class:`CoverageError` lists the gaps and nothing is written.
    """
    if not tables:
        raise ValueError("no sweep tables to report on")
    epsilons = [str(e) for e in epsilons]
    if not epsilons:
        raise ConfigError("report needs a non-empty epsilon grid")
    for eps_label in epsilons:
        parse_epsilon(eps_label)
    attacks = tuple(attacks)
    for name in attacks:
        if name not in SWEEP_ATTACKS:
            raise ConfigError(f"unknown attack {name!r}")
    if table_epsilon not in epsilons:
        raise ConfigError(f"table epsilon {table_epsilon!r} is not on the sweep grid")
    classes = {t.num_classes for t in tables.values()}
    if len(classes) > 1:
        raise ValueError(f"sweep tables disagree on class count: {sorted(classes)}")
    for label in sorted(tables):
        if not tables[label].rows:
            raise CoverageError(f"{label}: sweep table is empty")
    gaps = _coverage_gaps(tables, epsilons, attacks)
    if gaps:
        raise CoverageError("incomplete sweep coverage:\n" + "\n".join(gaps))

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ensemble = tuple(a for a in ATTACK_ORDER if a in attacks)
    labels = sorted(tables)

    clean_mean = {m: float(np.mean([r["dice_mean"] for r in tables[m].rows
                                    if r["attack"] == CLEAN_NAME])) for m in labels}
    curves = {m: {a: _curve(tables[m], a, epsilons) for a in attacks} for m in labels}
    worst = {m: _worst_case_stats(tables[m], ensemble, epsilons) for m in labels} if ensemble else {}

    csvs = []

    path = out_dir / "report_curves.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "attack", "epsilon", "eps", "mean_dice"])
        for m in labels:
            writer.writerow([m, CLEAN_NAME, "0", _cell(0.0), _cell(clean_mean[m])])
            for a in sorted(attacks, key=_ATTACK_RANK.get):
                for eps_label, (e, d) in zip(epsilons, curves[m][a]):
                    writer.writerow([m, a, eps_label, _cell(e), _cell(d)])
    csvs.append(path)

    eps_index = epsilons.index(table_epsilon)
    path = out_dir / "report_table.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "clean", *ensemble])
        for m in labels:
            row = [m, _cell(clean_mean[m])]
            row += [_cell(curves[m][a][eps_index][1]) for a in ensemble]
            writer.writerow(row)
    csvs.append(path)

    path = out_dir / "report_auc.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "attack", "auc"])
        if len(epsilons) >= 2:
            for m in labels:
                for a in sorted(attacks, key=_ATTACK_RANK.get):
                    writer.writerow([m, a, _cell(auc_dice_epsilon(curves[m][a]))])
    csvs.append(path)

    path = out_dir / "report_robust.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "epsilon", "eps", "robust_accuracy", "worst_mean_dice"])
        for m in labels:
            for eps_label in epsilons:
                if m in worst:
                    worst_mean, survived = worst[m][eps_label]
                    writer.writerow([m, eps_label, _cell(parse_epsilon(eps_label)),
                                     _cell(survived), _cell(worst_mean)])
    csvs.append(path)

    figures = []
    if ensemble:
        # Robustness profile: worst-case ensemble Dice vs epsilon, one curve
        # per training regime, anchored at the clean point.
        series = {}
        for m in labels:
            xs = [0.0] + [parse_epsilon(e) for e in epsilons]
            ys = [clean_mean[m]] + [worst[m][e][0] for e in epsilons]
            series[m] = (xs, ys)
        fig_path = out_dir / "fig_dice_vs_eps.png"
        plotting.plot_dice_curves(
            series, fig_path,
            title="Worst-case ensemble Dice vs perturbation budget",
            tick_labels={0.0: "0", **{parse_epsilon(e): e for e in epsilons}},
        )
        figures.append(fig_path)

    if "pgd" in attacks and "apgd-ce" in attacks and len(epsilons) >= 2:
        series = {}
        for m in labels:
            for a in ("pgd", "apgd-ce"):
                xs = [e for e, _ in curves[m][a]]
                ys = [d for _, d in curves[m][a]]
                auc = auc_dice_epsilon(curves[m][a])
                key = f"{m}: {a} (AUC {auc:.3f})" if len(labels) > 1 else f"{a} (AUC {auc:.3f})"
                series[key] = (xs, ys)
        fig_path = out_dir / "fig_pgd_vs_apgd.png"
        plotting.plot_dice_curves(
            series, fig_path,
            title="Fixed-step vs budget-aware attack",
            tick_labels={parse_epsilon(e): e for e in epsilons},
        )
        figures.append(fig_path)

    return ReportPaths(csvs=csvs, figures=figures)
