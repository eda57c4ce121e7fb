"""Dice scores, the Dice-based attack-success criterion, robust aggregation, and AUC."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingReferenceError
from .volumes import LabelMask, TaskSpec


def _labels_of(x) -> np.ndarray:
    return x.labels if isinstance(x, LabelMask) else np.asarray(x)


def dice(pred, gt, class_id: int) -> float:
    """Standard Dice 2|A∩B| / (|A|+|B|) for one class; empty-empty counts as 1."""
    if class_id < 1:
        raise ValueError("dice is defined for foreground classes (class_id >= 1)")
    p = _labels_of(pred) == class_id
    g = _labels_of(gt) == class_id
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


@dataclass
class DiceReport:
    """Per-foreground-class Dice plus their arithmetic mean."""

    per_class: dict[int, float]
    mean: float = field(init=False)

    def __post_init__(self):
        if not self.per_class:
            raise ValueError("need at least one foreground class")
        for c, v in self.per_class.items():
            if c < 1:
                raise ValueError(f"class {c} is not a foreground class")
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"Dice for class {c} out of [0, 1]: {v}")
        self.mean = float(np.mean(list(self.per_class.values())))


def dice_report(pred, gt, num_classes: int) -> DiceReport:
    return DiceReport({c: dice(pred, gt, c) for c in range(1, num_classes)})


def attack_success(d: float, task: TaskSpec) -> bool:
    """True iff Dice dropped strictly below half the task's clean reference μᵢ."""
    if task.clean_mean_dice is None:
        raise MissingReferenceError("task has no clean_mean_dice reference")
    return d < task.clean_mean_dice / 2.0


@dataclass
class RobustSummary:
    """Mean Dice per attack, per-case worst case, and the surviving fraction."""

    per_attack_dice: dict[str, float]
    worst_case_per_case: list[float]
    robust_accuracy: float

    def __post_init__(self):
        if not 0.0 <= self.robust_accuracy <= 1.0:
            raise ValueError(f"robust_accuracy out of [0, 1]: {self.robust_accuracy}")

    def to_dict(self) -> dict:
        return {
            "per_attack_dice": dict(self.per_attack_dice),
            "worst_case_per_case": list(self.worst_case_per_case),
            "robust_accuracy": self.robust_accuracy,
        }


def aggregate_robust(
    results: dict[str, dict[str, DiceReport]], task: TaskSpec
) -> RobustSummary:
    """Per-instance worst case across attacks; robustness = fraction not broken.

    ``results`` maps case id → attack name → DiceReport; every case must carry
    the same attack set.
    """
    if not results:
        raise ValueError("no cases to aggregate")
    attack_names = None
    for case_id, per_attack in results.items():
        names = set(per_attack)
        if attack_names is None:
            attack_names = names
        elif names != attack_names:
            raise ValueError(f"case {case_id} has attacks {sorted(names)}, expected {sorted(attack_names)}")
    if not attack_names:
        raise ValueError("no attacks to aggregate")

    per_attack_dice = {
        a: float(np.mean([results[c][a].mean for c in results])) for a in sorted(attack_names)
    }
    worst = [min(results[c][a].mean for a in attack_names) for c in results]
    surviving = sum(not attack_success(w, task) for w in worst)
    return RobustSummary(
        per_attack_dice=per_attack_dice,
        worst_case_per_case=worst,
        robust_accuracy=surviving / len(worst),
    )


def auc_dice_epsilon(points) -> float:
    """Trapezoidal area of a Dice-vs-ε curve, normalized by the ε range."""
    pts = [(float(e), float(d)) for e, d in points]
    if len(pts) < 2:
        raise ValueError("need at least two (epsilon, dice) points")
    eps = np.array([p[0] for p in pts])
    vals = np.array([p[1] for p in pts])
    if not (np.diff(eps) > 0).all():
        raise ValueError("epsilon values must be strictly increasing")
    return float(np.trapezoid(vals, eps) / (eps[-1] - eps[0]))
