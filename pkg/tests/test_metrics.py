import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rogbench.errors import MissingReferenceError
from rogbench.metrics import (
    DiceReport,
    RobustSummary,
    aggregate_robust,
    attack_success,
    auc_dice_epsilon,
    dice,
    dice_report,
)
from rogbench.volumes import LabelMask, TaskSpec

TASK = TaskSpec(("background", "organ", "tumor"), clean_mean_dice=0.7375)


def _mask(arr):
    return LabelMask(np.asarray(arr, dtype=np.int64), num_classes=2)


# --- dice ------------------------------------------------------------------


def test_dice_identity():
    m = np.zeros((4, 4, 4), dtype=np.int64)
    m[1:3, 1:3, 1:3] = 1
    assert dice(_mask(m), _mask(m), 1) == 1.0


def test_dice_disjoint():
    a = np.zeros((4, 4, 4), dtype=np.int64)
    b = np.zeros((4, 4, 4), dtype=np.int64)
    a[0, 0, 0] = 1
    b[3, 3, 3] = 1
    assert dice(_mask(a), _mask(b), 1) == 0.0


def test_dice_hand_counted():
    # |pred| = 6, |gt| = 10, overlap 4 -> 2*4 / 16 = 0.5
    pred = np.zeros((4, 4, 4), dtype=np.int64)
    gt = np.zeros((4, 4, 4), dtype=np.int64)
    pred.reshape(-1)[:6] = 1
    gt.reshape(-1)[2:12] = 1
    assert int((pred & gt).sum()) == 4
    assert dice(_mask(pred), _mask(gt), 1) == 0.5


def test_dice_empty_empty():
    z = np.zeros((3, 3, 3), dtype=np.int64)
    assert dice(_mask(z), _mask(z), 1) == 1.0


def test_dice_rejects_background_and_mismatch():
    z = np.zeros((3, 3, 3), dtype=np.int64)
    with pytest.raises(ValueError):
        dice(_mask(z), _mask(z), 0)
    with pytest.raises(ValueError):
        dice(np.zeros((3, 3, 3)), np.zeros((4, 4, 4)), 1)


def test_dice_brute_force_oracle():
    # >= 10^4 random 3x3x3 pairs against an explicit set-count oracle.
    rng = np.random.default_rng(1234)
    for _ in range(10_000):
        a = rng.integers(0, 2, size=(3, 3, 3))
        b = rng.integers(0, 2, size=(3, 3, 3))
        sa = {i for i, v in enumerate(a.reshape(-1)) if v}
        sb = {i for i, v in enumerate(b.reshape(-1)) if v}
        expected = 1.0 if not sa and not sb else 2 * len(sa & sb) / (len(sa) + len(sb))
        assert dice(a, b, 1) == pytest.approx(expected, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 10**9))
def test_dice_symmetry_and_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2, size=(3, 3, 3))
    b = rng.integers(0, 2, size=(3, 3, 3))
    assert dice(a, b, 1) == dice(b, a, 1)
    perm = rng.permutation(27)
    ap = a.reshape(-1)[perm].reshape(3, 3, 3)
    bp = b.reshape(-1)[perm].reshape(3, 3, 3)
    assert dice(ap, bp, 1) == pytest.approx(dice(a, b, 1), abs=1e-12)


def test_dice_report_mean():
    pred = np.zeros((4, 4, 4), dtype=np.int64)
    gt = np.zeros((4, 4, 4), dtype=np.int64)
    pred[0, 0, :2] = 1
    gt[0, 0, :2] = 1
    gt[1, 1, :2] = 2
    r = dice_report(LabelMask(pred, 3), LabelMask(gt, 3), 3)
    assert r.per_class[1] == 1.0
    assert r.per_class[2] == 0.0
    assert r.mean == 0.5


def test_dice_report_validation():
    with pytest.raises(ValueError):
        DiceReport({})
    with pytest.raises(ValueError):
        DiceReport({0: 0.5})
    with pytest.raises(ValueError):
        DiceReport({1: 1.5})


# --- attack success --------------------------------------------------------


def test_attack_success_table_values():
    assert attack_success(0.3581, TASK) is True  # APGD-DLR vs clean 0.7375
    assert attack_success(0.5791, TASK) is False  # Square stays above the bar


def test_attack_success_boundary_is_robust():
    assert attack_success(TASK.clean_mean_dice / 2.0, TASK) is False


def test_attack_success_requires_reference():
    with pytest.raises(MissingReferenceError):
        attack_success(0.1, TaskSpec(("background", "organ")))


# --- aggregation -----------------------------------------------------------


def _report(v):
    return DiceReport({1: v})


def test_aggregate_single_attack():
    s = aggregate_robust({"c0": {"pgd": _report(0.6)}}, TASK)
    assert s.worst_case_per_case == [0.6]
    assert s.per_attack_dice == {"pgd": 0.6}
    assert s.robust_accuracy == 1.0


def test_aggregate_min_across_attacks():
    reports = {"c0": {a: _report(v) for a, v in zip("abcd", [0.7, 0.1, 0.4, 0.6])}}
    s = aggregate_robust(reports, TASK)
    assert s.worst_case_per_case == [pytest.approx(0.1)]
    assert s.robust_accuracy == 0.0  # 0.1 < 0.7375/2


def test_aggregate_all_robust():
    reports = {
        f"c{i}": {a: _report(0.5 + 0.05 * i) for a in ("x", "y")} for i in range(4)
    }
    s = aggregate_robust(reports, TASK)
    assert s.robust_accuracy == 1.0


def test_aggregate_worst_below_every_attack_mean():
    rng = np.random.default_rng(0)
    reports = {
        f"c{i}": {a: _report(float(rng.uniform())) for a in ("a", "b", "c")}
        for i in range(6)
    }
    s = aggregate_robust(reports, TASK)
    for i, cid in enumerate(reports):
        for a in ("a", "b", "c"):
            assert s.worst_case_per_case[i] <= reports[cid][a].mean + 1e-12


def test_aggregate_ragged_rejected():
    reports = {"c0": {"a": _report(0.5)}, "c1": {"a": _report(0.5), "b": _report(0.4)}}
    with pytest.raises(ValueError):
        aggregate_robust(reports, TASK)


def test_robust_summary_range_check():
    with pytest.raises(ValueError):
        RobustSummary({"a": 0.5}, [0.5], 1.2)


# --- AUC -------------------------------------------------------------------


def test_auc_constant_curve():
    assert auc_dice_epsilon([(0.0, 1.0), (0.5, 1.0), (1.0, 1.0)]) == pytest.approx(1.0)


def test_auc_linear_drop_triangle():
    assert auc_dice_epsilon([(0.0, 0.8), (16 / 255, 0.0)]) == pytest.approx(0.4)


def test_auc_requires_increasing_grid():
    with pytest.raises(ValueError):
        auc_dice_epsilon([(0.0, 1.0)])
    with pytest.raises(ValueError):
        auc_dice_epsilon([(0.2, 1.0), (0.1, 0.5)])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**9))
def test_auc_monotone_in_pointwise_dominance(seed):
    rng = np.random.default_rng(seed)
    eps = np.sort(rng.uniform(0, 1, size=5))
    eps += np.arange(5) * 1e-6  # enforce strict increase
    lo = rng.uniform(0, 1, size=5)
    hi = np.clip(lo + rng.uniform(0, 0.5, size=5), 0, 1)
    a_lo = auc_dice_epsilon(list(zip(eps, lo)))
    a_hi = auc_dice_epsilon(list(zip(eps, hi)))
    assert a_hi >= a_lo - 1e-12
    assert 0.0 <= a_lo <= 1.0
