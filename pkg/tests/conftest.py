"""Session fixtures: desk-scale dataset, trained models, shared attack runs.

The behavioral acceptance checks need a clean-trained model, an adversarially
fine-tuned counterpart, and attack outcomes at fixed budgets. Training and
the 2500-query black-box attack dominate the runtime (several minutes on
CPU), so everything heavy is computed once per session and shared.

The synthetic task is calibrated so the clean-trained network is accurate but
adversarially fragile: intensity noise of 0.2 against a 0.3 class contrast
leaves thin decision margins, which is what the attack-ordering and
free-training checks require.
"""

import copy
import dataclasses

import numpy as np
import pytest
import torch

from rogbench.attacks import (
    AttackConfig,
    UnitSpaceModel,
    apgd_attack,
    pgd_attack,
    run_autoattack,
)
from rogbench.bench import evaluate_clean, split_dataset, with_clean_reference
from rogbench.model import LatticeConfig, build_lattice
from rogbench.training import FreeATConfig, TrainConfig, train_free_adv, train_standard
from rogbench.volumes import (
    SynthConfig,
    compute_dataset_stats,
    make_synth_dataset,
    normalize,
    to_attack_space,
)

DESK_SEED = 2024
DESK_CASES = 20
DESK_SHAPE = (32, 32, 32)
DESK_NOISE = 0.2
DESK_EPOCHS = 40
FREE_EPOCHS = 60            # replayed m=5 -> 12 optimizer epochs
FREE_M = 5

ACC_EPS = 8 / 255           # acceptance budget
ACC_ITERS = 5
ACC_QUERIES = 2500
ACC_EPS_GRID = (5 / 255, 8 / 255, 12 / 255, 16 / 255)


def desk_synth_config() -> SynthConfig:
    return SynthConfig(shape=DESK_SHAPE, noise_sigma=DESK_NOISE)


def desk_lattice_config() -> LatticeConfig:
    return LatticeConfig(
        patch_size=DESK_SHAPE,
        num_classes=3,
        in_channels=1,
        initial_factors=(2, 2, 2),
        widths=(16, 32, 64, 128),
    )


def desk_train_config(epochs: int = DESK_EPOCHS, **free_kw) -> TrainConfig:
    free = FreeATConfig(**free_kw) if free_kw else FreeATConfig()
    return TrainConfig(epochs=epochs, batch_size=2, plateau_patience=15, free_at=free)


@pytest.fixture(scope="session")
def desk_data():
    """20 synthetic cases, normalized, split 16/4: (task, train_cases, val_cases)."""
    pairs, task = make_synth_dataset(DESK_CASES, base_seed=100, cfg=desk_synth_config())
    items = [(f"case_{i:03d}", vol, mask) for i, (vol, mask) in enumerate(pairs)]
    train_items, val_items = split_dataset(items, 0.8, seed=0)
    stats = compute_dataset_stats([(vol, mask) for _, vol, mask in train_items])
    train_cases = [(cid, normalize(vol, stats), mask) for cid, vol, mask in train_items]
    val_cases = [(cid, normalize(vol, stats), mask) for cid, vol, mask in val_items]
    return task, train_cases, val_cases


@pytest.fixture(scope="session")
def clean_model(desk_data):
    task, train_cases, val_cases = desk_data
    torch.manual_seed(DESK_SEED)
    model = build_lattice(desk_lattice_config())
    model, log = train_standard(
        model,
        [(vol, mask) for _, vol, mask in train_cases],
        [(vol, mask) for _, vol, mask in val_cases],
        desk_train_config(),
        seed=DESK_SEED,
    )
    return model


@pytest.fixture(scope="session")
def free_model(desk_data, clean_model):
    """Adversarial fine-tune of the clean model (the recommended flow)."""
    task, train_cases, val_cases = desk_data
    model = copy.deepcopy(clean_model)
    cfg = desk_train_config(
        epochs=FREE_EPOCHS, enabled=True, epsilon=ACC_EPS, m=FREE_M,
    )
    model, log = train_free_adv(
        model,
        [(vol, mask) for _, vol, mask in train_cases],
        [(vol, mask) for _, vol, mask in val_cases],
        cfg,
        seed=DESK_SEED + 1,
    )
    return model


@pytest.fixture(scope="session")
def task_mu(desk_data, clean_model):
    """Task with the clean-trained model's validation reference filled in."""
    task, _, val_cases = desk_data
    reports = evaluate_clean(clean_model, val_cases, task)
    return with_clean_reference(task, reports), reports


class AttackRunLog:
    """Every AttackResult produced during the session, for invariant audits."""

    def __init__(self):
        self.entries = []  # (name, epsilon, delta, adversarial)

    def add(self, name, res):
        self.entries.append((name, res.epsilon, res.delta, res.adversarial))


@pytest.fixture(scope="session")
def attack_log():
    return AttackRunLog()


@pytest.fixture(scope="session")
def ensemble_results(desk_data, clean_model, task_mu, attack_log):
    """Full four-attack ensemble per validation case at the acceptance budget."""
    _, _, val_cases = desk_data
    task, _ = task_mu
    out = {}
    for cid, vol, mask in val_cases:
        unit, amap = to_attack_space(vol)
        wrapped = UnitSpaceModel(clean_model, amap)
        cfg = AttackConfig(epsilon=ACC_EPS, iterations=ACC_ITERS,
                           queries=ACC_QUERIES, seed=0)
        results, worst = run_autoattack(wrapped, unit.data, mask, task, cfg)
        for name, res in results.items():
            attack_log.add(name, res)
        out[cid] = (results, worst)
    return out


def attack_means(ensemble_results) -> dict:
    """Mean Dice per attack over the validation cases."""
    names = next(iter(ensemble_results.values()))[0].keys()
    return {
        name: float(np.mean([res[0][name].dice_report.mean
                             for res in ensemble_results.values()]))
        for name in names
    }


@pytest.fixture(scope="session")
def epsilon_curves(desk_data, clean_model, task_mu, attack_log):
    """Mean-Dice curves for the fixed-step baseline and APGD-CE over the grid."""
    _, _, val_cases = desk_data
    task, _ = task_mu
    curves = {"pgd": [], "apgd-ce": []}
    for eps in ACC_EPS_GRID:
        sums = {"pgd": [], "apgd-ce": []}
        for cid, vol, mask in val_cases:
            unit, amap = to_attack_space(vol)
            wrapped = UnitSpaceModel(clean_model, amap)
            cfg = AttackConfig(epsilon=eps, iterations=ACC_ITERS, seed=0)
            for name, fn in (("pgd", pgd_attack), ("apgd-ce", apgd_attack)):
                res = fn(wrapped, unit.data, mask, task, cfg)
                attack_log.add(name, res)
                sums[name].append(res.dice_report.mean)
        for name in curves:
            curves[name].append((eps, float(np.mean(sums[name]))))
    return curves


@pytest.fixture(scope="session")
def free_under_attack(desk_data, free_model, task_mu, attack_log):
    """Free-AT model: clean reports and APGD-CE Dice at the acceptance budget."""
    task_plain, _, val_cases = desk_data
    task, _ = task_mu
    clean_reports = evaluate_clean(free_model, val_cases, task_plain)
    adv = []
    for cid, vol, mask in val_cases:
        unit, amap = to_attack_space(vol)
        wrapped = UnitSpaceModel(free_model, amap)
        cfg = AttackConfig(epsilon=ACC_EPS, iterations=ACC_ITERS, seed=0)
        res = apgd_attack(wrapped, unit.data, mask, task, cfg)
        attack_log.add("apgd-ce", res)
        adv.append(res.dice_report.mean)
    return clean_reports, float(np.mean(adv))
