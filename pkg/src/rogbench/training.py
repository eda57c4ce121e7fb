"""Patch sampling, augmentation, Dice+CE objective, standard and Free-AT training."""

from __future__ import annotations

import copy
import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .metrics import dice_report
from .volumes import LabelMask, Volume


@dataclass
class AugmentPolicy:
    """Spatial/intensity augmentation switches and ranges."""

    rotate: bool = True
    rotate_max_deg: float = 30.0
    scale: bool = True
    scale_range: tuple[float, float] = (0.85, 1.25)
    mirror: bool = True
    mirror_prob: float = 0.5
    gamma: bool = True
    gamma_range: tuple[float, float] = (0.7, 1.4)

    @classmethod
    def disabled(cls) -> "AugmentPolicy":
        return cls(rotate=False, scale=False, mirror=False, gamma=False)


@dataclass
class FreeATConfig:
    enabled: bool = False
    epsilon: float = 8 / 255
    m: int = 5

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("replay count m must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 2
    learning_rate: float = 1e-3
    weight_decay: float = 1e-5
    plateau_factor: float = 0.5
    plateau_patience: int = 50
    fg_patch_prob: float = 0.5
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)
    free_at: FreeATConfig = field(default_factory=FreeATConfig)

    def __post_init__(self):
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau factor must be in (0, 1)")
        if not 0 <= self.fg_patch_prob <= 1:
            raise ValueError("foreground patch probability must be in [0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be >= 1")
        if self.plateau_patience < 1:
            raise ValueError("plateau patience must be >= 1")


def _as_rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _pad_edge(data: np.ndarray, patch_size, spatial_from: int) -> np.ndarray:
    pads = [(0, 0)] * spatial_from + [
        (0, max(0, p - s)) for p, s in zip(patch_size, data.shape[spatial_from:])
    ]
    if any(p != (0, 0) for p in pads):
        data = np.pad(data, pads, mode="edge")
    return data


def sample_patch(case, patch_size, fg_patch_prob: float, seed) -> tuple[Volume, LabelMask]:
    """Patch centered on a foreground voxel with probability fg_patch_prob.

    Centers are drawn uniformly (over foreground voxels, or over all voxels)
    and the window is clamped to stay inside the padded volume.
    """
    vol, mask = case
    rng = _as_rng(seed)
    patch_size = tuple(int(p) for p in patch_size)
    data = _pad_edge(vol.data, patch_size, spatial_from=1)
    labels = _pad_edge(mask.labels, patch_size, spatial_from=0)
    shape = labels.shape

    fg_idx = np.argwhere(labels > 0)
    if fg_idx.size and rng.random() < fg_patch_prob:
        center = fg_idx[rng.integers(0, len(fg_idx))]
    else:
        center = np.array([rng.integers(0, s) for s in shape])
    start = [
        int(np.clip(c - p // 2, 0, s - p)) for c, p, s in zip(center, patch_size, shape)
    ]
    sl = tuple(slice(o, o + p) for o, p in zip(start, patch_size))
    return (
        Volume(data[(slice(None), *sl)].copy(), spacing=vol.spacing),
        LabelMask(labels[sl].copy(), num_classes=mask.num_classes),
    )


def _rotation_matrix(angles_rad) -> np.ndarray:
    ax, ay, az = angles_rad
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rx @ ry @ rz


def augment(patch_pair, seed, policy: AugmentPolicy) -> tuple[Volume, LabelMask]:
    """One shared spatial transform for intensities (trilinear) and labels
    (nearest); gamma acts on the per-channel [0, 1]-rescaled intensities."""
    vol, mask = patch_pair
    rng = _as_rng(seed)
    data = vol.data
    labels = mask.labels

    if policy.rotate or policy.scale:
        angles = (
            np.deg2rad(rng.uniform(-policy.rotate_max_deg, policy.rotate_max_deg, size=3))
            if policy.rotate
            else np.zeros(3)
        )
        scale = rng.uniform(*policy.scale_range) if policy.scale else 1.0
        if policy.rotate or scale != 1.0:
            fwd = _rotation_matrix(angles) * scale
            inv = np.linalg.inv(fwd)
            center = (np.asarray(labels.shape, dtype=np.float64) - 1) / 2.0
            offset = center - inv @ center
            data = np.stack(
                [
                    ndimage.affine_transform(c, inv, offset=offset, order=1, mode="nearest")
                    for c in data
                ]
            ).astype(np.float32)
            labels = ndimage.affine_transform(
                labels, inv, offset=offset, order=0, mode="nearest", output=labels.dtype
            )

    if policy.mirror:
        for axis in range(3):
            if rng.random() < policy.mirror_prob:
                data = np.flip(data, axis=axis + 1)
                labels = np.flip(labels, axis=axis)
        data = np.ascontiguousarray(data)
        labels = np.ascontiguousarray(labels)

    if policy.gamma:
        g = rng.uniform(*policy.gamma_range)
        if g != 1.0:
            out = np.empty_like(data)
            for c in range(data.shape[0]):
                lo, hi = float(data[c].min()), float(data[c].max())
                if hi > lo:
                    unit = (data[c] - lo) / (hi - lo)
                    out[c] = lo + (unit**g) * (hi - lo)
                else:
                    out[c] = data[c]
            data = out

    return (
        Volume(data.copy(), spacing=vol.spacing),
        LabelMask(labels.copy(), num_classes=mask.num_classes),
    )


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

DICE_SMOOTH = 1e-5


def soft_dice_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """1 - mean over foreground classes of the soft Dice overlap."""
    if logits.ndim == 4:
        logits = logits.unsqueeze(0)
        labels = labels.unsqueeze(0)
    probs = torch.softmax(logits, dim=1)
    num_classes = logits.shape[1]
    scores = []
    for c in range(1, num_classes):
        p = probs[:, c]
        g = (labels == c).to(p.dtype)
        inter = (p * g).sum()
        scores.append((2 * inter) / (p.sum() + g.sum() + DICE_SMOOTH))
    return 1.0 - torch.stack(scores).mean()


def combined_loss(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Soft-Dice loss plus voxel-mean cross-entropy, both weighted 1.0."""
    if logits.ndim == 4:
        logits = logits.unsqueeze(0)
        labels = labels.unsqueeze(0)
    if logits.shape[2:] != labels.shape[1:] or logits.shape[0] != labels.shape[0]:
        raise ValueError(
            f"logits shape {tuple(logits.shape)} incompatible with labels {tuple(labels.shape)}"
        )
    ce = F.cross_entropy(logits, labels.long(), reduction="mean")
    return soft_dice_loss(logits, labels) + ce


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    total_steps: int = 0
    best_epoch: int = -1
    best_val_dice: float = -1.0
    lr_halvings: int = 0

    def to_csv(self, path) -> None:
        fields = ["epoch", "lr", "train_loss", "val_loss", "val_dice"]
        with open(Path(path), "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=fields)
            writer.writeheader()
            for row in self.rows:
                writer.writerow({k: row[k] for k in fields})


def _center_patch(case, patch_size) -> tuple[np.ndarray, np.ndarray]:
    vol, mask = case
    data = _pad_edge(vol.data, patch_size, spatial_from=1)
    labels = _pad_edge(mask.labels, patch_size, spatial_from=0)
    start = [max(0, (s - p) // 2) for s, p in zip(labels.shape, patch_size)]
    sl = tuple(slice(o, o + p) for o, p in zip(start, patch_size))
    return data[(slice(None), *sl)], labels[sl]


def _validate(model, val_cases, patch_size, num_classes) -> tuple[float, float]:
    model.eval()
    losses, dices = [], []
    with torch.no_grad():
        for case in val_cases:
            data, labels = _center_patch(case, patch_size)
            x = torch.from_numpy(np.ascontiguousarray(data)).float().unsqueeze(0)
            y = torch.from_numpy(np.ascontiguousarray(labels)).long()
            logits = model(x)[0]
            losses.append(float(combined_loss(logits, y)))
            pred = logits.argmax(dim=0).numpy()
            dices.append(dice_report(pred, labels, num_classes).mean)
    model.train()
    return float(np.mean(losses)), float(np.mean(dices))


def _train_loop(model, train_cases, val_cases, cfg: TrainConfig, seed, epochs, replay_m, eps_free):
    if not train_cases or not val_cases:
        raise ValueError("need non-empty train and validation case lists")
    patch_size = model.cfg.patch_size
    num_classes = model.cfg.num_classes
    rng = np.random.default_rng(seed)
    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    lr = cfg.learning_rate
    best_val_loss = np.inf
    bad_epochs = 0
    log = TrainLog()
    best_state = copy.deepcopy(model.state_dict())
    model.train()

    for epoch in range(epochs):
        order = rng.permutation(len(train_cases))
        epoch_losses = []
        for i in range(0, len(order), cfg.batch_size):
            batch = [train_cases[j] for j in order[i : i + cfg.batch_size]]
            patches = [
                augment(
                    sample_patch(case, patch_size, cfg.fg_patch_prob, rng), rng, cfg.augment
                )
                for case in batch
            ]
            x = torch.from_numpy(
                np.stack([np.ascontiguousarray(p[0].data) for p in patches])
            ).float()
            y = torch.from_numpy(np.stack([p[1].labels for p in patches])).long()

            if eps_free > 0:
                # One affine map per sample/channel onto [0, 1]; the shared
                # backward updates both the weights and the replay noise.
                lo = x.amin(dim=(2, 3, 4), keepdim=True)
                hi = x.amax(dim=(2, 3, 4), keepdim=True)
                span = hi - lo
                flat = span == 0
                unit = torch.where(flat, torch.full_like(x, 0.5), (x - lo) / torch.where(flat, torch.ones_like(span), span))
                delta = torch.zeros_like(x, requires_grad=True)
                for _ in range(replay_m):
                    x_unit = torch.clamp(unit + delta, 0.0, 1.0)
                    x_adv = lo + x_unit * span
                    logits = model(x_adv)
                    loss = combined_loss(logits, y)
                    optimizer.zero_grad(set_to_none=False)
                    loss.backward()
                    optimizer.step()
                    log.total_steps += 1
                    epoch_losses.append(float(loss.detach()))
                    with torch.no_grad():
                        delta += eps_free * torch.sign(delta.grad)
                        delta.clamp_(-eps_free, eps_free)
                        delta.grad.zero_()
            else:
                for _ in range(replay_m):
                    logits = model(x)
                    loss = combined_loss(logits, y)
                    optimizer.zero_grad(set_to_none=False)
                    loss.backward()
                    optimizer.step()
                    log.total_steps += 1
                    epoch_losses.append(float(loss.detach()))

        val_loss, val_dice = _validate(model, val_cases, patch_size, num_classes)
        log.rows.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": float(np.mean(epoch_losses)),
                "val_loss": val_loss,
                "val_dice": val_dice,
            }
        )
        if val_dice > log.best_val_dice:
            log.best_val_dice = val_dice
            log.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

        # Manual plateau rule: halve once bad_epochs reaches patience.
        if val_loss < best_val_loss:
            best_val_loss = val_loss
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= cfg.plateau_patience:
                lr *= cfg.plateau_factor
                for group in optimizer.param_groups:
                    group["lr"] = lr
                log.lr_halvings += 1
                bad_epochs = 0

    model.load_state_dict(best_state)
    model.eval()
    return model, log


def train_standard(model, train_cases, val_cases, cfg: TrainConfig, seed: int = 0):
    """Adam + manual plateau schedule; retains the best-validation-Dice weights."""
    return _train_loop(
        model, train_cases, val_cases, cfg, seed,
        epochs=cfg.epochs, replay_m=1, eps_free=0.0,
    )


def train_free_adv(model, train_cases, val_cases, cfg: TrainConfig, seed: int = 0):
    """Free adversarial training: each batch replayed m times, epochs / m.

    The perturbation lives in the per-sample [0, 1] attack space, persists
    across replays of a batch, and resets for each new batch. With m=1 and
    epsilon=0 this reduces exactly to the standard loop.
    """
    if not cfg.free_at.enabled:
        raise ValueError("free_at.enabled must be set for adversarial training")
    m = cfg.free_at.m
    return _train_loop(
        model, train_cases, val_cases, cfg, seed,
        epochs=max(1, cfg.epochs // m), replay_m=m, eps_free=cfg.free_at.epsilon,
    )
