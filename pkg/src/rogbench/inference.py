"""Whole-volume prediction: tiling, inverse-distance fusion, post-processing.

The fusion weight for a voxel at offset ``v`` inside a patch with center ``c``
is ``w = 1 / (1 + ||v - c|| / r)`` with ``r`` half the patch diagonal, so the
weight map depends only on the within-patch offset and is shared by all tiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .errors import CoverageError, MissingReferenceError
from .volumes import LabelMask, TaskSpec, Volume

_STRUCT_26 = np.ones((3, 3, 3), dtype=bool)


@dataclass
class TilePlan:
    patch_size: tuple[int, int, int]
    offsets: list[tuple[int, int, int]]
    overlap_fraction: float

    def __post_init__(self):
        if not 0.0 <= self.overlap_fraction < 1.0:
            raise ValueError("overlap fraction must be in [0, 1)")
        if self.offsets != sorted(self.offsets):
            raise ValueError("offsets must be lexicographically sorted")


def plan_tiles(volume_shape, patch_size, overlap_fraction: float = 0.5) -> TilePlan:
    """Offsets at multiples of stride = ceil(patch*(1-overlap)), last clamped."""
    volume_shape = tuple(int(s) for s in volume_shape)
    patch_size = tuple(int(p) for p in patch_size)
    if any(s < 1 for s in volume_shape):
        raise ValueError(f"volume shape must be positive, got {volume_shape}")
    if any(p < 1 for p in patch_size):
        raise ValueError(f"patch size must be positive, got {patch_size}")
    if any(p > s for p, s in zip(patch_size, volume_shape)):
        raise ValueError(f"patch {patch_size} exceeds volume {volume_shape}; pad first")
    if not 0.0 <= overlap_fraction < 1.0:
        raise ValueError("overlap fraction must be in [0, 1)")

    per_axis = []
    for s, p in zip(volume_shape, patch_size):
        stride = max(1, math.ceil(p * (1.0 - overlap_fraction)))
        starts = list(range(0, s - p + 1, stride))
        if starts[-1] != s - p:
            starts.append(s - p)
        per_axis.append(starts)
    offsets = [
        (a, b, c) for a in per_axis[0] for b in per_axis[1] for c in per_axis[2]
    ]
    return TilePlan(patch_size=patch_size, offsets=offsets, overlap_fraction=overlap_fraction)


def fusion_weights(patch_size) -> np.ndarray:
    """Within-patch weight map w = 1/(1 + d/r); shared across tiles."""
    patch_size = tuple(int(p) for p in patch_size)
    center = (np.asarray(patch_size, dtype=np.float64) - 1.0) / 2.0
    radius = float(np.linalg.norm(patch_size)) / 2.0
    grids = np.meshgrid(*[np.arange(p, dtype=np.float64) for p in patch_size], indexing="ij")
    d = np.sqrt(sum((g - c) ** 2 for g, c in zip(grids, center)))
    return (1.0 / (1.0 + d / radius)).astype(np.float64)


def fuse_predictions(patch_probs, offsets, volume_shape) -> np.ndarray:
    """Weighted-average overlapping per-patch class probabilities, numpy path."""
    patch_probs = [np.asarray(p, dtype=np.float64) for p in patch_probs]
    if len(patch_probs) != len(offsets):
        raise ValueError("one offset per patch required")
    if not patch_probs:
        raise ValueError("no patches to fuse")
    num_classes = patch_probs[0].shape[0]
    patch_size = patch_probs[0].shape[1:]
    w = fusion_weights(patch_size)
    num = np.zeros((num_classes, *volume_shape), dtype=np.float64)
    den = np.zeros(volume_shape, dtype=np.float64)
    for p, off in zip(patch_probs, offsets):
        if p.shape != (num_classes, *patch_size):
            raise ValueError("all patches must share one shape")
        sl = tuple(slice(o, o + s) for o, s in zip(off, patch_size))
        num[(slice(None), *sl)] += w * p
        den[sl] += w
    if (den == 0).any():
        raise CoverageError("some voxels are not covered by any patch")
    return (num / den).astype(np.float32)


class TiledPredictor:
    """Full-volume model application with gradients composed through fusion.

    One model call per tile feeds both outputs: fused logits (the attack-loss
    surface, differentiable in the input) and fused softmax probabilities (the
    evaluation surface).
    """

    def __init__(self, model, overlap_fraction: float = 0.5):
        self.model = model
        self.overlap_fraction = overlap_fraction
        self.patch_size = model.cfg.patch_size
        self.num_classes = model.cfg.num_classes
        self._weights = torch.from_numpy(fusion_weights(self.patch_size)).float()

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """x: (C_in, D, H, W) -> (fused logits, fused probs), each (C, D, H, W)."""
        if x.ndim != 4:
            raise ValueError(f"expected (C, D, H, W) input, got shape {tuple(x.shape)}")
        shape = tuple(x.shape[1:])
        plan = plan_tiles(shape, self.patch_size, self.overlap_fraction)
        w = self._weights.to(dtype=x.dtype)
        logit_num = x.new_zeros((self.num_classes, *shape))
        prob_num = x.new_zeros((self.num_classes, *shape))
        den = x.new_zeros(shape)
        for off in plan.offsets:
            sl = tuple(slice(o, o + p) for o, p in zip(off, self.patch_size))
            logits = self.model(x[(slice(None), *sl)].unsqueeze(0))[0]
            probs = torch.softmax(logits, dim=0)
            logit_num[(slice(None), *sl)] = logit_num[(slice(None), *sl)] + w * logits
            prob_num[(slice(None), *sl)] = prob_num[(slice(None), *sl)] + w * probs
            den[sl] = den[sl] + w
        return logit_num / den, prob_num / den

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[0]

    @torch.no_grad()
    def probs(self, x: torch.Tensor) -> torch.Tensor:
        return self.forward(x)[1]

    @torch.no_grad()
    def predict_labels(self, x: torch.Tensor) -> np.ndarray:
        """Argmax of fused probabilities; ties go to the lower class index."""
        return self.forward(x)[1].argmax(dim=0).cpu().numpy().astype(np.int64)


def largest_component(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Keep only one maximal connected component; ties -> lowest seed index."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    structure = _STRUCT_26 if connectivity == 26 else None
    labeled, n = ndimage.label(mask, structure=structure)
    if n == 1:
        return mask.copy()
    sizes = np.bincount(labeled.reshape(-1))[1:]
    best = sizes.max()
    candidates = [i + 1 for i, s in enumerate(sizes) if s == best]
    if len(candidates) == 1:
        keep = candidates[0]
    else:
        flat = labeled.reshape(-1)
        keep = min(candidates, key=lambda c: int(np.argmax(flat == c)))
    return labeled == keep


def _boundary_majority(labels: np.ndarray, component: np.ndarray) -> int:
    shell = ndimage.binary_dilation(component, structure=_STRUCT_26) & ~component
    if not shell.any():
        return 0
    counts = np.bincount(labels[shell].reshape(-1))
    return int(np.argmax(counts))  # argmax ties resolve to the lowest class


def fuse_small_components(
    labels: LabelMask, task: TaskSpec, threshold_fraction: float = 0.1
) -> LabelMask:
    """Largest-component filter for organs; small tumor blobs absorbed locally.

    A tumor-role component with fewer voxels than threshold_fraction times the
    class's mean object volume is relabeled to the majority class on its outer
    26-neighborhood shell.
    """
    out = labels.labels.copy()
    for c in task.classes_with_role("organ"):
        keep = largest_component(out == c)
        out[(out == c) & ~keep] = 0
    tumor_classes = task.classes_with_role("tumor")
    if tumor_classes and threshold_fraction > 0:
        if task.avg_object_voxels is None:
            raise MissingReferenceError("task has no avg_object_voxels for tumor fusion")
        for c in tumor_classes:
            if c not in task.avg_object_voxels:
                raise MissingReferenceError(f"no avg_object_voxels entry for class {c}")
            threshold = threshold_fraction * task.avg_object_voxels[c]
            component_map, n = ndimage.label(out == c, structure=_STRUCT_26)
            for comp in range(1, n + 1):
                region = component_map == comp
                if int(region.sum()) < threshold:
                    out[region] = _boundary_majority(out, region)
    return LabelMask(out, num_classes=labels.num_classes)


def _pad_to_patch(data: np.ndarray, patch_size) -> tuple[np.ndarray, tuple]:
    shape = data.shape[1:]
    pads = [(0, max(0, p - s)) for p, s in zip(patch_size, shape)]
    if all(p == (0, 0) for p in pads):
        return data, shape
    padded = np.pad(data, [(0, 0), *pads], mode="edge")
    return padded, shape


def predict_case(
    model,
    case: Volume,
    task: TaskSpec,
    overlap_fraction: float = 0.5,
    postprocess: bool = True,
    threshold_fraction: float = 0.1,
) -> LabelMask:
    """Tile, forward, fuse, argmax, then role-aware post-processing."""
    model.eval()
    predictor = TiledPredictor(model, overlap_fraction=overlap_fraction)
    data, orig_shape = _pad_to_patch(case.data, predictor.patch_size)
    x = torch.from_numpy(np.ascontiguousarray(data)).float()
    pred = predictor.predict_labels(x)
    pred = pred[tuple(slice(0, s) for s in orig_shape)]
    mask = LabelMask(pred, num_classes=task.num_classes)
    if postprocess:
        mask = fuse_small_components(mask, task, threshold_fraction=threshold_fraction)
    return mask
