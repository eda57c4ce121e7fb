"""Triangular-lattice segmentation network with dataset-driven auto-configuration.

Four scales; scale s (1 = finest) holds L + (4 - s) nodes, so L = 2 gives the
row lengths [5, 4, 3, 2]. A node receives its same-scale predecessor (identity),
the same-column node one scale finer (strided 1x1x1 conv), and the
previous-column node one scale coarser (1x1x1 conv + trilinear x2), summed.
Each node is two separable convolutions (depthwise 3^3 + pointwise), each with
instance norm and swish, wrapped in a residual connection.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .volumes import DatasetStats, TaskSpec, Volume

NUM_SCALES = 4
MAX_INITIAL_FACTOR = 4
RESOLUTION_FLOOR = 32  # coarsest map is >= patch/32 per axis
PATCH_MIN, PATCH_MAX = 32, 128
DEFAULT_BASE_WIDTH = 60  # widths double per scale; 60 puts the reference net at ~2.6M params


@dataclass
class LatticeConfig:
    """Complete architecture description; checkpoints embed it as JSON."""

    patch_size: tuple[int, int, int]
    num_classes: int
    in_channels: int = 1
    initial_factors: tuple[int, int, int] = (2, 2, 2)
    L: int = 2
    widths: tuple[int, ...] = field(default=None)  # per scale, finest first
    num_scales: int = NUM_SCALES

    def __post_init__(self):
        self.patch_size = tuple(int(p) for p in self.patch_size)
        self.initial_factors = tuple(int(f) for f in self.initial_factors)
        if self.num_scales != NUM_SCALES:
            raise ValueError("the lattice is defined for exactly four scales")
        if self.widths is None:
            self.widths = tuple(DEFAULT_BASE_WIDTH * 2**s for s in range(self.num_scales))
        self.widths = tuple(int(w) for w in self.widths)
        if self.L < 1:
            raise ValueError("need at least one node at the deepest scale")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if len(self.widths) != self.num_scales or any(w < 1 for w in self.widths):
            raise ValueError(f"need {self.num_scales} positive widths, got {self.widths}")
        lattice_stride = 2 ** (self.num_scales - 1)
        for axis, (p, f) in enumerate(zip(self.patch_size, self.initial_factors)):
            if f not in (1, 2, 4):
                raise ValueError(f"initial factor on axis {axis} must be 1, 2 or 4, got {f}")
            if f * lattice_stride > RESOLUTION_FLOOR:
                raise ValueError(
                    f"axis {axis}: factor {f} breaks the 1/{RESOLUTION_FLOOR} resolution floor"
                )
            if p % (f * lattice_stride) != 0:
                raise ValueError(
                    f"axis {axis}: patch {p} not divisible by {f * lattice_stride}"
                )

    @property
    def nodes_per_scale(self) -> tuple[int, ...]:
        return tuple(self.L + (self.num_scales - s) for s in range(1, self.num_scales + 1))

    def to_dict(self) -> dict:
        return {
            "patch_size": list(self.patch_size),
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "initial_factors": list(self.initial_factors),
            "L": self.L,
            "widths": list(self.widths),
            "num_scales": self.num_scales,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatticeConfig":
        return cls(
            patch_size=tuple(d["patch_size"]),
            num_classes=d["num_classes"],
            in_channels=d["in_channels"],
            initial_factors=tuple(d["initial_factors"]),
            L=d["L"],
            widths=tuple(d["widths"]),
            num_scales=d.get("num_scales", NUM_SCALES),
        )


def _round_down_32(x: float) -> int:
    return int(x // 32) * 32


def _factor_for_edge(edge: int) -> int:
    if edge >= 128:
        return 4
    if edge >= 64:
        return 2
    return 1


def auto_configure(
    stats: DatasetStats,
    task: TaskSpec,
    memory_budget_voxels: int,
    in_channels: int = 1,
    L: int = 2,
    widths: tuple[int, ...] | None = None,
) -> LatticeConfig:
    """Pick patch size and entry strides from the dataset's average shape.

    Per axis the patch edge is the average shape rounded down to a multiple of
    32 and clamped to [32, 128]. While the patch exceeds the voxel budget the
    largest edge is shrunk by 32 (ties resolved toward the last axis). Entry
    factors are 4 / 2 / 1 for edges >= 128 / >= 64 / below.
    """
    if memory_budget_voxels <= 0:
        raise ValueError("memory budget must be positive")
    if any(a <= 0 for a in stats.avg_shape):
        raise ValueError("average shape must be positive")
    patch = [min(max(_round_down_32(a), PATCH_MIN), PATCH_MAX) for a in stats.avg_shape]
    while int(np.prod(patch)) > memory_budget_voxels and any(p > PATCH_MIN for p in patch):
        largest = max(patch)
        axis = max(i for i, p in enumerate(patch) if p == largest)
        patch[axis] -= 32
    factors = tuple(_factor_for_edge(p) for p in patch)
    return LatticeConfig(
        patch_size=tuple(patch),
        num_classes=task.num_classes,
        in_channels=in_channels,
        initial_factors=factors,
        L=L,
        widths=widths,
    )


class _InstanceNorm(nn.Module):
    """Affine instance norm (no running stats) that tolerates 1-voxel maps.

    At the resolution floor a feature map can be 1x1x1, where per-instance
    statistics are undefined; the affine part is applied directly there.
    """

    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))
        self.eps = eps

    def forward(self, x):
        if x.shape[2:].numel() == 1:
            shape = (1, -1) + (1,) * (x.ndim - 2)
            return x * self.weight.view(shape) + self.bias.view(shape)
        return F.instance_norm(x, weight=self.weight, bias=self.bias, eps=self.eps)


class _SepConvBlock(nn.Module):
    """Depthwise 3^3 + pointwise 1^3 convolution, instance norm, swish."""

    def __init__(self, width: int):
        super().__init__()
        self.depthwise = nn.Conv3d(width, width, 3, padding=1, groups=width, bias=False)
        self.pointwise = nn.Conv3d(width, width, 1, bias=False)
        self.norm = _InstanceNorm(width)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.norm(self.pointwise(self.depthwise(x))))


class LatticeNode(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.block1 = _SepConvBlock(width)
        self.block2 = _SepConvBlock(width)

    def forward(self, x):
        return x + self.block2(self.block1(x))


class _InitialModule(nn.Module):
    """Four full 3^3 convolutions realizing the per-axis entry factors.

    Per-axis strides of 2 are placed on the earliest convolutions; a factor of
    4 uses two of them, 2 uses one, 1 uses none.
    """

    def __init__(self, in_channels: int, width: int, factors: tuple[int, int, int]):
        super().__init__()
        twos = [int(np.log2(f)) for f in factors]
        layers = []
        ch = in_channels
        for k in range(4):
            stride = tuple(2 if k < t else 1 for t in twos)
            layers += [
                nn.Conv3d(ch, width, 3, stride=stride, padding=1, bias=False),
                _InstanceNorm(width),
                nn.SiLU(),
            ]
            ch = width
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class _Head(nn.Module):
    """3^3 conv + norm + swish, 1^3 conv to class logits, upsample to patch size."""

    def __init__(self, width: int, num_classes: int, factors: tuple[int, int, int]):
        super().__init__()
        self.conv = nn.Conv3d(width, width, 3, padding=1, bias=False)
        self.norm = _InstanceNorm(width)
        self.act = nn.SiLU()
        self.classifier = nn.Conv3d(width, num_classes, 1, bias=True)
        self.factors = factors

    def forward(self, x, out_size):
        x = self.classifier(self.act(self.norm(self.conv(x))))
        if tuple(x.shape[2:]) != tuple(out_size):
            x = F.interpolate(x, size=tuple(out_size), mode="trilinear", align_corners=False)
        return x


class LatticeSegNet(nn.Module):
    def __init__(self, cfg: LatticeConfig):
        super().__init__()
        self.cfg = cfg
        rows = cfg.nodes_per_scale
        self.initial = _InitialModule(cfg.in_channels, cfg.widths[0], cfg.initial_factors)
        self.nodes = nn.ModuleDict()
        self.down_edges = nn.ModuleDict()  # from (s-1, j) into (s, j)
        self.up_edges = nn.ModuleDict()  # from (s+1, j-1) into (s, j)
        for s in range(1, cfg.num_scales + 1):
            w = cfg.widths[s - 1]
            for j in range(rows[s - 1]):
                key = f"s{s}c{j}"
                self.nodes[key] = LatticeNode(w)
                if s >= 2:
                    self.down_edges[key] = nn.Conv3d(
                        cfg.widths[s - 2], w, 1, stride=2, bias=False
                    )
                if j >= 1 and s + 1 <= cfg.num_scales and j - 1 < rows[s]:
                    self.up_edges[key] = nn.Conv3d(cfg.widths[s], w, 1, bias=False)
        self.head = _Head(cfg.widths[0], cfg.num_classes, cfg.initial_factors)

    def forward(self, x):
        cfg = self.cfg
        if tuple(x.shape[2:]) != cfg.patch_size:
            raise ValueError(f"expected patch {cfg.patch_size}, got {tuple(x.shape[2:])}")
        rows = cfg.nodes_per_scale
        feats = {}
        stem = self.initial(x)
        # Columns left to right; within a column finest scale first, so both
        # the finer same-column and coarser previous-column inputs exist.
        for j in range(rows[0]):
            for s in range(1, cfg.num_scales + 1):
                if j >= rows[s - 1]:
                    continue
                key = f"s{s}c{j}"
                acc = stem if (s == 1 and j == 0) else None
                if j >= 1:
                    prev = feats[(s, j - 1)]
                    acc = prev if acc is None else acc + prev
                if key in self.down_edges:
                    d = self.down_edges[key](feats[(s - 1, j)])
                    acc = d if acc is None else acc + d
                if key in self.up_edges:
                    u = self.up_edges[key](feats[(s + 1, j - 1)])
                    u = F.interpolate(u, scale_factor=2, mode="trilinear", align_corners=False)
                    acc = u if acc is None else acc + u
                feats[(s, j)] = self.nodes[key](acc)
        return self.head(feats[(1, rows[0] - 1)], cfg.patch_size)

    @torch.no_grad()
    def logits_for(self, volume: Volume) -> np.ndarray:
        """Forward one full-patch Volume; returns (C, D, H, W) logits."""
        x = torch.from_numpy(np.ascontiguousarray(volume.data)).unsqueeze(0).float()
        return self(x)[0].cpu().numpy()


def build_lattice(cfg: LatticeConfig) -> LatticeSegNet:
    return LatticeSegNet(cfg)


def count_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def save_checkpoint(model: LatticeSegNet, path, extra: dict | None = None) -> None:
    """Self-describing checkpoint: weights plus the architecture as JSON."""
    payload = {
        "config_json": json.dumps(model.cfg.to_dict()),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, Path(path))


def load_checkpoint(path) -> tuple[LatticeSegNet, dict]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    cfg = LatticeConfig.from_dict(json.loads(payload["config_json"]))
    model = LatticeSegNet(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
