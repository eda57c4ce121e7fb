"""Volume/mask data model, preprocessing, attack-space rescaling, synthetic data, and I/O.

Conventions: volume arrays are ``(C, D, H, W)`` float32, label arrays are
``(D, H, W)`` integers, and ``spacing`` is the physical voxel size in mm for
the three spatial axes in the same order.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

from .errors import DegenerateStatsError, EmptyForegroundError

BACKGROUND = 0
ROLES = ("background", "organ", "tumor")


@dataclass
class Volume:
    """Multi-channel 3D intensity grid with per-axis physical spacing."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim == 3:
            self.data = self.data[None]
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be (C, D, H, W), got shape {self.data.shape}")
        if any(s < 1 for s in self.data.shape):
            raise ValueError(f"all dims must be >= 1, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        if not np.isfinite(self.data).all():
            raise ValueError("volume intensities must all be finite")

    @property
    def num_channels(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def with_data(self, data: np.ndarray) -> "Volume":
        return replace(self, data=data)


@dataclass
class LabelMask:
    """Per-voxel class assignments aligned with a Volume. Class 0 is background."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must be integral, got dtype {self.labels.dtype}")
        if self.labels.ndim != 3:
            raise ValueError(f"labels must be (D, H, W), got shape {self.labels.shape}")
        if self.num_classes < 2:
            raise ValueError("need at least background plus one foreground class")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(
                f"labels must lie in [0, {self.num_classes - 1}], "
                f"got range [{self.labels.min()}, {self.labels.max()}]"
            )

    @property
    def spatial_shape(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def foreground(self) -> np.ndarray:
        return self.labels != BACKGROUND


@dataclass
class TaskSpec:
    """Class inventory with per-class roles, modality, and clean-performance reference."""

    class_roles: tuple[str, ...]
    modality: str = "CT"
    clean_mean_dice: float | None = None
    avg_object_voxels: dict[int, float] | None = None

    def __post_init__(self):
        self.class_roles = tuple(self.class_roles)
        for role in self.class_roles:
            if role not in ROLES:
                raise ValueError(f"unknown class role {role!r}")
        if self.class_roles.count("background") != 1 or self.class_roles[0] != "background":
            raise ValueError("exactly one background class is required, at index 0")
        if self.modality not in ("CT", "MR"):
            raise ValueError(f"modality must be CT or MR, got {self.modality!r}")
        if self.clean_mean_dice is not None and not 0.0 <= self.clean_mean_dice <= 1.0:
            raise ValueError(f"clean_mean_dice must be in [0, 1], got {self.clean_mean_dice}")
        if self.avg_object_voxels is not None:
            self.avg_object_voxels = {int(k): float(v) for k, v in self.avg_object_voxels.items()}

    @property
    def num_classes(self) -> int:
        return len(self.class_roles)

    def classes_with_role(self, role: str) -> list[int]:
        return [i for i, r in enumerate(self.class_roles) if r == role]

    def to_dict(self) -> dict:
        return {
            "class_roles": list(self.class_roles),
            "modality": self.modality,
            "clean_mean_dice": self.clean_mean_dice,
            "avg_object_voxels": (
                None
                if self.avg_object_voxels is None
                else {str(k): v for k, v in self.avg_object_voxels.items()}
            ),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        return cls(
            class_roles=tuple(d["class_roles"]),
            modality=d.get("modality", "CT"),
            clean_mean_dice=d.get("clean_mean_dice"),
            avg_object_voxels=d.get("avg_object_voxels"),
        )


@dataclass
class DatasetStats:
    """Foreground intensity statistics and geometry summary of a training set.

    ``fg_std`` may legitimately be zero for a constant foreground; operations
    that would divide by it raise :class:`DegenerateStatsError` instead.
    """

    median_spacing: tuple[float, float, float]
    avg_shape: tuple[float, float, float]
    fg_p005: float
    fg_p995: float
    fg_mean: float
    fg_std: float

    def __post_init__(self):
        self.median_spacing = tuple(float(s) for s in self.median_spacing)
        self.avg_shape = tuple(float(s) for s in self.avg_shape)
        if self.fg_p005 > self.fg_p995:
            raise ValueError("fg_p005 must not exceed fg_p995")
        if self.fg_std < 0:
            raise ValueError("fg_std must be non-negative")

    def to_dict(self) -> dict:
        return {
            "median_spacing": list(self.median_spacing),
            "avg_shape": list(self.avg_shape),
            "fg_p005": self.fg_p005,
            "fg_p995": self.fg_p995,
            "fg_mean": self.fg_mean,
            "fg_std": self.fg_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetStats":
        return cls(
            median_spacing=tuple(d["median_spacing"]),
            avg_shape=tuple(d["avg_shape"]),
            fg_p005=d["fg_p005"],
            fg_p995=d["fg_p995"],
            fg_mean=d["fg_mean"],
            fg_std=d["fg_std"],
        )


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def _resampled_shape(shape, spacing, target_spacing) -> tuple[int, ...]:
    return tuple(
        max(1, int(np.round(s * sp / t))) for s, sp, t in zip(shape, spacing, target_spacing)
    )


def resample(
    volume: Volume,
    mask: LabelMask | None,
    target_spacing,
) -> tuple[Volume, LabelMask | None]:
    """Resample to a target voxel spacing: trilinear intensities, nearest labels.

    The output shape per axis is ``round(shape * spacing / target)`` (at least
    1); voxel centers are aligned so that the physical extent is preserved.
    """
    target_spacing = tuple(float(t) for t in target_spacing)
    if len(target_spacing) != 3 or any(t <= 0 for t in target_spacing):
        raise ValueError(f"target spacing must be 3 positive reals, got {target_spacing}")
    if mask is not None and mask.spatial_shape != volume.spatial_shape:
        raise ValueError("mask shape does not match volume shape")

    in_shape = volume.spatial_shape
    out_shape = _resampled_shape(in_shape, volume.spacing, target_spacing)

    # Voxel-center alignment: out index i maps to input coordinate
    # (i + 0.5) * target / spacing - 0.5 on each axis.
    axes_coords = [
        (np.arange(n_out) + 0.5) * (t / sp) - 0.5
        for n_out, t, sp in zip(out_shape, target_spacing, volume.spacing)
    ]
    grid = np.meshgrid(*axes_coords, indexing="ij")
    coords = np.stack([g.reshape(-1) for g in grid])

    out_data = np.empty((volume.num_channels, *out_shape), dtype=np.float32)
    for c in range(volume.num_channels):
        out_data[c] = map_coordinates(
            volume.data[c], coords, order=1, mode="nearest"
        ).reshape(out_shape)
    out_volume = Volume(out_data, spacing=target_spacing, origin=volume.origin)

    out_mask = None
    if mask is not None:
        resampled = map_coordinates(mask.labels, coords, order=0, mode="nearest")
        out_mask = LabelMask(resampled.reshape(out_shape), num_classes=mask.num_classes)
    return out_volume, out_mask


def compute_dataset_stats(training_cases: list[tuple[Volume, LabelMask]]) -> DatasetStats:
    """Pool foreground intensities over a training set and summarise geometry.

    Percentiles use linear interpolation between order statistics. The average
    shape is taken after (virtual) resampling to the median spacing.
    """
    if not training_cases:
        raise ValueError("need at least one training case")
    fg_values = []
    spacings = []
    shapes = []
    for vol, mask in training_cases:
        if mask.spatial_shape != vol.spatial_shape:
            raise ValueError("mask shape does not match volume shape")
        fg = mask.foreground()
        if fg.any():
            fg_values.append(vol.data[:, fg].reshape(-1))
        spacings.append(vol.spacing)
        shapes.append(vol.spatial_shape)
    if not fg_values:
        raise EmptyForegroundError("no foreground voxel in any training case")
    pooled = np.concatenate(fg_values).astype(np.float64)

    median_spacing = tuple(np.median(np.asarray(spacings), axis=0))
    resampled_shapes = [
        _resampled_shape(shape, spacing, median_spacing)
        for shape, spacing in zip(shapes, spacings)
    ]
    avg_shape = tuple(np.mean(np.asarray(resampled_shapes, dtype=np.float64), axis=0))
    return DatasetStats(
        median_spacing=median_spacing,
        avg_shape=avg_shape,
        fg_p005=float(np.percentile(pooled, 0.5)),
        fg_p995=float(np.percentile(pooled, 99.5)),
        fg_mean=float(pooled.mean()),
        fg_std=float(pooled.std()),
    )


def per_volume_stats(volume: Volume) -> DatasetStats:
    """Stats over all voxels of a single volume, for per-volume (MR) normalization.

    Unlike :func:`compute_dataset_stats` this needs no labels, so it can run at
    inference time; the geometry fields just echo the volume's own spacing/shape.
    """
    values = volume.data.reshape(-1).astype(np.float64)
    return DatasetStats(
        median_spacing=volume.spacing,
        avg_shape=tuple(float(s) for s in volume.spatial_shape),
        fg_p005=float(np.percentile(values, 0.5)),
        fg_p995=float(np.percentile(values, 99.5)),
        fg_mean=float(values.mean()),
        fg_std=float(values.std()),
    )


def normalize(volume: Volume, stats: DatasetStats) -> Volume:
    """Clip intensities to the stats percentile window, then z-score them."""
    if stats.fg_std == 0:
        raise DegenerateStatsError("foreground intensity spread is zero")
    clipped = np.clip(volume.data, stats.fg_p005, stats.fg_p995)
    return volume.with_data((clipped - stats.fg_mean) / stats.fg_std)


# ---------------------------------------------------------------------------
# Attack space
# ---------------------------------------------------------------------------


@dataclass
class AffineMap:
    """Per-channel affine rescaling between native intensities and the [0, 1] box.

    A degenerate (constant) channel maps to 0.5 forward and back to the
    constant on inversion.
    """

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float32).reshape(-1)
        self.hi = np.asarray(self.hi, dtype=np.float32).reshape(-1)
        if self.lo.shape != self.hi.shape:
            raise ValueError("lo and hi must have one entry per channel")

    @property
    def scale(self) -> np.ndarray:
        return self.hi - self.lo

    def apply(self, data: np.ndarray) -> np.ndarray:
        lo = self.lo.reshape(-1, 1, 1, 1)
        span = self.scale.reshape(-1, 1, 1, 1)
        out = np.where(span > 0, (data - lo) / np.where(span > 0, span, 1.0), 0.5)
        return out.astype(np.float32)

    def invert(self, unit_data: np.ndarray) -> np.ndarray:
        lo = self.lo.reshape(-1, 1, 1, 1)
        span = self.scale.reshape(-1, 1, 1, 1)
        return (lo + unit_data * span).astype(np.float32)


def to_attack_space(volume: Volume) -> tuple[Volume, AffineMap]:
    """Rescale each channel to [0, 1] so perturbation budgets in /255 units apply."""
    flat = volume.data.reshape(volume.num_channels, -1)
    amap = AffineMap(lo=flat.min(axis=1), hi=flat.max(axis=1))
    return volume.with_data(amap.apply(volume.data)), amap


# ---------------------------------------------------------------------------
# Synthetic cases
# ---------------------------------------------------------------------------


@dataclass
class SynthConfig:
    """Geometry and intensity ranges for one synthetic organ/tumor case."""

    shape: tuple[int, int, int] = (32, 32, 32)
    channels: int = 1
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    # Semi-axis / radius ranges as fractions of the half extent per axis.
    organ_semiaxis_frac: tuple[float, float] = (0.50, 0.70)
    tumor_radius_frac: tuple[float, float] = (0.14, 0.22)
    with_tumor: bool = True
    background_mean: float = 0.2
    organ_mean: float = 0.5
    tumor_mean: float = 0.8
    noise_sigma: float = 0.1

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if any(s < 16 for s in self.shape):
            raise ValueError(f"each axis must be >= 16, got {self.shape}")
        if self.channels < 1:
            raise ValueError("need at least one channel")
        lo, hi = self.organ_semiaxis_frac
        if not 0 < lo <= hi < 1:
            raise ValueError(f"bad organ semi-axis range {self.organ_semiaxis_frac}")
        tlo, thi = self.tumor_radius_frac
        if self.with_tumor and not 0 < tlo <= thi:
            raise ValueError(f"bad tumor radius range {self.tumor_radius_frac}")
        if self.with_tumor and thi >= lo:
            raise ValueError(
                "tumor radius range must sit strictly below the organ semi-axis range"
            )

    @property
    def num_classes(self) -> int:
        return 3 if self.with_tumor else 2

    def task_spec(self) -> TaskSpec:
        roles = ("background", "organ", "tumor") if self.with_tumor else ("background", "organ")
        return TaskSpec(class_roles=roles, modality="CT")


def synth_case(seed: int, cfg: SynthConfig | None = None) -> tuple[Volume, LabelMask, TaskSpec]:
    """Generate one deterministic synthetic case.

    One ellipsoidal organ (class 1) with an optional spherical tumor (class 2)
    strictly inside it; intensities are class means plus Gaussian noise.
    """
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(seed)
    shape = np.asarray(cfg.shape, dtype=np.float64)
    half = shape / 2.0

    semiaxes = rng.uniform(*cfg.organ_semiaxis_frac, size=3) * half
    center = half + rng.uniform(-0.05, 0.05, size=3) * shape
    # Keep the ellipsoid inside the grid.
    semiaxes = np.minimum(semiaxes, np.minimum(center, shape - 1 - center))

    zz, yy, xx = np.meshgrid(*[np.arange(s) for s in cfg.shape], indexing="ij")
    coords = np.stack([zz, yy, xx]).astype(np.float64)
    organ = (((coords - center.reshape(3, 1, 1, 1)) / semiaxes.reshape(3, 1, 1, 1)) ** 2).sum(
        axis=0
    ) <= 1.0

    labels = np.zeros(cfg.shape, dtype=np.int64)
    labels[organ] = 1

    if cfg.with_tumor:
        radius = rng.uniform(*cfg.tumor_radius_frac) * half.min()
        shrink = semiaxes - radius
        if np.any(shrink <= 0):
            raise ValueError("tumor radius does not fit strictly inside the organ")
        # Rejection-sample a tumor center in the shrunken ellipsoid, so the
        # whole sphere stays inside the organ.
        while True:
            offset = rng.uniform(-1.0, 1.0, size=3)
            if (offset**2).sum() <= 1.0:
                break
        tumor_center = center + offset * shrink * 0.9
        tumor = ((coords - tumor_center.reshape(3, 1, 1, 1)) ** 2).sum(axis=0) <= radius**2
        labels[tumor] = 2

    means = np.array([cfg.background_mean, cfg.organ_mean, cfg.tumor_mean])[labels]
    data = np.empty((cfg.channels, *cfg.shape), dtype=np.float32)
    for c in range(cfg.channels):
        data[c] = means + rng.normal(0.0, cfg.noise_sigma, size=cfg.shape)

    task = cfg.task_spec()
    counts = {c: float((labels == c).sum()) for c in range(1, cfg.num_classes)}
    task.avg_object_voxels = counts
    return (
        Volume(data, spacing=cfg.spacing),
        LabelMask(labels, num_classes=cfg.num_classes),
        task,
    )


def make_synth_dataset(
    num_cases: int, base_seed: int = 0, cfg: SynthConfig | None = None
) -> tuple[list[tuple[Volume, LabelMask]], TaskSpec]:
    """Generate a list of cases plus a TaskSpec with dataset-level object sizes."""
    cfg = cfg or SynthConfig()
    cases = []
    sums = {c: 0.0 for c in range(1, cfg.num_classes)}
    for i in range(num_cases):
        vol, mask, task = synth_case(base_seed + i, cfg)
        cases.append((vol, mask))
        for c in sums:
            sums[c] += task.avg_object_voxels.get(c, 0.0)
    task = cfg.task_spec()
    task.avg_object_voxels = {c: s / max(num_cases, 1) for c, s in sums.items()}
    return cases, task


# ---------------------------------------------------------------------------
# Raw binary container: little-endian float32/uint8, C-order, JSON sidecar
# ---------------------------------------------------------------------------


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def save_volume_raw(volume: Volume, path) -> None:
    path = Path(path)
    header = {
        "kind": "volume",
        "shape": list(volume.data.shape),
        "spacing": list(volume.spacing),
        "dtype": "float32",
        "order": "C",
        "origin": None if volume.origin is None else list(volume.origin),
    }
    path.write_bytes(volume.data.astype("<f4").tobytes(order="C"))
    _sidecar_path(path).write_text(json.dumps(header, indent=1))


def load_volume_raw(path) -> Volume:
    path = Path(path)
    header = json.loads(_sidecar_path(path).read_text())
    data = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(header["shape"])
    origin = header.get("origin")
    return Volume(
        data.copy(),
        spacing=tuple(header["spacing"]),
        origin=None if origin is None else tuple(origin),
    )


def save_mask_raw(mask: LabelMask, path) -> None:
    path = Path(path)
    if mask.num_classes > 256:
        raise ValueError("raw container stores labels as uint8")
    header = {
        "kind": "mask",
        "shape": list(mask.labels.shape),
        "num_classes": mask.num_classes,
        "dtype": "uint8",
        "order": "C",
    }
    path.write_bytes(mask.labels.astype(np.uint8).tobytes(order="C"))
    _sidecar_path(path).write_text(json.dumps(header, indent=1))


def load_mask_raw(path) -> LabelMask:
    path = Path(path)
    header = json.loads(_sidecar_path(path).read_text())
    labels = np.frombuffer(path.read_bytes(), dtype=np.uint8).reshape(header["shape"])
    return LabelMask(labels.astype(np.int64), num_classes=header["num_classes"])


# ---------------------------------------------------------------------------
# Minimal NIfTI-1 reader/writer (single file, optional gzip)
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_NIFTI_CODES = {np.dtype(np.uint8): 2, np.dtype(np.float32): 16}


def _nifti_open(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode)


def read_nifti(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    """Read a NIfTI-1 file into a ``(C, D, H, W)`` array plus (D, H, W) spacing."""
    path = Path(path)
    with _nifti_open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 352:
        raise ValueError(f"{path} is too short to be a NIfTI-1 file")
    magic = raw[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise ValueError(f"{path} has no NIfTI-1 magic")
    dim = struct.unpack("<8h", raw[40:56])
    datatype, _bitpix = struct.unpack("<2h", raw[70:74])
    pixdim = struct.unpack("<8f", raw[76:108])
    (vox_offset,) = struct.unpack("<f", raw[108:112])
    scl_slope, scl_inter = struct.unpack("<2f", raw[112:120])
    ndim = dim[0]
    if ndim not in (3, 4):
        raise ValueError(f"only 3D/4D NIfTI supported, got {ndim}D")
    if datatype not in _NIFTI_DTYPES:
        raise ValueError(f"unsupported NIfTI datatype code {datatype}")
    shape_xyz = dim[1 : ndim + 1]
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder("<")
    count = int(np.prod(shape_xyz))
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=int(vox_offset))
    # NIfTI stores x fastest; reorder to (C, z, y, x).
    arr = data.reshape(shape_xyz, order="F")
    arr = arr.transpose(tuple(reversed(range(arr.ndim))))
    if ndim == 3:
        arr = arr[None]
    else:
        pass  # already (T, z, y, x); treat the 4th dim as channels
    arr = np.ascontiguousarray(arr).astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        arr = arr * slope + scl_inter
    spacing = (float(pixdim[3]), float(pixdim[2]), float(pixdim[1]))
    spacing = tuple(s if s > 0 else 1.0 for s in spacing)
    return arr, spacing


def write_nifti(data: np.ndarray, spacing, path, dtype=np.float32) -> None:
    """Write a ``(C, D, H, W)`` array as NIfTI-1 (4D if C > 1, else 3D)."""
    path = Path(path)
    data = np.asarray(data)
    if data.ndim == 3:
        data = data[None]
    if data.ndim != 4:
        raise ValueError(f"expected (C, D, H, W) data, got shape {data.shape}")
    dtype = np.dtype(dtype)
    if dtype not in _NIFTI_CODES:
        raise ValueError(f"unsupported write dtype {dtype}")
    channels = data.shape[0]
    ndim = 3 if channels == 1 else 4
    shape_xyz = tuple(reversed(data.shape[1:])) + ((channels,) if ndim == 4 else ())

    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    dim = [ndim, *shape_xyz] + [1] * (7 - len(shape_xyz))
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<2h", header, 70, _NIFTI_CODES[dtype], dtype.itemsize * 8)
    pixdim = [1.0, float(spacing[2]), float(spacing[1]), float(spacing[0]), 1.0, 1.0, 1.0, 1.0]
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[344:348] = b"n+1\x00"

    # (C, z, y, x) -> x-fastest layout.
    arr = data.transpose(3, 2, 1, 0) if ndim == 4 else data[0].transpose(2, 1, 0)
    payload = arr.astype(dtype.newbyteorder("<")).tobytes(order="F")
    with _nifti_open(path, "wb") as f:
        f.write(bytes(header))
        f.write(b"\x00" * 4)
        f.write(payload)


def load_image(path) -> Volume:
    """Load one image file (.nii, .nii.gz, or .raw) as a Volume."""
    s = str(path)
    if s.endswith((".nii", ".nii.gz")):
        data, spacing = read_nifti(path)
        return Volume(data, spacing=spacing)
    return load_volume_raw(path)


def load_labels(path, num_classes: int) -> LabelMask:
    s = str(path)
    if s.endswith((".nii", ".nii.gz")):
        data, _ = read_nifti(path)
        return LabelMask(np.rint(data[0]).astype(np.int64), num_classes=num_classes)
    return load_mask_raw(path)


def save_labels(mask: LabelMask, path) -> None:
    s = str(path)
    if s.endswith((".nii", ".nii.gz")):
        write_nifti(mask.labels.astype(np.uint8)[None], (1.0, 1.0, 1.0), path, dtype=np.uint8)
    else:
        save_mask_raw(mask, path)


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------


@dataclass
class CaseEntry:
    """One dataset case: image path per channel, a label path, and a split tag."""

    case_id: str
    images: list[str]
    label: str
    split: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {"id": self.case_id, "images": self.images, "label": self.label, "split": self.split}
        d.update(self.extra)
        return d


def save_manifest(task: TaskSpec, cases: list[CaseEntry], path) -> None:
    doc = {"task": task.to_dict(), "cases": [c.to_dict() for c in cases]}
    Path(path).write_text(json.dumps(doc, indent=1))


def load_manifest(path) -> tuple[TaskSpec, list[CaseEntry], Path]:
    path = Path(path)
    doc = json.loads(path.read_text())
    task = TaskSpec.from_dict(doc["task"])
    cases = []
    for c in doc["cases"]:
        known = {"id", "images", "label", "split"}
        cases.append(
            CaseEntry(
                case_id=c["id"],
                images=list(c["images"]),
                label=c["label"],
                split=c.get("split"),
                extra={k: v for k, v in c.items() if k not in known},
            )
        )
    return task, cases, path.parent


def load_case(entry: CaseEntry, root: Path, num_classes: int) -> tuple[Volume, LabelMask]:
    """Load a case's channels (stacked) and labels relative to the manifest dir."""
    channels = [load_image(root / p) for p in entry.images]
    data = np.concatenate([c.data for c in channels], axis=0)
    vol = Volume(data, spacing=channels[0].spacing, origin=channels[0].origin)
    mask = load_labels(root / entry.label, num_classes=num_classes)
    if mask.spatial_shape != vol.spatial_shape:
        raise ValueError(f"case {entry.case_id}: label shape does not match image shape")
    return vol, mask
