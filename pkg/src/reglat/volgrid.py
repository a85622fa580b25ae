"""Volumetric data model: intensity volumes, label maps, identity grids,
affine resampling and the raw on-disk store.

Axis convention: arrays are indexed ``(axis0, axis1, axis2) = (D, H, W)``,
with axis 0 playing the role of the through-plane ("z") direction. Affine
matrices are 4x4 homogeneous maps acting on voxel coordinates. The resampler
``apply_affine(v, A)`` produces ``out[x] = v[A^-1 x]``, i.e. ``A`` describes
the motion of the image content, not of the sampling grid.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

CLIP_RANGE = 5.0

_META_NAME = "meta.json"
_DATA_NAME = "data.raw"
_AXIS_NAMES = {"z": 0, "y": 1, "x": 2}


class VolumeStoreError(Exception):
    """Malformed or inconsistent on-disk volume data."""


class DegenerateVolumeWarning(UserWarning):
    """Normalization hit a flat (zero-spread) volume and returned zeros."""


def axis_index(axis: int | str) -> int:
    """Map an axis name ('z','y','x') or integer to an array axis index."""
    if isinstance(axis, str):
        try:
            return _AXIS_NAMES[axis.lower()]
        except KeyError:
            raise ValueError(f"unknown axis name {axis!r}") from None
    if axis not in (0, 1, 2):
        raise ValueError(f"axis must be 0, 1 or 2, got {axis}")
    return int(axis)


@dataclass
class Volume:
    """A scalar 3D image on a voxel lattice.

    ``data`` is (D, H, W) float32. ``spacing`` is mm per axis and is carried
    as metadata only; no operation in this package resamples by spacing.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume data contains NaN or Inf")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class SegMap:
    """An integer label map aligned with a companion :class:`Volume`.

    Labels live in ``{0 .. label_count}`` with 0 reserved for background.
    """

    labels: np.ndarray
    label_count: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3:
            raise ValueError(f"label data must be 3D, got shape {self.labels.shape}")
        self.label_count = int(self.label_count)
        if self.label_count < 1:
            raise ValueError("label_count must be >= 1")
        top = int(self.labels.max()) if self.labels.size else 0
        if top > self.label_count:
            raise ValueError(
                f"label {top} out of range for label_count={self.label_count}"
            )
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


def normalize_volume(v: Volume) -> Volume:
    """Standardize, clip to +/-CLIP_RANGE and rescale to [0, 1].

    The chain is: z-score over all voxels (population std), clip to the
    closed interval [-5, 5], then min-max rescale of the clipped values.
    Flat inputs (zero std, or zero spread after clipping) come back as all
    zeros and raise :class:`DegenerateVolumeWarning`.
    """
    x = v.data.astype(np.float64)
    std = float(x.std())
    if std == 0.0:
        warnings.warn("constant volume normalizes to zeros", DegenerateVolumeWarning)
        return Volume(np.zeros_like(v.data), v.spacing)
    z = (x - x.mean()) / std
    z = np.clip(z, -CLIP_RANGE, CLIP_RANGE)
    lo, hi = float(z.min()), float(z.max())
    if hi == lo:
        warnings.warn("flat volume after clipping normalizes to zeros",
                      DegenerateVolumeWarning)
        return Volume(np.zeros_like(v.data), v.spacing)
    out = (z - lo) / (hi - lo)
    return Volume(out.astype(np.float32), v.spacing)


def make_identity_grid(shape: tuple[int, int, int]) -> np.ndarray:
    """Identity sampling grid, shape (3, D, H, W); coords[c] varies along axis c."""
    d, h, w = (int(s) for s in shape)
    if min(d, h, w) < 1:
        raise ValueError(f"invalid shape {shape}")
    axes = np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij")
    return np.stack(axes).astype(np.float32)


def affine_about_center(
    shape: tuple[int, int, int],
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0),
    rotation_axis: int | str | None = None,
    rotation_deg: float = 0.0,
    scale: float | tuple[float, float, float] = 1.0,
    flip_axes: tuple[int, ...] = (),
) -> np.ndarray:
    """Build a 4x4 voxel-coordinate affine acting about the volume center.

    Rotation is in-plane around ``rotation_axis``; scaling and flips are
    symmetric about the geometric center (size-1)/2; translation is applied
    last, in voxels.
    """
    center = np.array([(s - 1) / 2.0 for s in shape])

    lin = np.eye(3)
    if rotation_axis is not None and rotation_deg != 0.0:
        ax = axis_index(rotation_axis)
        i, j = [a for a in (0, 1, 2) if a != ax]
        th = math.radians(rotation_deg)
        rot = np.eye(3)
        rot[i, i] = math.cos(th)
        rot[i, j] = -math.sin(th)
        rot[j, i] = math.sin(th)
        rot[j, j] = math.cos(th)
        lin = rot @ lin
    scales = np.full(3, float(scale)) if np.isscalar(scale) else np.asarray(scale, float)
    for ax in flip_axes:
        scales[axis_index(ax)] *= -1.0
    lin = lin @ np.diag(scales)

    a = np.eye(4)
    a[:3, :3] = lin
    a[:3, 3] = center - lin @ center + np.asarray(translation, float)
    return a


def apply_affine(
    v: Volume | SegMap,
    a: np.ndarray,
    interp: str | None = None,
) -> Volume | SegMap:
    """Resample through a 4x4 affine: ``out[x] = v[A^-1 x]``.

    Volumes default to trilinear interpolation, SegMaps always use nearest
    neighbor. Out-of-bounds samples clamp to the border value.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (4, 4):
        raise ValueError(f"affine must be 4x4, got {a.shape}")
    try:
        inv = np.linalg.inv(a)
    except np.linalg.LinAlgError:
        raise ValueError("affine matrix is singular") from None

    if isinstance(v, SegMap):
        order = 0
        data = v.labels
    else:
        if interp is None:
            interp = "linear"
        if interp not in ("linear", "nearest"):
            raise ValueError(f"unknown interpolation {interp!r}")
        order = 1 if interp == "linear" else 0
        data = v.data

    out = ndimage.affine_transform(
        data.astype(np.float64),
        inv,
        order=order,
        mode="nearest",  # border clamp
        prefilter=False,
    )
    if isinstance(v, SegMap):
        return SegMap(np.rint(out).astype(np.uint8), v.label_count, v.spacing)
    return Volume(out.astype(np.float32), v.spacing)


# --------------------------------------------------------------------------
# Raw on-disk store: one directory per stored array, meta.json + data.raw,
# little-endian C-order payload.
# --------------------------------------------------------------------------

def _write_store(path: Path, meta: dict, payload: bytes) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / _META_NAME).write_text(json.dumps(meta, indent=1))
    (path / _DATA_NAME).write_bytes(payload)


def _read_store(path: Path) -> tuple[dict, bytes]:
    path = Path(path)
    meta_path = path / _META_NAME
    data_path = path / _DATA_NAME
    if not meta_path.is_file():
        raise FileNotFoundError(f"no {_META_NAME} under {path}")
    if not data_path.is_file():
        raise FileNotFoundError(f"no {_DATA_NAME} under {path}")
    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as e:
        raise VolumeStoreError(f"malformed header in {meta_path}: {e}") from None
    for key in ("shape", "dtype", "byte_order", "order"):
        if key not in meta:
            raise VolumeStoreError(f"{meta_path} missing required key {key!r}")
    if meta["byte_order"] != "little" or meta["order"] != "C":
        raise VolumeStoreError(
            f"unsupported layout {meta['byte_order']!r}/{meta['order']!r}"
        )
    return meta, data_path.read_bytes()


def _check_payload(meta: dict, payload: bytes, itemsize: int, path) -> tuple[int, ...]:
    shape = tuple(int(s) for s in meta["shape"])
    if len(shape) < 1 or any(s < 1 for s in shape):
        raise VolumeStoreError(f"bad shape {shape} in {path}")
    expected = int(np.prod(shape)) * itemsize
    if len(payload) != expected:
        raise VolumeStoreError(
            f"{path}: payload is {len(payload)} bytes, header implies {expected}"
        )
    return shape


def save_volume(v: Volume, path: str | Path) -> None:
    meta = {
        "shape": list(v.shape),
        "dtype": "f32",
        "spacing": list(v.spacing),
        "byte_order": "little",
        "order": "C",
    }
    _write_store(Path(path), meta, np.ascontiguousarray(v.data, dtype="<f4").tobytes())


def load_volume(path: str | Path) -> Volume:
    meta, payload = _read_store(Path(path))
    if meta["dtype"] != "f32":
        raise VolumeStoreError(f"{path}: expected dtype f32, got {meta['dtype']!r}")
    shape = _check_payload(meta, payload, 4, path)
    if len(shape) != 3:
        raise VolumeStoreError(f"{path}: volume store must be 3D, got {shape}")
    data = np.frombuffer(payload, dtype="<f4").reshape(shape)
    if not np.all(np.isfinite(data)):
        raise VolumeStoreError(f"{path}: payload contains non-finite values")
    return Volume(data.copy(), tuple(meta.get("spacing", (1.0, 1.0, 1.0))))


def save_seg(s: SegMap, path: str | Path) -> None:
    meta = {
        "shape": list(s.shape),
        "dtype": "u8",
        "spacing": list(s.spacing),
        "byte_order": "little",
        "order": "C",
        "label_count": s.label_count,
    }
    _write_store(Path(path), meta, np.ascontiguousarray(s.labels, dtype=np.uint8).tobytes())


def load_seg(path: str | Path) -> SegMap:
    meta, payload = _read_store(Path(path))
    if meta["dtype"] != "u8":
        raise VolumeStoreError(f"{path}: expected dtype u8, got {meta['dtype']!r}")
    if "label_count" not in meta:
        raise VolumeStoreError(f"{path}: segmentation store missing label_count")
    shape = _check_payload(meta, payload, 1, path)
    if len(shape) != 3:
        raise VolumeStoreError(f"{path}: segmentation store must be 3D, got {shape}")
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(shape)
    label_count = int(meta["label_count"])
    if int(labels.max()) > label_count:
        raise VolumeStoreError(
            f"{path}: label {int(labels.max())} exceeds label_count={label_count}"
        )
    return SegMap(labels.copy(), label_count, tuple(meta.get("spacing", (1.0, 1.0, 1.0))))


# --------------------------------------------------------------------------
# Dataset manifest
# --------------------------------------------------------------------------

@dataclass
class SubjectEntry:
    id: str
    volume_path: str
    seg_path: str
    split: str  # "train" | "val"


@dataclass
class DatasetManifest:
    subjects: list[SubjectEntry]
    root: Path = field(default_factory=Path)

    def __post_init__(self) -> None:
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate subject ids in manifest")
        for s in self.subjects:
            if s.split not in ("train", "val"):
                raise ValueError(f"subject {s.id}: bad split {s.split!r}")
        self.root = Path(self.root)

    def ids(self, split: str | None = None) -> list[str]:
        return [s.id for s in self.subjects if split is None or s.split == split]

    def entry(self, subject_id: str) -> SubjectEntry:
        for s in self.subjects:
            if s.id == subject_id:
                return s
        raise KeyError(f"unknown subject {subject_id!r}")

    def volume_dir(self, subject_id: str) -> Path:
        return self.root / self.entry(subject_id).volume_path

    def seg_dir(self, subject_id: str) -> Path:
        return self.root / self.entry(subject_id).seg_path

    def load_volume(self, subject_id: str) -> Volume:
        return load_volume(self.volume_dir(subject_id))

    def load_seg(self, subject_id: str) -> SegMap:
        return load_seg(self.seg_dir(subject_id))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        doc = {"subjects": [vars(s).copy() for s in self.subjects]}
        path.write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path: str | Path, check_files: bool = True) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text())
        subjects = [SubjectEntry(**s) for s in doc["subjects"]]
        manifest = cls(subjects, root=path.parent)
        if check_files:
            for s in subjects:
                for rel in (s.volume_path, s.seg_path):
                    if not (manifest.root / rel / _META_NAME).is_file():
                        raise FileNotFoundError(
                            f"manifest references missing store {manifest.root / rel}"
                        )
        return manifest
