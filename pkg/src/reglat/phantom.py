"""Synthetic 3D dataset generator.

Subjects are a shared structure template pushed through a per-subject random
affine (within configured jitter ranges) composed with a smooth random warp,
plus additive intensity noise. The affine and warp seed of every subject are
recorded in ``truth.json`` so tests and probes can check against ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volgrid import (
    DatasetManifest,
    SegMap,
    SubjectEntry,
    Volume,
    affine_about_center,
    save_seg,
    save_volume,
)

NOISE_SIGMA = 0.02
WARP_CONTROL_POINTS = 4


class PhantomBoundsError(ValueError):
    """A structure can leave the volume under the configured jitter."""


@dataclass
class Structure:
    kind: str  # "ellipsoid" | "box"
    center: tuple[float, float, float]
    radii: tuple[float, float, float]
    intensity: float
    label: int


@dataclass
class JitterSpec:
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)  # max |t| per axis
    rotation_deg: float = 0.0
    scale_range: tuple[float, float] = (1.0, 1.0)


def default_structures(size: int) -> list[Structure]:
    c = (size - 1) / 2.0
    r = size / 4.0
    return [
        Structure("ellipsoid", (c, c, c), (1.05 * r, 0.85 * r, 0.95 * r), 0.9, 1),
        Structure("ellipsoid", (c, c, c), (0.45 * r, 0.4 * r, 0.35 * r), 0.45, 2),
    ]


@dataclass
class PhantomSpec:
    size: int = 32
    n_subjects: int = 40
    structures: list[Structure] = field(default_factory=list)
    jitter: JitterSpec = field(default_factory=JitterSpec)
    smooth_warp_amplitude: float = 0.0
    seed: int = 0
    val_fraction: float = 0.25

    def __post_init__(self) -> None:
        if not self.structures:
            self.structures = default_structures(self.size)

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.size, self.size, self.size)


def _check_bounds(spec: PhantomSpec) -> None:
    center = np.full(3, (spec.size - 1) / 2.0)
    s_hi = max(spec.jitter.scale_range)
    half = (spec.size - 1) / 2.0
    for st in spec.structures:
        # rotation can point the longest semi-axis anywhere, so bound the
        # structure by a ball about its (possibly off-center) position
        ball = np.linalg.norm(np.asarray(st.center) - center) + max(st.radii)
        for ax in range(3):
            worst = (ball * s_hi + abs(spec.jitter.translation[ax])
                     + spec.smooth_warp_amplitude)
            if worst > half - 0.5:
                raise PhantomBoundsError(
                    f"structure label={st.label} may escape bounds along axis "
                    f"{ax} (reach {worst:.1f} vs half-size {half:.1f})"
                )


def render_template(spec: PhantomSpec) -> tuple[Volume, SegMap]:
    """Rasterize the structure list into a template volume and label map."""
    shape = spec.shape
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape],
                                indexing="ij"))
    vol = np.zeros(shape, dtype=np.float64)
    seg = np.zeros(shape, dtype=np.uint8)
    for st in spec.structures:
        delta = grid - np.asarray(st.center).reshape(3, 1, 1, 1)
        radii = np.asarray(st.radii).reshape(3, 1, 1, 1)
        if st.kind == "ellipsoid":
            mask = ((delta / radii) ** 2).sum(axis=0) <= 1.0
        elif st.kind == "box":
            mask = (np.abs(delta) <= radii).all(axis=0)
        else:
            raise ValueError(f"unknown structure kind {st.kind!r}")
        vol[mask] = st.intensity
        seg[mask] = st.label
    label_count = max(st.label for st in spec.structures)
    return Volume(vol.astype(np.float32)), SegMap(seg, label_count)


def _smooth_warp(shape, amplitude: float, seed: int) -> np.ndarray:
    """Random smooth displacement (3, D, H, W): low-res control vectors
    upsampled trilinearly, amplitude in voxels."""
    if amplitude == 0.0:
        return np.zeros((3,) + tuple(shape))
    rng = np.random.default_rng(seed)
    cp = rng.normal(0.0, amplitude, size=(3,) + (WARP_CONTROL_POINTS,) * 3)
    coords = np.meshgrid(
        *[np.linspace(0, WARP_CONTROL_POINTS - 1, s) for s in shape], indexing="ij"
    )
    coords = np.stack(coords)
    return np.stack([
        ndimage.map_coordinates(cp[c], coords, order=1, mode="nearest")
        for c in range(3)
    ])


def _draw_affine(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    j = spec.jitter
    t = [rng.uniform(-m, m) if m > 0 else 0.0 for m in j.translation]
    rot_axis = None
    rot_deg = 0.0
    if j.rotation_deg > 0:
        rot_axis = int(rng.integers(0, 3))
        rot_deg = float(rng.uniform(-j.rotation_deg, j.rotation_deg))
    lo, hi = j.scale_range
    scale = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return affine_about_center(spec.shape, tuple(t), rot_axis, rot_deg, scale)


def _resample(template: np.ndarray, a: np.ndarray, disp: np.ndarray,
              order: int) -> np.ndarray:
    """Sample ``template`` at ``A^-1 x + disp(x)`` for every output voxel x."""
    shape = template.shape
    inv = np.linalg.inv(a)
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape],
                                indexing="ij"))
    flat = grid.reshape(3, -1)
    src = inv[:3, :3] @ flat + inv[:3, 3:4]
    src = src.reshape(3, *shape) + disp
    return ndimage.map_coordinates(template.astype(np.float64), src,
                                   order=order, mode="nearest")


def generate_phantom_dataset(spec: PhantomSpec, out_dir: str | Path) -> DatasetManifest:
    """Write ``n_subjects`` volume/seg pairs plus manifest and truth sidecar.

    Deterministic for a given seed: subject randomness comes from spawned
    child seeds, so generation order (or parallelism) cannot change content.
    """
    _check_bounds(spec)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    template_vol, template_seg = render_template(spec)
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_subjects)

    n_val = int(round(spec.n_subjects * spec.val_fraction))
    entries: list[SubjectEntry] = []
    truth: dict[str, dict] = {}
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        sid = f"s{i:03d}"
        a = _draw_affine(spec, rng)
        warp_seed = int(rng.integers(0, 2**31 - 1))
        disp = _smooth_warp(spec.shape, spec.smooth_warp_amplitude, warp_seed)

        vol = _resample(template_vol.data, a, disp, order=1)
        vol = vol + rng.normal(0.0, NOISE_SIGMA, size=vol.shape)
        seg = _resample(template_seg.labels, a, disp, order=0)

        split = "val" if i >= spec.n_subjects - n_val else "train"
        save_volume(Volume(vol.astype(np.float32)), out / sid / "vol")
        save_seg(SegMap(np.rint(seg).astype(np.uint8), template_seg.label_count),
                 out / sid / "seg")
        entries.append(SubjectEntry(sid, f"{sid}/vol", f"{sid}/seg", split))
        truth[sid] = {"affine": a.tolist(), "warp_seed": warp_seed}

    manifest = DatasetManifest(entries, root=out)
    manifest.save(out / "manifest.json")
    (out / "truth.json").write_text(json.dumps(truth, indent=1))
    return manifest
