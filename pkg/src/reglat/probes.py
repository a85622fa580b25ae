"""Interpretability probes: affine-perturbation response of the latent
projections, lambda sweeps with contour overlays, skip-connection
comparison, and PCA directly on deformation fields.

Slice/contour exports: 8-bit binary PGM images plus contour polygons as
JSON records ``{slice, axis, label, role, points: [[r, c], ...]}`` with role
"original" (rendered red downstream) or "deformed" (gold).
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from skimage import measure

from . import latent as latent_mod
from .latent import LatentPCA, project
from .losses import one_hot
from .regnet import RegistrationModel
from .volgrid import DatasetManifest, affine_about_center, apply_affine, axis_index, normalize_volume
from .warp import jacobian_determinant_map, warp_trilinear

logger = logging.getLogger(__name__)

PROBE_CSV_FIELDS = ["transform", "subject", "component", "abs_delta"]

# Perturbation defaults: 10-voxel z translation, 20 degree z rotation,
# scale perturbation 0.2 (applied as a 1.2x zoom about the center).
DEFAULT_TRANSLATION_VOX = 10.0
DEFAULT_ROTATION_DEG = 20.0
DEFAULT_SCALING = 0.2


@dataclass
class ProbeSpec:
    kind: str                     # "translation" | "rotation" | "scaling"
    axis: int = 0                 # ignored for scaling
    amount: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("translation", "rotation", "scaling"):
            raise ValueError(f"unknown probe transform {self.kind!r}")
        self.axis = axis_index(self.axis)

    @classmethod
    def parse(cls, text: str) -> "ProbeSpec":
        """Parse 'translation:z:10', 'rotation:z:20' or 'scaling:0.2'."""
        parts = text.split(":")
        kind = parts[0]
        if kind == "scaling":
            amount = float(parts[1]) if len(parts) > 1 else DEFAULT_SCALING
            return cls(kind, 0, amount)
        axis = parts[1] if len(parts) > 1 else "z"
        default = DEFAULT_TRANSLATION_VOX if kind == "translation" else DEFAULT_ROTATION_DEG
        amount = float(parts[2]) if len(parts) > 2 else default
        return cls(kind, axis_index(axis), amount)

    @property
    def label(self) -> str:
        if self.kind == "scaling":
            return f"scaling:{self.amount:g}"
        return f"{self.kind}:{'zyx'[self.axis]}:{self.amount:g}"

    def to_affine(self, shape) -> np.ndarray:
        if self.kind == "translation":
            t = [0.0, 0.0, 0.0]
            t[self.axis] = self.amount
            return affine_about_center(shape, tuple(t))
        if self.kind == "rotation":
            return affine_about_center(shape, rotation_axis=self.axis,
                                       rotation_deg=self.amount)
        return affine_about_center(shape, scale=1.0 + self.amount)


@dataclass
class ProbeResult:
    transform: str
    subject_ids: list[str]
    deltas: np.ndarray            # (n_subjects, K) absolute deltas

    @property
    def medians(self) -> np.ndarray:
        return np.median(self.deltas, axis=0)

    def quartiles(self) -> tuple[np.ndarray, np.ndarray]:
        return (np.percentile(self.deltas, 25, axis=0),
                np.percentile(self.deltas, 75, axis=0))

    @property
    def dominance_ratio(self) -> float:
        """Largest per-component median delta over the sum of all medians."""
        med = self.medians
        total = float(med.sum())
        return float(med.max() / total) if total > 0 else 0.0

    def activation_count(self, threshold: float = 0.1) -> int:
        """Components whose median delta exceeds ``threshold`` times the
        largest median."""
        med = self.medians
        if med.max() <= 0:
            return 0
        return int((med > threshold * med.max()).sum())

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(PROBE_CSV_FIELDS)
            for sid, row in zip(self.subject_ids, self.deltas):
                for j, delta in enumerate(row, start=1):
                    writer.writerow([self.transform, sid, j, repr(float(delta))])

    @classmethod
    def read_csv(cls, path: str | Path) -> "ProbeResult":
        rows: dict[str, dict[int, float]] = {}
        transform = ""
        with open(path, newline="") as fh:
            for rec in csv.DictReader(fh):
                transform = rec["transform"]
                rows.setdefault(rec["subject"], {})[int(rec["component"])] = \
                    float(rec["abs_delta"])
        ids = sorted(rows)
        k = max(max(d) for d in rows.values())
        deltas = np.array([[rows[s][j] for j in range(1, k + 1)] for s in ids])
        return cls(transform, ids, deltas)


def affine_perturbation_probe(model: RegistrationModel, basis: LatentPCA,
                              manifest: DatasetManifest, spec: ProbeSpec,
                              split: str = "val") -> ProbeResult:
    """Per-component projection change when a known transform is applied.

    Every subject X in the split is transformed to X'; the probe records
    |a_j(X) - a_j(X')| for each principal component j.
    """
    latent_mod._check_fingerprint(basis, model.fingerprint())
    ids = sorted(manifest.ids(split))
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    deltas = np.empty((len(ids), basis.k))
    for i, sid in enumerate(ids):
        v = normalize_volume(manifest.load_volume(sid))
        moved = apply_affine(v, spec.to_affine(v.shape))
        a0 = project(model.encode(v), basis)
        a1 = project(model.encode(moved), basis)
        deltas[i] = np.abs(a0 - a1)
    return ProbeResult(spec.label, ids, deltas)


# --------------------------------------------------------------------------
# Slice rendering, contours
# --------------------------------------------------------------------------

def take_slice(data: np.ndarray, axis: int, index: int) -> np.ndarray:
    axis = axis_index(axis)
    if not 0 <= index < data.shape[axis]:
        raise IndexError(f"slice index {index} out of range for axis {axis}")
    return np.take(data, index, axis=axis)


def write_pgm(path: str | Path, image: np.ndarray) -> bytes:
    """8-bit binary PGM from a 2D array scaled [0, 1] -> 0..255."""
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.rint(img * 255.0).astype(np.uint8)
    h, w = data.shape
    blob = f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()
    Path(path).write_bytes(blob)
    return blob


def render_pgm_bytes(image: np.ndarray) -> bytes:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    data = np.rint(img * 255.0).astype(np.uint8)
    h, w = data.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM")
    fields = blob.split(maxsplit=4)
    w, h = int(fields[1]), int(fields[2])
    return np.frombuffer(fields[4][:w * h], dtype=np.uint8).reshape(h, w)


def extract_contours(mask: np.ndarray, axis: int, index: int, label: int,
                     role: str) -> list[dict]:
    """Closed 0.5-level polygons of a binary slice mask (marching squares).

    The mask is padded by one background pixel so structures touching the
    border still yield closed loops.
    """
    padded = np.pad(mask.astype(np.float64), 1)
    polys = measure.find_contours(padded, 0.5)
    out = []
    for poly in polys:
        pts = (poly - 1.0).tolist()
        out.append({
            "slice": int(index),
            "axis": int(axis),
            "label": int(label),
            "role": role,
            "points": pts,
        })
    return out


def contours_for_labels(labels: np.ndarray, label_count: int, axis: int,
                        index: int, role: str) -> list[dict]:
    sl = take_slice(labels, axis, index)
    contours = []
    for lab in range(1, label_count + 1):
        contours.extend(extract_contours(sl == lab, axis, index, lab, role))
    return contours


def rasterize_contour(contour: dict, shape: tuple[int, int]) -> np.ndarray:
    """Polygon -> boolean mask; inverse check for the contour extraction."""
    from skimage.draw import polygon2mask
    return polygon2mask(shape, np.asarray(contour["points"]))


# --------------------------------------------------------------------------
# Lambda sweep
# --------------------------------------------------------------------------

def lambda_sweep(model: RegistrationModel, basis: LatentPCA,
                 manifest: DatasetManifest, subject_id: str, j: int,
                 lambdas, out_dir: str | Path) -> list[Path]:
    """Warp one subject through scaled versions of component j and export
    the three mid-plane slices per lambda, with original and deformed
    contours."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vol = normalize_volume(manifest.load_volume(subject_id))
    seg = manifest.load_seg(subject_id)
    n_classes = seg.label_count + 1

    written: list[Path] = []
    for lam in lambdas:
        grid = latent_mod.decode_component(basis, j, float(lam), model)
        warped = warp_trilinear(vol.data, grid)
        warped_oh = warp_trilinear(one_hot(seg.labels, n_classes).numpy(), grid)
        warped_labels = warped_oh.argmax(axis=0).astype(np.uint8)
        for axis in (0, 1, 2):
            index = vol.shape[axis] // 2
            stem = f"{subject_id}_c{j}_lam{lam:g}_axis{axis}"
            img_path = out / f"{stem}.pgm"
            write_pgm(img_path, take_slice(warped, axis, index))
            contours = (
                contours_for_labels(seg.labels, seg.label_count, axis, index, "original")
                + contours_for_labels(warped_labels, seg.label_count, axis, index, "deformed")
            )
            (out / f"{stem}.contours.json").write_text(json.dumps(contours))
            written.append(img_path)
    return written


# --------------------------------------------------------------------------
# Skip-connection comparison
# --------------------------------------------------------------------------

def skip_connection_comparison(model_noskip: RegistrationModel,
                               model_skip: RegistrationModel,
                               basis_noskip: LatentPCA,
                               basis_skip: LatentPCA,
                               manifest: DatasetManifest,
                               spec: ProbeSpec,
                               out_csv: str | Path | None = None,
                               split: str = "val") -> dict[str, ProbeResult]:
    """Run the same perturbation probe through both variants and report how
    many components each one activates."""
    results = {
        "noskip": affine_perturbation_probe(model_noskip, basis_noskip, manifest,
                                            spec, split),
        "skip": affine_perturbation_probe(model_skip, basis_skip, manifest,
                                          spec, split),
    }
    for name, res in results.items():
        logger.info("%s variant: activation count %d / %d components "
                    "(dominance ratio %.3f)",
                    name, res.activation_count(), res.deltas.shape[1],
                    res.dominance_ratio)
    if out_csv is not None:
        with open(out_csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "component", "median", "q1", "q3"])
            for name, res in results.items():
                q1, q3 = res.quartiles()
                for jj in range(res.deltas.shape[1]):
                    writer.writerow([name, jj + 1, repr(float(res.medians[jj])),
                                     repr(float(q1[jj])), repr(float(q3[jj]))])
    return results


# --------------------------------------------------------------------------
# PCA directly on deformation fields
# --------------------------------------------------------------------------

def pca_on_fields(model: RegistrationModel, manifest: DatasetManifest, k: int,
                  split: str = "train", center: bool = False) -> LatentPCA:
    """Ablation: decompose flattened forward increment fields instead of
    latents. Every subject is registered against a fixed reference (the
    first validation subject, falling back to the first subject overall)."""
    val_ids = manifest.ids("val")
    ref_id = val_ids[0] if val_ids else manifest.ids()[0]
    ref = normalize_volume(manifest.load_volume(ref_id))
    ref_t = torch.from_numpy(ref.data)[None, None]

    ids = manifest.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    rows = None
    with torch.no_grad():
        for i, sid in enumerate(ids):
            v = normalize_volume(manifest.load_volume(sid))
            raw = model.network(torch.from_numpy(v.data)[None, None], ref_t)
            flat = raw["fwd_grad"][0].numpy().astype(np.float32).reshape(-1)
            if rows is None:
                rows = np.empty((len(ids), flat.size), dtype=np.float32)
            rows[i] = flat
    basis = LatentPCA(n_components=k, center=center).fit(rows)
    basis.model_fingerprint_ = model.fingerprint()
    return basis


def field_component_slices(basis: LatentPCA, shape, out_dir: str | Path) -> list[Path]:
    """Export mid-slice magnitude images of each field component for visual
    comparison against the latent-space components."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    d, h, w = shape
    written = []
    for jj in range(basis.k):
        comp = basis.components_[jj].reshape(3, d, h, w)
        mag = np.sqrt((comp**2).sum(axis=0))
        mag = mag / mag.max() if mag.max() > 0 else mag
        p = out / f"field_component_{jj + 1}_axis0.pgm"
        write_pgm(p, mag[d // 2])
        written.append(p)
    return written


def jacobian_stats(grid: np.ndarray) -> dict:
    det = jacobian_determinant_map(grid)
    interior = det[1:-1, 1:-1, 1:-1]
    return {
        "min_det": float(interior.min()),
        "fold_fraction": float((interior <= 0).mean()),
    }
