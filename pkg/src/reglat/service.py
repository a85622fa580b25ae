"""Read-only HTTP API for the latent explorer.

Serves dataset slices, composed deformations and precomputed probe
summaries for one (checkpoint, basis, manifest) triple. All handlers are
stateless; model and basis are loaded once and never mutated.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from . import latent as latent_mod
from .latent import LatentPCA, load_basis
from .losses import one_hot
from .probes import ProbeResult, contours_for_labels, render_pgm_bytes, take_slice
from .regnet import FingerprintMismatchError, RegistrationModel, load_model
from .volgrid import DatasetManifest, SegMap, Volume, normalize_volume
from .warp import integrate_spatial_gradients, jacobian_determinant_map, warp_trilinear

API_VERSION = 1


@dataclass
class ServiceAssets:
    model: RegistrationModel
    basis: LatentPCA
    manifest: DatasetManifest
    probe_dir: Path
    _volumes: dict = field(default_factory=dict)
    _segs: dict = field(default_factory=dict)

    @classmethod
    def load(cls, checkpoint: str, basis_dir: str, manifest_path: str,
             probe_dir: str) -> "ServiceAssets":
        model = load_model(checkpoint)
        basis = load_basis(basis_dir)
        if basis.model_fingerprint_ and basis.model_fingerprint_ != model.fingerprint():
            raise FingerprintMismatchError(
                f"basis {basis_dir} does not belong to checkpoint {checkpoint}")
        manifest = DatasetManifest.load(manifest_path)
        return cls(model, basis, manifest, Path(probe_dir))

    def volume(self, subject_id: str) -> Volume:
        if subject_id not in self._volumes:
            self._volumes[subject_id] = normalize_volume(
                self.manifest.load_volume(subject_id))
        return self._volumes[subject_id]

    def seg(self, subject_id: str) -> SegMap:
        if subject_id not in self._segs:
            self._segs[subject_id] = self.manifest.load_seg(subject_id)
        return self._segs[subject_id]


class DeformRequest(BaseModel):
    subject_id: str
    coefficients: list[float]
    axis: int = 0
    slice_index: int = 0


def _b64(blob: bytes) -> str:
    return base64.b64encode(blob).decode("ascii")


def create_app(assets: ServiceAssets | None = None,
               frontend_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="reglat explorer API")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    def ready() -> ServiceAssets:
        if assets is None:
            raise HTTPException(status_code=503, detail="service not initialized")
        return assets

    def check_subject(a: ServiceAssets, subject_id: str) -> None:
        if subject_id not in a.manifest.ids():
            raise HTTPException(status_code=404, detail=f"unknown subject {subject_id}")

    def check_slice(a: ServiceAssets, axis: int, index: int) -> None:
        if axis not in (0, 1, 2):
            raise HTTPException(status_code=422, detail="axis must be 0, 1 or 2")
        shape = a.model.arch.in_shape
        if not 0 <= index < shape[axis]:
            raise HTTPException(
                status_code=422,
                detail=f"slice index {index} out of range [0, {shape[axis]})")

    @app.get("/api/meta")
    def meta():
        a = ready()
        return {
            "api_version": API_VERSION,
            "K": a.basis.k,
            "evr": [float(x) for x in a.basis.explained_variance_ratio_],
            "subjects": a.manifest.ids(),
            "shape": list(a.model.arch.in_shape),
            "center_mode": bool(a.basis.center),
            "model_fingerprint": a.model.fingerprint(),
            "basis_fingerprint": a.basis.model_fingerprint_,
        }

    @app.get("/api/subject/{subject_id}/slice")
    def subject_slice(subject_id: str, axis: int = 0, index: int = 0):
        a = ready()
        check_subject(a, subject_id)
        check_slice(a, axis, index)
        vol = a.volume(subject_id)
        seg = a.seg(subject_id)
        image = render_pgm_bytes(take_slice(vol.data, axis, index))
        contours = contours_for_labels(seg.labels, seg.label_count, axis, index,
                                       "original")
        return {
            "api_version": API_VERSION,
            "subject_id": subject_id,
            "axis": axis,
            "index": index,
            "image_pgm": _b64(image),
            "contours": contours,
        }

    @app.post("/api/deform")
    def deform(req: DeformRequest):
        a = ready()
        check_subject(a, req.subject_id)
        check_slice(a, req.axis, req.slice_index)
        if len(req.coefficients) != a.basis.k:
            raise HTTPException(
                status_code=422,
                detail=f"expected {a.basis.k} coefficients, got {len(req.coefficients)}")

        vec = latent_mod.compose_latent(a.basis, np.asarray(req.coefficients))
        inc = a.model.decode(vec)
        grid = integrate_spatial_gradients(inc)

        vol = a.volume(req.subject_id)
        seg = a.seg(req.subject_id)
        n_classes = seg.label_count + 1
        warped = warp_trilinear(vol.data, grid)
        warped_oh = warp_trilinear(one_hot(seg.labels, n_classes).numpy(), grid)
        warped_labels = warped_oh.argmax(axis=0).astype(np.uint8)

        det = jacobian_determinant_map(grid)
        interior = det[1:-1, 1:-1, 1:-1]
        image = render_pgm_bytes(take_slice(warped, req.axis, req.slice_index))
        return {
            "api_version": API_VERSION,
            "subject_id": req.subject_id,
            "axis": req.axis,
            "index": req.slice_index,
            "image_pgm": _b64(image),
            "contours_original": contours_for_labels(
                seg.labels, seg.label_count, req.axis, req.slice_index, "original"),
            "contours_deformed": contours_for_labels(
                warped_labels, seg.label_count, req.axis, req.slice_index, "deformed"),
            "jacobian_stats": {
                "min_det": float(interior.min()),
                "fold_fraction": float((interior <= 0).mean()),
            },
        }

    @app.get("/api/probe/{transform}")
    def probe(transform: str):
        a = ready()
        path = a.probe_dir / f"probe_{transform}.csv"
        if not path.is_file():
            raise HTTPException(status_code=404,
                                detail=f"no probe results for {transform!r}")
        result = ProbeResult.read_csv(path)
        q1, q3 = result.quartiles()
        med = result.medians
        return {
            "api_version": API_VERSION,
            "transform": result.transform,
            "components": [
                {"component": j + 1, "median": float(med[j]),
                 "q1": float(q1[j]), "q3": float(q3[j])}
                for j in range(len(med))
            ],
            "dominance_ratio": result.dominance_ratio,
        }

    if frontend_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=frontend_dir, html=True),
                  name="explorer")

    return app
