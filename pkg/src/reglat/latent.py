"""PCA decomposition of the encoder latent space.

:class:`LatentPCA` is a scikit-learn style transformer (``fit`` /
``transform`` / ``inverse_transform`` / ``get_params``), so the decomposition
composes with the wider estimator ecosystem. Two centering modes exist:
``center=False`` projects raw latents directly onto the singular vectors of
the data matrix (the mode used for decoding scaled components), and
``center=True`` is conventional mean-centered PCA. The mode is recorded in
the basis file.

Component indices in user-facing artifacts (files, CLI, probe CSV) are
1-based; array indexing inside this module is 0-based.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .regnet import FingerprintMismatchError, LatentCode, RegistrationModel
from .rawio import read_container, write_container
from .volgrid import DatasetManifest, normalize_volume
from .warp import integrate_spatial_gradients


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """Deterministic sign convention: the largest-magnitude entry of each
    component is positive. PCA signs are otherwise arbitrary and would break
    golden files."""
    out = components.copy()
    for i, u in enumerate(out):
        j = int(np.argmax(np.abs(u)))
        if u[j] < 0:
            out[i] = -u
    return out


class LatentPCA(BaseEstimator, TransformerMixin):
    """Principal decomposition of flattened latent rows.

    Parameters
    ----------
    n_components : number of principal vectors to keep.
    center : subtract the row mean before the SVD. When off, projection and
        reconstruction use the raw rows, matching the decode path where a
        scaled component is fed to the decoder without any mean offset.
    """

    def __init__(self, n_components: int = 32, center: bool = False):
        self.n_components = n_components
        self.center = center

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        n, dim = X.shape
        limit = min(n - (1 if self.center else 0), dim)
        if not 1 <= self.n_components <= limit:
            raise ValueError(
                f"n_components={self.n_components} out of range [1, {limit}] "
                f"for a {n}x{dim} matrix (center={self.center})"
            )
        self.mean_ = X.mean(axis=0) if self.center else np.zeros(dim)
        _, s, vt = np.linalg.svd(X - self.mean_, full_matrices=False)
        k = self.n_components
        self.components_ = _fix_signs(vt[:k])
        self.singular_values_ = s[:k].copy()
        total = float((s**2).sum())
        self.explained_variance_ratio_ = (s[:k] ** 2) / total if total > 0 else s[:k] * 0.0
        self.n_features_in_ = dim
        self.n_samples_fit_ = n
        self.model_fingerprint_ = None
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "components_")
        X = check_array(X, dtype=np.float64)
        return (X - self.mean_) @ self.components_.T

    def inverse_transform(self, A) -> np.ndarray:
        check_is_fitted(self, "components_")
        A = np.asarray(A, dtype=np.float64)
        return self.mean_ + A @ self.components_

    @property
    def k(self) -> int:
        check_is_fitted(self, "components_")
        return self.components_.shape[0]


# --------------------------------------------------------------------------
# Latent matrix collection
# --------------------------------------------------------------------------

@dataclass
class LatentMatrix:
    rows: np.ndarray              # (n, N) float32
    subject_ids: list[str]
    model_fingerprint: str

    def save(self, path: str | Path) -> None:
        header = {
            "kind": "latent_matrix",
            "subject_ids": self.subject_ids,
            "n": int(self.rows.shape[0]),
            "dim": int(self.rows.shape[1]),
            "model_fingerprint": self.model_fingerprint,
        }
        write_container(path, header, np.ascontiguousarray(self.rows, "<f4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "LatentMatrix":
        header, payload = read_container(path)
        if header.get("kind") != "latent_matrix":
            raise ValueError(f"{path}: not a latent matrix file")
        rows = np.frombuffer(payload, dtype="<f4").reshape(header["n"], header["dim"])
        return cls(rows.copy(), list(header["subject_ids"]), header["model_fingerprint"])


def collect_latents(model: RegistrationModel, manifest: DatasetManifest,
                    split: str = "train") -> LatentMatrix:
    """Encode every subject of the split once; one flattened row each."""
    ids = manifest.ids(split)
    if not ids:
        raise ValueError(f"split {split!r} is empty")
    fingerprint = model.fingerprint()
    rows = np.empty((len(ids), model.arch.latent_dim), dtype=np.float32)
    for i, sid in enumerate(ids):
        v = normalize_volume(manifest.load_volume(sid))
        rows[i] = model.encode(v).flat.numpy()
    return LatentMatrix(rows, ids, fingerprint)


def fit_pca(matrix: LatentMatrix, k: int, center: bool = False) -> LatentPCA:
    basis = LatentPCA(n_components=k, center=center).fit(matrix.rows)
    basis.model_fingerprint_ = matrix.model_fingerprint
    return basis


def _check_fingerprint(basis: LatentPCA, fingerprint: str | None) -> None:
    if basis.model_fingerprint_ is None or fingerprint is None:
        return
    if basis.model_fingerprint_ != fingerprint:
        raise FingerprintMismatchError(
            "PCA basis was fit on latents from a different model "
            f"({basis.model_fingerprint_[:12]} != {fingerprint[:12]})"
        )


def project(z: LatentCode, basis: LatentPCA) -> np.ndarray:
    """Coefficients of one latent on the basis, shape (K,)."""
    _check_fingerprint(basis, z.fingerprint)
    return basis.transform(z.flat.numpy()[None])[0]


def reconstruct(a: np.ndarray, basis: LatentPCA) -> np.ndarray:
    """Coefficients (K,) -> flat latent approximation (N,)."""
    return basis.inverse_transform(np.asarray(a)[None])[0]


def decode_component(basis: LatentPCA, j: int, lam: float,
                     model: RegistrationModel) -> np.ndarray:
    """Deformation grid of the j-th principal vector (1-based) scaled by lam.

    The scaled vector is decoded directly, no mean offset, then integrated to
    a sampling grid; returns (3, D, H, W).
    """
    _check_fingerprint(basis, model.fingerprint())
    if not 1 <= j <= basis.k:
        raise ValueError(f"component index {j} out of range [1, {basis.k}]")
    vec = (lam * basis.components_[j - 1]).astype(np.float32)
    inc = model.decode(vec)
    return integrate_spatial_gradients(inc)


def compose_latent(basis: LatentPCA, coefficients: np.ndarray) -> np.ndarray:
    """Linear combination sum_j a_j u_j as a float32 flat latent (no mean)."""
    a = np.asarray(coefficients, dtype=np.float64)
    if a.shape != (basis.k,):
        raise ValueError(f"expected {basis.k} coefficients, got {a.shape}")
    return (a @ basis.components_).astype(np.float32)


# --------------------------------------------------------------------------
# Basis and coefficient files
# --------------------------------------------------------------------------

def save_basis(basis: LatentPCA, out_dir: str | Path, space: str = "latent") -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    k, dim = basis.components_.shape
    doc = {
        "K": int(k),
        "N": int(dim),
        "evr": [float(x) for x in basis.explained_variance_ratio_],
        "singular_values": [float(x) for x in basis.singular_values_],
        "center": bool(basis.center),
        "sign_convention": "max-abs-positive",
        "model_fingerprint": basis.model_fingerprint_,
        "space": space,
    }
    (out / "basis.json").write_text(json.dumps(doc, indent=1))
    (out / "components.raw").write_bytes(
        np.ascontiguousarray(basis.components_, "<f4").tobytes())
    (out / "mean.raw").write_bytes(np.ascontiguousarray(basis.mean_, "<f4").tobytes())


def load_basis(in_dir: str | Path) -> LatentPCA:
    src = Path(in_dir)
    doc = json.loads((src / "basis.json").read_text())
    k, dim = int(doc["K"]), int(doc["N"])
    components = np.frombuffer((src / "components.raw").read_bytes(), "<f4")
    if components.size != k * dim:
        raise ValueError(f"{src}: components.raw size does not match basis.json")
    mean = np.frombuffer((src / "mean.raw").read_bytes(), "<f4")
    if mean.size != dim:
        raise ValueError(f"{src}: mean.raw size does not match basis.json")

    basis = LatentPCA(n_components=k, center=bool(doc["center"]))
    basis.components_ = components.reshape(k, dim).astype(np.float64)
    basis.mean_ = mean.astype(np.float64)
    basis.singular_values_ = np.asarray(doc["singular_values"], dtype=np.float64)
    basis.explained_variance_ratio_ = np.asarray(doc["evr"], dtype=np.float64)
    basis.n_features_in_ = dim
    basis.model_fingerprint_ = doc.get("model_fingerprint")
    return basis


def write_coefficients(path: str | Path, subject_ids: list[str],
                       coeffs: np.ndarray) -> None:
    k = coeffs.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject"] + [f"a{j}" for j in range(1, k + 1)])
        for sid, row in zip(subject_ids, coeffs):
            writer.writerow([sid] + [repr(float(x)) for x in row])
