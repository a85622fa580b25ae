"""Command line entry point: one subcommand per pipeline stage.

Configuration precedence is CLI flag > --config JSON > built-in default; the
resolved settings are printed at startup. Exit codes: 0 success, 1 runtime
failure, 2 usage error, 3 missing file, 4 model/basis fingerprint mismatch.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_FINGERPRINT = 4


def _runs_root() -> Path:
    return Path(os.environ.get("REGLAT_RUNS", "runs"))


def _resolve(args: argparse.Namespace, defaults: dict) -> dict:
    """Merge CLI > config file > defaults for the keys in ``defaults``."""
    config = {}
    if getattr(args, "config", None):
        config = json.loads(Path(args.config).read_text())
    out = {}
    for key, default in defaults.items():
        cli = getattr(args, key, None)
        if cli is not None:
            out[key] = cli
        elif key in config:
            out[key] = config[key]
        else:
            out[key] = default
    print("resolved config:", json.dumps(out, sort_keys=True, default=str))
    return out


def _prepare_out(path: Path, force: bool) -> Path:
    if path.exists() and any(path.iterdir()) and not force:
        raise RuntimeError(f"output {path} exists; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_model(path: str):
    from .regnet import load_model
    return load_model(path)


def _load_manifest(path: str):
    from .volgrid import DatasetManifest
    return DatasetManifest.load(path)


def _load_basis_checked(basis_dir: str, model):
    from .latent import load_basis
    from .regnet import FingerprintMismatchError
    basis = load_basis(basis_dir)
    if basis.model_fingerprint_ and basis.model_fingerprint_ != model.fingerprint():
        raise FingerprintMismatchError(
            f"basis {basis_dir} does not belong to this checkpoint")
    return basis


# -- commands ---------------------------------------------------------------

def cmd_phantom(args) -> int:
    from .phantom import JitterSpec, PhantomSpec, generate_phantom_dataset
    cfg = _resolve(args, {
        "out": str(_runs_root() / "phantom"),
        "size": 32, "subjects": 40, "seed": 0, "val_fraction": 0.25,
        "translation": 6.0, "translation_axes": "z",
        "rotation_deg": 0.0, "scale_lo": 1.0, "scale_hi": 1.0,
        "warp_amplitude": 0.0,
    })
    out = _prepare_out(Path(cfg["out"]), args.force)
    trans = [0.0, 0.0, 0.0]
    from .volgrid import axis_index
    for name in str(cfg["translation_axes"]):
        trans[axis_index(name)] = float(cfg["translation"])
    spec = PhantomSpec(
        size=int(cfg["size"]), n_subjects=int(cfg["subjects"]),
        seed=int(cfg["seed"]), val_fraction=float(cfg["val_fraction"]),
        jitter=JitterSpec(tuple(trans), float(cfg["rotation_deg"]),
                          (float(cfg["scale_lo"]), float(cfg["scale_hi"]))),
        smooth_warp_amplitude=float(cfg["warp_amplitude"]),
    )
    manifest = generate_phantom_dataset(spec, out)
    print(f"wrote {len(manifest.subjects)} subjects under {out}")
    return 0


def cmd_train(args) -> int:
    from .losses import LossWeights
    from .regnet import ArchConfig
    from .trainer import AugmentConfig, TrainConfig, train
    cfg = _resolve(args, {
        "data": None, "out": str(_runs_root() / "train"),
        "epochs": 50, "batch_size": 4, "lr": 1e-4, "seed": 0,
        "alpha": 0.1, "beta": 1.0, "ncc_window": 0,
        "base_channels": 8, "downsamplings": 3, "skips": False,
        "augment": True, "eval_every": 0, "threads": 0,
    })
    if not cfg["data"]:
        raise RuntimeError("--data manifest path is required")
    manifest = _load_manifest(cfg["data"])
    out = _prepare_out(Path(cfg["out"]), args.force)
    shape = manifest.load_volume(manifest.ids()[0]).shape
    arch = ArchConfig(in_shape=shape, base_channels=int(cfg["base_channels"]),
                      n_downsamplings=int(cfg["downsamplings"]),
                      skip_connections=bool(cfg["skips"]))
    augment = AugmentConfig() if cfg["augment"] else AugmentConfig.none()
    tc = TrainConfig(
        lr=float(cfg["lr"]), batch_size=int(cfg["batch_size"]),
        epochs=int(cfg["epochs"]), seed=int(cfg["seed"]),
        weights=LossWeights(alpha=float(cfg["alpha"]), beta=float(cfg["beta"]),
                            ncc_window=int(cfg["ncc_window"])),
        augment=augment, eval_every=int(cfg["eval_every"]),
        num_threads=int(cfg["threads"]) or None,
    )
    final = train(manifest, tc, arch, out)
    print(f"final checkpoint: {final}")
    return 0


def cmd_eval(args) -> int:
    from .trainer import evaluate
    cfg = _resolve(args, {"checkpoint": None, "data": None, "split": "val",
                          "out": None, "seed": 0})
    model = _load_model(cfg["checkpoint"])
    manifest = _load_manifest(cfg["data"])
    report = evaluate(model, manifest, split=cfg["split"])
    out = Path(cfg["out"]) if cfg["out"] else Path(cfg["checkpoint"]).parent / "eval.json"
    report.save(out)
    print(f"dice before {report.before_mean:.4f} +/- {report.before_std:.4f}; "
          f"after {report.after_mean:.4f} +/- {report.after_std:.4f}; "
          f"fold fraction {report.fold_fraction_mean:.5f}")
    print(f"wrote {out}")
    return 0


def cmd_latents(args) -> int:
    from .latent import collect_latents
    cfg = _resolve(args, {"checkpoint": None, "data": None, "split": "train",
                          "out": None, "seed": 0})
    model = _load_model(cfg["checkpoint"])
    manifest = _load_manifest(cfg["data"])
    matrix = collect_latents(model, manifest, split=cfg["split"])
    out = Path(cfg["out"]) if cfg["out"] else Path(cfg["checkpoint"]).parent / "latents.bin"
    matrix.save(out)
    print(f"collected {matrix.rows.shape[0]} latents of dim {matrix.rows.shape[1]} -> {out}")
    return 0


def cmd_pca(args) -> int:
    from .latent import LatentMatrix, fit_pca, save_basis
    cfg = _resolve(args, {"latents": None, "out": None, "k": 32,
                          "center": False, "seed": 0})
    matrix = LatentMatrix.load(cfg["latents"])
    basis = fit_pca(matrix, k=int(cfg["k"]), center=bool(cfg["center"]))
    out = Path(cfg["out"]) if cfg["out"] else Path(cfg["latents"]).parent / "basis"
    save_basis(basis, out)
    cumulative = np.cumsum(basis.explained_variance_ratio_)
    print("cumulative explained variance:",
          " ".join(f"{v:.4f}" for v in cumulative))
    print(f"wrote basis (K={basis.k}) -> {out}")
    return 0


def cmd_component(args) -> int:
    from .latent import decode_component
    cfg = _resolve(args, {"checkpoint": None, "basis": None, "j": 1,
                          "lam": 100.0, "out": None, "seed": 0})
    model = _load_model(cfg["checkpoint"])
    basis = _load_basis_checked(cfg["basis"], model)
    grid = decode_component(basis, int(cfg["j"]), float(cfg["lam"]), model)
    out = Path(cfg["out"]) if cfg["out"] else Path(cfg["checkpoint"]).parent / "component"
    # grid store reuses the volume container with a (3, D, H, W) payload
    from .volgrid import _write_store
    meta = {"shape": list(grid.shape), "dtype": "f32",
            "spacing": [1.0, 1.0, 1.0], "byte_order": "little", "order": "C"}
    _write_store(Path(out), meta, np.ascontiguousarray(grid, "<f4").tobytes())
    print(f"wrote deformation grid for component {cfg['j']} at lambda {cfg['lam']} -> {out}")
    return 0


def cmd_sweep(args) -> int:
    from .probes import lambda_sweep
    cfg = _resolve(args, {"checkpoint": None, "basis": None, "data": None,
                          "subject": None, "j": 1,
                          "lambdas": "-200,-100,0,100,200", "out": None,
                          "seed": 0})
    model = _load_model(cfg["checkpoint"])
    basis = _load_basis_checked(cfg["basis"], model)
    manifest = _load_manifest(cfg["data"])
    subject = cfg["subject"] or manifest.ids("val")[0]
    lambdas = [float(x) for x in str(cfg["lambdas"]).split(",")]
    out = Path(cfg["out"]) if cfg["out"] else Path(cfg["checkpoint"]).parent / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    files = lambda_sweep(model, basis, manifest, subject, int(cfg["j"]), lambdas, out)
    print(f"wrote {len(files)} slice images -> {out}")
    return 0


def cmd_probe(args) -> int:
    from .probes import ProbeSpec, affine_perturbation_probe
    cfg = _resolve(args, {"checkpoint": None, "basis": None, "data": None,
                          "transform": "translation:z:10", "split": "val",
                          "out": None, "seed": 0})
    model = _load_model(cfg["checkpoint"])
    basis = _load_basis_checked(cfg["basis"], model)
    manifest = _load_manifest(cfg["data"])
    spec = ProbeSpec.parse(cfg["transform"])
    result = affine_perturbation_probe(model, basis, manifest, spec,
                                       split=cfg["split"])
    out = Path(cfg["out"]) if cfg["out"] else (
        Path(cfg["checkpoint"]).parent / f"probe_{spec.kind}.csv")
    result.write_csv(out)
    print(f"dominance ratio {result.dominance_ratio:.4f}; "
          f"activated components {result.activation_count()}/{basis.k}")
    print(f"wrote {out}")
    return 0


def cmd_fieldpca(args) -> int:
    from .latent import save_basis
    from .probes import field_component_slices, pca_on_fields
    cfg = _resolve(args, {"checkpoint": None, "data": None, "k": 8,
                          "split": "train", "out": None, "seed": 0})
    model = _load_model(cfg["checkpoint"])
    manifest = _load_manifest(cfg["data"])
    basis = pca_on_fields(model, manifest, k=int(cfg["k"]), split=cfg["split"])
    out = Path(cfg["out"]) if cfg["out"] else Path(cfg["checkpoint"]).parent / "fieldpca"
    save_basis(basis, out, space="field")
    shape = model.arch.in_shape
    field_component_slices(basis, shape, out)
    cumulative = np.cumsum(basis.explained_variance_ratio_)
    print("cumulative explained variance:",
          " ".join(f"{v:.4f}" for v in cumulative))
    print(f"wrote field basis -> {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn
    from .service import ServiceAssets, create_app
    cfg = _resolve(args, {"checkpoint": None, "basis": None, "data": None,
                          "probe_dir": None, "port": 8080, "frontend": None,
                          "seed": 0})
    assets = ServiceAssets.load(
        checkpoint=cfg["checkpoint"], basis_dir=cfg["basis"],
        manifest_path=cfg["data"],
        probe_dir=cfg["probe_dir"] or str(Path(cfg["checkpoint"]).parent),
    )
    app = create_app(assets, frontend_dir=cfg["frontend"])
    uvicorn.run(app, host="127.0.0.1", port=int(cfg["port"]))
    return 0


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reglat",
        description="deformable registration with a PCA-decomposed latent space",
    )
    sub = parser.add_subparsers(dest="command")

    def add(name, handler, doc):
        p = sub.add_parser(name, help=doc, description=doc)
        p.set_defaults(handler=handler)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", type=str, default=None,
                       help="JSON file with defaults for any flag")
        p.add_argument("--force", action="store_true",
                       help="overwrite existing outputs")
        return p

    p = add("phantom", cmd_phantom, "generate a synthetic dataset")
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--subjects", type=int, default=None)
    p.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    p.add_argument("--translation", type=float, default=None)
    p.add_argument("--translation-axes", dest="translation_axes", type=str, default=None)
    p.add_argument("--rotation-deg", dest="rotation_deg", type=float, default=None)
    p.add_argument("--scale-lo", dest="scale_lo", type=float, default=None)
    p.add_argument("--scale-hi", dest="scale_hi", type=float, default=None)
    p.add_argument("--warp-amplitude", dest="warp_amplitude", type=float, default=None)

    p = add("train", cmd_train, "train the registration network")
    p.add_argument("--data", type=str, default=None, help="manifest.json path")
    p.add_argument("--out", type=str, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--ncc-window", dest="ncc_window", type=int, default=None)
    p.add_argument("--base-channels", dest="base_channels", type=int, default=None)
    p.add_argument("--downsamplings", type=int, default=None)
    p.add_argument("--skips", action="store_const", const=True, default=None)
    p.add_argument("--no-augment", dest="augment", action="store_const",
                   const=False, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)

    p = add("eval", cmd_eval, "evaluate a checkpoint (Dice before/after)")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--split", type=str, default=None)
    p.add_argument("--out", type=str, default=None)

    p = add("latents", cmd_latents, "encode a split into a latent matrix")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--split", type=str, default=None)
    p.add_argument("--out", type=str, default=None)

    p = add("pca", cmd_pca, "fit the principal basis of a latent matrix")
    p.add_argument("--latents", type=str, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--center", action="store_const", const=True, default=None)
    p.add_argument("--out", type=str, default=None)

    p = add("component", cmd_component, "decode one principal component")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--basis", type=str, default=None)
    p.add_argument("--j", type=int, default=None)
    p.add_argument("--lam", type=float, default=None)
    p.add_argument("--out", type=str, default=None)

    p = add("sweep", cmd_sweep, "lambda sweep slice/contour exports")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--basis", type=str, default=None)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--subject", type=str, default=None)
    p.add_argument("--j", type=int, default=None)
    p.add_argument("--lambdas", type=str, default=None)
    p.add_argument("--out", type=str, default=None)

    p = add("probe", cmd_probe, "affine perturbation probe")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--basis", type=str, default=None)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--transform", type=str, default=None,
                   help="translation:z:10 | rotation:z:20 | scaling:0.2")
    p.add_argument("--split", type=str, default=None)
    p.add_argument("--out", type=str, default=None)

    p = add("fieldpca", cmd_fieldpca, "PCA directly on deformation fields")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--split", type=str, default=None)
    p.add_argument("--out", type=str, default=None)

    p = add("serve", cmd_serve, "serve the explorer HTTP API")
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--basis", type=str, default=None)
    p.add_argument("--data", type=str, default=None)
    p.add_argument("--probe-dir", dest="probe_dir", type=str, default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--frontend", type=str, default=None)

    return parser


def main(argv=None) -> int:
    from .rawio import ContainerError
    from .regnet import FingerprintMismatchError

    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "handler", None):
        parser.print_help()
        return EXIT_USAGE
    try:
        return args.handler(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return EXIT_MISSING_FILE
    except FingerprintMismatchError as e:
        print(f"error: fingerprint mismatch: {e}", file=sys.stderr)
        return EXIT_FINGERPRINT
    except (ContainerError, RuntimeError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
