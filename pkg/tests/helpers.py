"""Shared test utilities: central finite-difference gradient checks."""

import numpy as np
import torch

FD_STEP = 1e-5
REL_TOL = 1e-4
ABS_TOL = 1e-8


def numeric_grad_scalar(fn, params, step=FD_STEP):
    """Central finite differences of a scalar function w.r.t. a list of
    tensors, perturbing every element in place."""
    grads = []
    with torch.no_grad():
        for p in params:
            g = torch.zeros_like(p)
            flat_p = p.reshape(-1)
            flat_g = g.reshape(-1)
            for i in range(flat_p.numel()):
                orig = flat_p[i].item()
                flat_p[i] = orig + step
                hi = float(fn())
                flat_p[i] = orig - step
                lo = float(fn())
                flat_p[i] = orig
                flat_g[i] = (hi - lo) / (2.0 * step)
            grads.append(g)
    return grads


def assert_grads_close(analytic, numeric, rtol=REL_TOL, atol=ABS_TOL):
    for a, n in zip(analytic, numeric):
        a = a.detach()
        diff = (a - n).abs()
        bound = rtol * torch.maximum(a.abs(), n.abs()) + atol
        worst = (diff - bound).max().item()
        assert (diff <= bound).all(), (
            f"gradient mismatch: worst excess {worst:.3e}, "
            f"max |analytic|={a.abs().max():.3e}, max |numeric|={n.abs().max():.3e}"
        )


def check_scalar_grad(build_fn, tensors, step=FD_STEP, rtol=REL_TOL):
    """Autograd vs central differences for ``scalar = build_fn(*tensors)``.

    ``tensors`` must be float64 leaf tensors; they get requires_grad set
    here.
    """
    for t in tensors:
        assert t.dtype == torch.float64, "gradient checks run in 64-bit"
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    out = build_fn(*tensors)
    out.backward()
    analytic = [t.grad.clone() for t in tensors]
    for t in tensors:
        t.requires_grad_(False)
    numeric = numeric_grad_scalar(lambda: build_fn(*tensors), tensors, step)
    assert_grads_close(analytic, numeric, rtol=rtol)


def rand64(*shape, seed=0, lo=0.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return torch.from_numpy(rng.uniform(lo, hi, size=shape)).double()


def smooth_field(shape, seed, lo=0.0, hi=1.0):
    """Low-frequency random field in [lo, hi]. Finite-difference checks that
    route through the trilinear warp need inputs whose interpolation slope
    changes gently across cell boundaries; white noise does not qualify."""
    rng = np.random.default_rng(seed)
    grids = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
    f = np.zeros(shape)
    for _ in range(3):
        k = rng.uniform(-0.35, 0.35, 3) * 2 * np.pi / shape[0]
        phase = rng.uniform(0, 2 * np.pi)
        f += rng.uniform(0.2, 0.5) * np.sin(
            k[0] * grids[0] + k[1] * grids[1] + k[2] * grids[2] + phase)
    f = (f - f.min()) / (f.max() - f.min())
    return lo + (hi - lo) * f


def soft_seg_pair(shape, seed):
    """Smooth two-channel soft label field (background, foreground)."""
    s = torch.from_numpy(smooth_field(shape, seed, 0.1, 0.9))
    return torch.stack([1.0 - s, s])[None]
