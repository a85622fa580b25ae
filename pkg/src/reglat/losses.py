"""Training losses: intensity similarity, label overlap, and the two
deformation regularizers, plus their weighted symmetric combination.

Everything here takes torch tensors (batched or not) and returns scalar
tensors, so the trainer can backpropagate through any term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .warp import jacobian_determinant_map, warp_trilinear

EPS = 1e-5


@dataclass
class LossWeights:
    alpha: float = 0.1     # smoothness weight
    beta: float = 1.0      # Jacobian folding weight; 0 disables the term
    ncc_window: int = 0    # 0 = global correlation, otherwise odd window edge

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be >= 0")
        if self.ncc_window != 0 and (self.ncc_window < 2 or self.ncc_window % 2 == 0):
            raise ValueError("ncc_window must be 0 or an odd integer >= 3")


def _flatten_batch(a: torch.Tensor) -> torch.Tensor:
    # (..., D, H, W) -> (B, D*H*W)
    return a.reshape(-1, a.shape[-3] * a.shape[-2] * a.shape[-1])


def ncc_loss(a: torch.Tensor, b: torch.Tensor, window: int = 0) -> torch.Tensor:
    """1 - NCC(a, b), in [0, 2].

    Global mode correlates whole volumes; window mode averages zero-normalized
    correlations over all w^3 neighborhoods (valid positions only). Windows or
    volumes with no intensity spread contribute correlation 0 through the
    denominator guard, so a constant image scores loss 1 against anything.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if window == 0:
        x = _flatten_batch(a)
        y = _flatten_batch(b)
        x0 = x - x.mean(dim=1, keepdim=True)
        y0 = y - y.mean(dim=1, keepdim=True)
        num = (x0 * y0).sum(dim=1)
        den = torch.sqrt((x0 * x0).sum(dim=1) * (y0 * y0).sum(dim=1))
        corr = num / den.clamp(min=EPS)
        return 1.0 - corr.mean()

    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    x = a.reshape(-1, 1, *a.shape[-3:])
    y = b.reshape(-1, 1, *b.shape[-3:])
    kernel = torch.ones((1, 1, window, window, window), dtype=x.dtype)
    n = float(window**3)
    sx = F.conv3d(x, kernel)
    sy = F.conv3d(y, kernel)
    sxx = F.conv3d(x * x, kernel)
    syy = F.conv3d(y * y, kernel)
    sxy = F.conv3d(x * y, kernel)
    cov = sxy - sx * sy / n
    var_x = (sxx - sx * sx / n).clamp(min=0.0)
    var_y = (syy - sy * sy / n).clamp(min=0.0)
    corr = cov / torch.sqrt(var_x * var_y).clamp(min=EPS)
    return 1.0 - corr.mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Soft Dice loss over foreground channels.

    Inputs are (L+1, D, H, W) or (B, L+1, D, H, W); channel 0 is background
    and is excluded from the mean.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    p = pred.reshape(-1, *pred.shape[-4:]) if pred.dim() == 5 else pred[None]
    t = target.reshape(-1, *target.shape[-4:]) if target.dim() == 5 else target[None]
    p = p[:, 1:]
    t = t[:, 1:]
    inter = (p * t).sum(dim=(2, 3, 4))
    sums = p.sum(dim=(2, 3, 4)) + t.sum(dim=(2, 3, 4))
    dice = 2.0 * inter / (sums + EPS)
    return 1.0 - dice.mean()


def jacobian_loss(phi: torch.Tensor) -> torch.Tensor:
    """Mean folding penalty relu(-det J) over interior voxels."""
    det = jacobian_determinant_map(phi)
    interior = det[..., 1:-1, 1:-1, 1:-1]
    return F.relu(-interior).mean()


def smoothness_loss(g: torch.Tensor) -> torch.Tensor:
    """Mean squared forward difference of the increment maps, all channels
    along all three spatial axes."""
    total = g.new_zeros(())
    count = 0
    for dim in (-3, -2, -1):
        n = g.size(dim)
        d = g.narrow(dim, 1, n - 1) - g.narrow(dim, 0, n - 1)
        total = total + (d * d).sum()
        count += d.numel()
    return total / count


def one_hot(labels: np.ndarray | torch.Tensor, n_classes: int) -> torch.Tensor:
    """Integer label volume (D, H, W) -> float one-hot (n_classes, D, H, W)."""
    t = torch.from_numpy(np.ascontiguousarray(labels)) if isinstance(labels, np.ndarray) else labels
    oh = F.one_hot(t.long(), n_classes)
    return oh.permute(3, 0, 1, 2).float()


def total_loss(out, f_vol, f_seg, m_vol, m_seg, weights: LossWeights):
    """Symmetric four-term loss.

    ``out`` carries forward/backward increment fields and grids plus the
    already-warped moving volume and soft labels; the backward-direction
    warps of the fixed volume are computed here. Segmentations must be
    one-hot float tensors. Returns (total, terms) where ``terms`` maps
    ``sim/seg/smooth/jac`` x ``_f/_b`` to scalar tensors; the ``jac`` terms
    are omitted entirely when beta == 0.
    """
    terms: dict[str, torch.Tensor] = {}
    terms["sim_f"] = ncc_loss(out.warped_moving, f_vol, weights.ncc_window)
    terms["seg_f"] = dice_loss(out.warped_moving_seg, f_seg)
    terms["smooth_f"] = smoothness_loss(out.fwd_grad)

    warped_fixed = warp_trilinear(f_vol, out.bwd_grid)
    warped_fixed_seg = warp_trilinear(f_seg, out.bwd_grid)
    terms["sim_b"] = ncc_loss(warped_fixed, m_vol, weights.ncc_window)
    terms["seg_b"] = dice_loss(warped_fixed_seg, m_seg)
    terms["smooth_b"] = smoothness_loss(out.bwd_grad)

    if weights.beta > 0:
        terms["jac_f"] = jacobian_loss(out.fwd_grid)
        terms["jac_b"] = jacobian_loss(out.bwd_grid)

    fwd = terms["sim_f"] + terms["seg_f"] + weights.alpha * terms["smooth_f"]
    bwd = terms["sim_b"] + terms["seg_b"] + weights.alpha * terms["smooth_b"]
    if weights.beta > 0:
        fwd = fwd + weights.beta * terms["jac_f"]
        bwd = bwd + weights.beta * terms["jac_b"]
    return fwd + bwd, terms
