"""Deformation-field math: gradient-map integration, trilinear warping and
Jacobian determinant maps.

All three operations are differentiable torch computations (they sit inside
the training graph). Each also accepts numpy arrays and then returns numpy,
for pipeline code that lives outside the graph.

Shapes, unbatched: increment fields and grids are (3, D, H, W), images are
(D, H, W) or (C, D, H, W). A leading batch dimension is accepted everywhere.
Grid values are voxel coordinates; ``phi[c]`` is the source coordinate along
array axis ``c``.
"""

from __future__ import annotations

import numpy as np
import torch


def _to_tensor(x):
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(x)), True
    return x, False


def _exclusive_cumsum(t: torch.Tensor, dim: int) -> torch.Tensor:
    n = t.size(dim)
    cs = t.cumsum(dim)
    zero = torch.zeros_like(t.narrow(dim, 0, 1))
    return torch.cat([zero, cs.narrow(dim, 0, n - 1)], dim)


def integrate_spatial_gradients(inc):
    """Turn per-axis increment maps into a sampling grid.

    ``phi[c]`` is the exclusive prefix sum of ``inc[c]`` along axis ``c``:
    the first plane along each axis is 0, and all-ones increments integrate
    to the identity grid. Linear in ``inc``.
    """
    t, was_numpy = _to_tensor(inc)
    if t.dim() not in (4, 5) or t.shape[-4] != 3:
        raise ValueError(f"expected (3, D, H, W) or (B, 3, D, H, W), got {tuple(t.shape)}")
    planes = [
        _exclusive_cumsum(t.select(-4, c), dim=t.dim() - 4 + c) for c in range(3)
    ]
    phi = torch.stack(planes, dim=t.dim() - 4)
    return phi.numpy() if was_numpy else phi


def warp_trilinear(vol, phi):
    """Sample ``vol`` at grid coordinates ``phi`` with trilinear weights.

    Out-of-range coordinates clamp to the border. Integer coordinates
    reproduce voxel values exactly, so the identity grid is a no-op with no
    tolerance. Multi-channel inputs (e.g. one-hot label maps) are warped
    channel by channel.
    """
    v, v_numpy = _to_tensor(vol)
    p, _ = _to_tensor(phi)

    in_dim = v.dim()
    if in_dim == 3:
        v = v[None, None]
    elif in_dim == 4:
        v = v[None]
    elif in_dim != 5:
        raise ValueError(f"bad volume shape {tuple(vol.shape)}")
    if p.dim() == 4:
        p = p[None]
    if p.dim() != 5 or p.shape[1] != 3:
        raise ValueError(f"bad grid shape {tuple(phi.shape)}")
    if v.shape[0] == 1 and p.shape[0] > 1:
        v = v.expand(p.shape[0], -1, -1, -1, -1)
    if p.shape[0] == 1 and v.shape[0] > 1:
        p = p.expand(v.shape[0], -1, -1, -1, -1)
    if v.shape[-3:] != p.shape[-3:]:
        raise ValueError(f"volume {tuple(v.shape)} and grid {tuple(p.shape)} disagree")
    if v.dtype != p.dtype:
        p = p.to(v.dtype)

    b, c, d, h, w = v.shape
    sizes = (d, h, w)
    lo_idx, hi_idx, hi_w = [], [], []
    for ax in range(3):
        coord = p[:, ax].clamp(0.0, float(sizes[ax] - 1))
        # NaN coordinates (diverged training) must not reach gather as
        # garbage indices; index with 0 and let the NaN weight propagate
        i0 = torch.nan_to_num(coord.detach(), nan=0.0).floor()
        frac = coord - i0
        i0 = i0.long()
        i1 = (i0 + 1).clamp(max=sizes[ax] - 1)
        lo_idx.append(i0)
        hi_idx.append(i1)
        hi_w.append(frac)

    flat = v.reshape(b, c, d * h * w)
    out = torch.zeros_like(v)
    for bz in (0, 1):
        iz = (lo_idx[0], hi_idx[0])[bz]
        wz = 1.0 - hi_w[0] if bz == 0 else hi_w[0]
        for by in (0, 1):
            iy = (lo_idx[1], hi_idx[1])[by]
            wy = 1.0 - hi_w[1] if by == 0 else hi_w[1]
            for bx in (0, 1):
                ix = (lo_idx[2], hi_idx[2])[bx]
                wx = 1.0 - hi_w[2] if bx == 0 else hi_w[2]
                lin = ((iz * h + iy) * w + ix).reshape(b, 1, -1).expand(-1, c, -1)
                corner = flat.gather(2, lin).reshape(b, c, d, h, w)
                out = out + corner * (wz * wy * wx)[:, None]

    if in_dim == 3:
        out = out[0, 0]
    elif in_dim == 4:
        out = out[0]
    return out.numpy() if v_numpy else out


def _axis_gradient(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Central differences in the interior, one-sided at the two boundary
    planes (step 1 voxel)."""
    n = t.size(dim)
    first = t.narrow(dim, 1, 1) - t.narrow(dim, 0, 1)
    mid = (t.narrow(dim, 2, n - 2) - t.narrow(dim, 0, n - 2)) * 0.5
    last = t.narrow(dim, n - 1, 1) - t.narrow(dim, n - 2, 1)
    return torch.cat([first, mid, last], dim)


def jacobian_determinant_map(phi):
    """Determinant of the local Jacobian of a sampling grid, per voxel.

    The identity grid maps to det == 1 everywhere; negative values mark
    folding. Requires every spatial extent >= 3 so the interior stencil
    exists.
    """
    p, was_numpy = _to_tensor(phi)
    squeeze = False
    if p.dim() == 4:
        p = p[None]
        squeeze = True
    if p.dim() != 5 or p.shape[1] != 3:
        raise ValueError(f"bad grid shape {tuple(phi.shape)}")
    if min(p.shape[-3:]) < 3:
        raise ValueError(f"grid too small for Jacobian stencil: {tuple(p.shape[-3:])}")

    j = [[_axis_gradient(p[:, i], dim=1 + ax) for ax in range(3)] for i in range(3)]
    det = (
        j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
    )
    if squeeze:
        det = det[0]
    return det.numpy() if was_numpy else det
