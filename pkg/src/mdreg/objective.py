"""Bidirectional multi-level registration loss.

For each pyramid level the accumulated velocity is brought onto the level's
image grid, integrated in both directions, and scored with global NCC; the
incremental velocity of the level is penalized with a mean TV-L1 term.
"""

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .autodiff import Var, add, mul, neg, record, scale, value
from .fields import GeometryError, dims_of, gaussian_smooth, upsample_linear, warp
from .transform import integrate_svf

NCC_EPS = 1e-10


def ncc(a, b):
    """Global normalized cross-correlation; 0 when either image is constant."""
    av, bv = value(a), value(b)
    if av.shape != bv.shape:
        raise GeometryError(f"ncc of shapes {av.shape} and {bv.shape}")
    if av.size < 2:
        raise ValueError("ncc needs at least two voxels")
    ac = av - av.mean()
    bc = bv - bv.mean()
    sab = float((ac * bc).sum())
    saa = float((ac * ac).sum())
    sbb = float((bc * bc).sum())
    den = np.sqrt(saa * sbb + NCC_EPS)
    out = sab / den

    def vjp(g):
        g = float(g)
        ga = g * (bc / den - sab * sbb * ac / den ** 3) if isinstance(a, Var) else None
        gb = g * (ac / den - sab * saa * bc / den ** 3) if isinstance(b, Var) else None
        return ga, gb

    return record(np.asarray(out), (a, b), vjp)


def tv_l1(v):
    """Mean over voxels of the summed absolute forward differences (all channels, all axes)."""
    vv = value(v)
    dims = vv.shape[1:]
    if min(dims) < 2:
        raise ValueError(f"tv_l1 needs at least 2 voxels per axis, got {dims}")
    n = int(np.prod(dims))
    diffs = [np.diff(vv, axis=1 + a) for a in range(len(dims))]
    out = sum(float(np.abs(df).sum()) for df in diffs) / n

    def vjp(g):
        gv = np.zeros_like(vv)
        for a, df in enumerate(diffs):
            s = np.sign(df) * (float(g) / n)
            ax = 1 + a
            hi = [slice(None)] * vv.ndim
            lo = [slice(None)] * vv.ndim
            hi[ax] = slice(1, None)
            lo[ax] = slice(0, -1)
            gv[tuple(hi)] += s
            gv[tuple(lo)] -= s
        return (gv,)

    return record(np.asarray(out), (v,), vjp)


def to_unit_coordinates(v):
    """Express a voxel-unit vector field in coordinates spanning [-1, 1] along each axis."""
    dims = dims_of(v)
    k = np.array([2.0 / max(n - 1, 1) for n in dims]).reshape((-1,) + (1,) * len(dims))
    return mul(v, k)


def velocity_penalty(v):
    """TV-L1 of a velocity increment measured in unit coordinates."""
    return tv_l1(to_unit_coordinates(v))


def accumulate_velocities(increments):
    """Running sums of coarse-to-fine increments, each upsampled onto the next grid."""
    acc = []
    for i, v in enumerate(increments):
        if i == 0:
            acc.append(v)
            continue
        prev, cur = dims_of(acc[-1]), dims_of(v)
        if any(p > c for p, c in zip(prev, cur)):
            raise GeometryError(f"level {i + 1} grid {cur} is coarser than level {i} grid {prev}")
        acc.append(add(upsample_linear(acc[-1], cur), v))
    return acc


@dataclass
class LossBreakdown:
    forward: list
    backward: list
    reg: list
    lam: float
    total: Any = None  # Var under a tape, else 0-d ndarray
    extras: dict = field(default_factory=dict)

    @property
    def value(self):
        return float(np.asarray(value(self.total)))

    def check_finite(self):
        """Name of the first non-finite term, or None."""
        for name in ("forward", "backward", "reg"):
            for lvl, x in enumerate(getattr(self, name), start=1):
                if not np.isfinite(x):
                    return f"{name}[level {lvl}]"
        if not np.isfinite(self.value):
            return "total"
        return None


def level_velocities(accumulated, image_dims, smoothing=None):
    """Velocity on each level's image grid; ``smoothing=(sigma, ksize)`` applies to the finest only."""
    out = []
    for l, (v, dims) in enumerate(zip(accumulated, image_dims)):
        u = upsample_linear(v, dims)
        if smoothing is not None and l == len(accumulated) - 1:
            u = gaussian_smooth(u, *smoothing)
        out.append(u)
    return out


def mdreg_loss(fixed_pyr, moving_pyr, increments, lam, steps=7, smoothing=None):
    """Sum over levels of ``-NCC(fixed, moving o phi) - NCC(moving, fixed o phi^-1) + lam * TV(v_l)``."""
    if not (len(fixed_pyr) == len(moving_pyr) == len(increments)):
        raise GeometryError("pyramids and velocity increments differ in level count")
    dims = [value(f).shape for f in fixed_pyr]
    for l, (f, m, v) in enumerate(zip(fixed_pyr, moving_pyr, increments), start=1):
        if value(m).shape != dims[l - 1]:
            raise GeometryError(f"level {l}: fixed {dims[l - 1]} vs moving {value(m).shape}")
        if any(a > b for a, b in zip(dims_of(v), dims[l - 1])):
            raise GeometryError(f"level {l}: velocity grid {dims_of(v)} exceeds image grid {dims[l - 1]}")
    acc = accumulate_velocities(increments)
    vel = level_velocities(acc, dims, smoothing)
    fw, bw, rg = [], [], []
    total = None
    for f, m, v_inc, u in zip(fixed_pyr, moving_pyr, increments, vel):
        phi = integrate_svf(u, steps)
        phi_inv = integrate_svf(neg(u), steps)
        s_f = ncc(f, warp(m, phi.disp))
        s_b = ncc(m, warp(f, phi_inv.disp))
        r = velocity_penalty(v_inc)
        term = add(neg(add(s_f, s_b)), scale(r, lam))
        total = term if total is None else add(total, term)
        fw.append(float(value(s_f)))
        bw.append(float(value(s_b)))
        rg.append(float(value(r)))
    return LossBreakdown(fw, bw, rg, float(lam), total, {"velocities": vel})
