"""Dense fields on regular grids: pyramids, multilinear sampling, warping, smoothing.

A volume is an ndarray of shape ``dims``; a vector field is an ndarray of
shape ``(d, *dims)`` with ``d == len(dims)``, holding displacements or
velocities in voxels of its own grid. Axis 0 is slowest-varying. All
operations accept :class:`~mdreg.autodiff.Var` operands and are recorded when
a tape is active.
"""

from functools import lru_cache

import numpy as np

from . import _kernels
from .autodiff import Var, record, value


class GeometryError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


def dims_of(field):
    """Spatial dims of a vector field (d, *dims)."""
    shape = value(field).shape
    if shape[0] != len(shape) - 1:
        raise GeometryError(f"vector field with {shape[0]} channels on a {len(shape) - 1}-D grid")
    return tuple(shape[1:])


@lru_cache(maxsize=32)
def _grid(dims):
    g = np.stack(np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij"))
    g.flags.writeable = False
    return g


def identity_grid(dims):
    """Voxel coordinates, shape (d, *dims)."""
    return _grid(tuple(int(n) for n in dims))


def halve(dims):
    return tuple(-(-n // 2) for n in dims)


# ---------------------------------------------------------------------------
# per-axis linear operators


def _apply_axes(arr, mats, lead):
    for a, m in enumerate(mats):
        if m is None:
            continue
        ax = lead + a
        arr = np.moveaxis(np.tensordot(m, arr, axes=(1, ax)), 0, ax)
    return arr


def _linear(x, mats, lead, post_scale=None):
    """Separable linear map along spatial axes, with optional per-channel scale."""
    xv = value(x)
    y = _apply_axes(xv, mats, lead)
    if post_scale is not None:
        y = y * post_scale

    def vjp(g):
        if post_scale is not None:
            g = g * post_scale
        return (_apply_axes(g, [None if m is None else m.T for m in mats], lead),)

    return record(y, (x,), vjp)


@lru_cache(maxsize=64)
def _pool_matrix(n):
    m = -(-n // 2)
    P = np.zeros((m, n))
    for j in range(m):
        lo, hi = max(2 * j - 1, 0), min(2 * j + 1, n - 1)
        P[j, lo:hi + 1] = 1.0 / (hi - lo + 1)
    return P


def _halving_steps(n_src, n_dst):
    k, n = 0, n_dst
    while n > n_src:
        n = -(-n // 2)
        k += 1
    return k if n == n_src else None


@lru_cache(maxsize=64)
def _upsample_axis(n_src, n_dst):
    """Interpolation matrix (n_dst, n_src) and velocity scale for one axis.

    When ``n_src`` is ``n_dst`` ceil-halved k times the fine voxel i maps to
    coarse coordinate i / 2**k, the same centring the stride-2 pooling uses;
    otherwise first and last voxels are aligned.
    """
    k = _halving_steps(n_src, n_dst)
    i = np.arange(n_dst, dtype=np.float64)
    if k is not None:
        factor = float(2 ** k)
        x = i / factor
    elif n_src == 1:
        factor = float(n_dst)
        x = np.zeros(n_dst)
    else:
        factor = (n_dst - 1) / (n_src - 1)
        x = i / factor
    x = np.clip(x, 0, n_src - 1)
    U = np.zeros((n_dst, n_src))
    if n_src == 1:
        U[:, 0] = 1.0
        return U, factor
    i0 = np.minimum(np.floor(x).astype(int), n_src - 2)
    t = x - i0
    U[np.arange(n_dst), i0] += 1.0 - t
    U[np.arange(n_dst), i0 + 1] += t
    return U, factor


def gaussian_weights(sigma, ksize):
    if ksize % 2 == 0 or ksize < 1:
        raise ConfigurationError(f"kernel size must be odd and positive, got {ksize}")
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be positive, got {sigma}")
    r = np.arange(ksize) - ksize // 2
    w = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return w / w.sum()


@lru_cache(maxsize=64)
def _smooth_matrix(n, sigma, ksize):
    w = gaussian_weights(sigma, ksize)
    r = ksize // 2
    G = np.zeros((n, n))
    for i in range(n):
        for k, wk in enumerate(w):
            G[i, min(max(i + k - r, 0), n - 1)] += wk
    return G


# ---------------------------------------------------------------------------
# public operations


def avg_pool_down(v):
    """3-wide, stride-2 mean pooling; border windows shrink to the available voxels."""
    dims = value(v).shape
    if min(dims) < 3:
        raise DegenerateInputError(f"cannot pool dims {dims}: every axis needs at least 3 voxels")
    return _linear(v, [_pool_matrix(n) for n in dims], 0)


def build_pyramid(v, levels):
    """Coarse-to-fine list of ``levels`` volumes; the last entry is ``v`` itself."""
    if levels < 1:
        raise ConfigurationError("need at least one pyramid level")
    dims = value(v).shape
    for _ in range(levels - 1):
        dims = halve(dims)
    if levels > 1 and min(dims) < 4:
        raise ConfigurationError(f"{levels} levels shrink {value(v).shape} to {dims}")
    pyr = [v]
    for _ in range(levels - 1):
        pyr.append(avg_pool_down(pyr[-1]))
    return pyr[::-1]


def resample(img, coords):
    """Multilinear sampling of a channel-first grid (C, *dims) at coords (d, *q)."""
    iv, cv = value(img), value(coords)
    if cv.shape[0] != iv.ndim - 1:
        raise GeometryError(f"{cv.shape[0]}-D coordinates for a {iv.ndim - 1}-D grid")
    out = _kernels.sample(iv, cv)

    def vjp(g):
        if isinstance(img, Var) and isinstance(coords, Var):
            return _kernels.sample_vjp(iv, cv, g)
        gi = _kernels.sample_grad_image(cv, g, iv.shape[1:]) if isinstance(img, Var) else None
        gc = _kernels.sample_grad_coords(iv, cv, g) if isinstance(coords, Var) else None
        return gi, gc

    return record(out, (img, coords), vjp)


def sample_linear(v, coords):
    """Sample a volume at coords (d, *q); out-of-range coordinates clamp to the border."""
    iv, cv = value(v), value(coords)
    if cv.shape[0] != iv.ndim:
        raise GeometryError(f"{cv.shape[0]}-D coordinates for a {iv.ndim}-D volume")
    out = _kernels.sample(iv[None], cv)[0]

    def vjp(g):
        gi = _kernels.sample_grad_image(cv, g[None], iv.shape)[0] if isinstance(v, Var) else None
        gc = _kernels.sample_grad_coords(iv[None], cv, g[None]) if isinstance(coords, Var) else None
        return gi, gc

    return record(out, (v, coords), vjp)


def warp(v, disp):
    """Pull-back warp: ``out(x) = v(x + disp(x))``."""
    dims = value(v).shape
    if dims_of(disp) != dims:
        raise GeometryError(f"volume dims {dims} vs displacement dims {dims_of(disp)}")
    if not isinstance(disp, Var) and not np.any(value(disp)):
        # exact identity; interpolation at integer nodes already returns the node value
        return sample_linear(v, identity_grid(dims))
    return sample_linear(v, identity_grid(dims) + disp)


def gaussian_smooth(f, sigma=1.732, ksize=3):
    """Per-channel separable Gaussian smoothing with edge replication."""
    dims = dims_of(f)
    return _linear(f, [_smooth_matrix(n, float(sigma), int(ksize)) for n in dims], 1)


def upsample_linear(f, target_dims):
    """Resample a vector field onto a finer grid, rescaling each component to the new voxel size."""
    src = dims_of(f)
    target_dims = tuple(int(n) for n in target_dims)
    if len(target_dims) != len(src) or any(t < s for t, s in zip(target_dims, src)):
        raise GeometryError(f"cannot upsample {src} to {target_dims}")
    if target_dims == src:
        return f
    mats, factors = zip(*[_upsample_axis(s, t) for s, t in zip(src, target_dims)])
    scale = np.asarray(factors).reshape((-1,) + (1,) * len(src))
    return _linear(f, list(mats), 1, post_scale=scale)
