"""Convolution primitives (kernel 3 per axis, padding 1) for 2-D and 3-D inputs.

Arrays are channel-first: ``x`` is (C, *spatial), weights are
(C_out, C_in, 3, ..., 3). The transposed convolution is the exact adjoint of
the strided convolution with respect to its input.
"""

import itertools

import numpy as np

from .autodiff import Var, record, value


def _out_dims(dims, stride):
    return tuple(-(-n // stride) for n in dims)


def _offsets(d):
    return list(itertools.product(range(3), repeat=d))


def _im2col(x, stride):
    C, dims = x.shape[0], x.shape[1:]
    d = len(dims)
    out = _out_dims(dims, stride)
    xp = np.pad(x, [(0, 0)] + [(1, 1)] * d)
    cols = np.empty((C, 3 ** d) + out)
    for k, off in enumerate(_offsets(d)):
        sl = tuple(slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(off, out))
        cols[:, k] = xp[(slice(None),) + sl]
    return cols


def _col2im(cols, dims, stride):
    C = cols.shape[0]
    d = len(dims)
    out = cols.shape[2:]
    xp = np.zeros((C,) + tuple(n + 2 for n in dims))
    for k, off in enumerate(_offsets(d)):
        sl = tuple(slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(off, out))
        xp[(slice(None),) + sl] += cols[:, k]
    return xp[(slice(None),) + tuple(slice(1, n + 1) for n in dims)]


def conv_forward(x, w, stride):
    cols = _im2col(x, stride)
    out = cols.shape[2:]
    y = w.reshape(w.shape[0], -1) @ cols.reshape(-1, int(np.prod(out)))
    return y.reshape((w.shape[0],) + out), cols


def conv_grad_input(g, w, stride, dims):
    gm = g.reshape(g.shape[0], -1)
    cols = (w.reshape(w.shape[0], -1).T @ gm).reshape((w.shape[1], w[0, 0].size) + g.shape[1:])
    return _col2im(cols, dims, stride)


def conv_grad_weight(g, cols, wshape):
    return (g.reshape(g.shape[0], -1) @ cols.reshape(-1, g[0].size).T).reshape(wshape)


def conv(x, w, b, stride=1):
    """Zero-padded correlation with a 3-wide kernel, plus per-channel bias."""
    xv, wv, bv = value(x), value(w), value(b)
    d = xv.ndim - 1
    y, cols = conv_forward(xv, wv, stride)
    y += bv.reshape((-1,) + (1,) * d)

    def vjp(g):
        gx = conv_grad_input(g, wv, stride, xv.shape[1:]) if isinstance(x, Var) else None
        gw = conv_grad_weight(g, cols, wv.shape)
        gb = g.reshape(g.shape[0], -1).sum(axis=1)
        return gx, gw, gb

    return record(y, (x, w, b), vjp)


def conv_transpose(x, w, b, out_dims, stride=2):
    """Adjoint of ``conv`` in its input; ``w`` is (C_in, C_out, 3, ...).

    ``out_dims`` must satisfy ``ceil(out_dims / stride) == x.shape[1:]``.
    """
    xv, wv, bv = value(x), value(w), value(b)
    out_dims = tuple(out_dims)
    if _out_dims(out_dims, stride) != xv.shape[1:]:
        raise ValueError(f"cannot upsample {xv.shape[1:]} to {out_dims} with stride {stride}")
    d = xv.ndim - 1
    y = conv_grad_input(xv, wv, stride, out_dims)
    y += bv.reshape((-1,) + (1,) * d)

    def vjp(g):
        gx, cols = conv_forward(g, wv, stride)
        gw = conv_grad_weight(xv, cols, wv.shape)
        gb = g.reshape(g.shape[0], -1).sum(axis=1)
        return gx, gw, gb

    return record(y, (x, w, b), vjp)
