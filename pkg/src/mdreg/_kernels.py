"""Multilinear sampling kernels and their adjoints.

Two interchangeable backends: numba ``@njit`` loops for 2-D/3-D grids and a
vectorized numpy path for any dimensionality. Set ``MDRN_NUMBA=0`` to force
the numpy path; ``set_backend`` switches at runtime (tests, benchmarks).

Per-axis conventions shared by both backends, for a coordinate ``x`` on an
axis of size ``n``:

* ``x`` is clamped to ``[0, n - 1]`` (edge replication);
* the cell is ``[i0, i0 + 1]`` with ``i0 = min(floor(x), n - 2)``;
* the coordinate derivative is 0 where ``x`` was clamped, the average of the
  two adjacent cell slopes at an interior grid node, and the cell slope
  elsewhere.
"""

import itertools
import os

import numpy as np

try:
    import numba
    from numba import njit, prange
except ImportError:  # pragma: no cover
    numba = None

_BACKEND = "numba" if numba is not None and os.environ.get("MDRN_NUMBA", "1") != "0" else "numpy"

if numba is not None and "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    # prefer OpenMP; an outdated TBB install otherwise triggers a warning on first use
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

if numba is not None and os.environ.get("MDRN_THREADS"):
    numba.set_num_threads(max(1, min(int(os.environ["MDRN_THREADS"]), numba.config.NUMBA_NUM_THREADS)))


def get_backend():
    return _BACKEND


def set_backend(name):
    """Select ``"numba"`` or ``"numpy"``; returns the previous backend."""
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and numba is None:
        raise RuntimeError("numba is not installed")
    prev, _BACKEND = _BACKEND, name
    return prev


# ---------------------------------------------------------------------------
# numpy path


def _axis_terms(x, n):
    if n == 1:
        z = np.zeros(x.shape, dtype=np.intp)
        return z, z, np.zeros_like(x), z, z, np.ones_like(x), np.zeros(x.shape, bool)
    xc = np.clip(x, 0.0, n - 1.0)
    i0 = np.minimum(np.floor(xc).astype(np.intp), n - 2)
    t = xc - i0
    inside = (x >= 0.0) & (x <= n - 1.0)
    central = inside & (t == 0.0) & (i0 >= 1)
    lo = np.where(central, i0 - 1, i0)
    div = np.where(central, 2.0, 1.0)
    return i0, i0 + 1, t, lo, i0 + 1, div, inside


def _np_sample(img, coords):
    C, dims = img.shape[0], img.shape[1:]
    d = len(dims)
    flat = img.reshape(C, -1)
    strides = np.cumprod((1,) + dims[::-1])[:-1][::-1]
    terms = [_axis_terms(coords[a], dims[a]) for a in range(d)]
    out = np.zeros((C,) + coords.shape[1:])
    for corner in itertools.product((0, 1), repeat=d):
        idx = 0
        w = 1.0
        for a, c in enumerate(corner):
            i0, i1, t = terms[a][:3]
            idx = idx + (i1 if c else i0) * strides[a]
            w = w * (t if c else 1.0 - t)
        out += flat[:, idx] * w
    return out


def _np_sample_grad_image(coords, g, dims):
    C = g.shape[0]
    d = len(dims)
    N = int(np.prod(dims))
    strides = np.cumprod((1,) + tuple(dims)[::-1])[:-1][::-1]
    terms = [_axis_terms(coords[a], dims[a]) for a in range(d)]
    out = np.zeros((C, N))
    gf = g.reshape(C, -1)
    for corner in itertools.product((0, 1), repeat=d):
        idx = 0
        w = 1.0
        for a, c in enumerate(corner):
            i0, i1, t = terms[a][:3]
            idx = idx + (i1 if c else i0) * strides[a]
            w = w * (t if c else 1.0 - t)
        idx = np.broadcast_to(idx, coords.shape[1:]).ravel()
        w = np.broadcast_to(w, coords.shape[1:]).ravel()
        for ch in range(C):
            out[ch] += np.bincount(idx, weights=w * gf[ch], minlength=N)
    return out.reshape((C,) + tuple(dims))


def _np_sample_grad_coords(img, coords, g):
    C, dims = img.shape[0], img.shape[1:]
    d = len(dims)
    flat = img.reshape(C, -1)
    strides = np.cumprod((1,) + dims[::-1])[:-1][::-1]
    terms = [_axis_terms(coords[a], dims[a]) for a in range(d)]
    out = np.zeros(coords.shape)
    for a in range(d):
        _, _, _, lo, hi, div, inside = terms[a]
        others = [b for b in range(d) if b != a]
        dv = np.zeros((C,) + coords.shape[1:])
        for corner in itertools.product((0, 1), repeat=d - 1):
            base = 0
            w = 1.0
            for b, c in zip(others, corner):
                i0, i1, t = terms[b][:3]
                base = base + (i1 if c else i0) * strides[b]
                w = w * (t if c else 1.0 - t)
            dv += (flat[:, base + hi * strides[a]] - flat[:, base + lo * strides[a]]) * w
        out[a] = np.where(inside, (g * dv).sum(axis=0) / div, 0.0)
    return out


# ---------------------------------------------------------------------------
# numba path

if numba is not None:

    @njit(cache=True, inline="always")
    def _nb_axis(x, n):
        # (i0, t, lo, hi, inv_div, inside)
        if n == 1:
            return 0, 0.0, 0, 0, 0.0, False
        xc = min(max(x, 0.0), n - 1.0)
        i0 = min(int(np.floor(xc)), n - 2)
        t = xc - i0
        inside = x >= 0.0 and x <= n - 1.0
        if inside and t == 0.0 and i0 >= 1:
            return i0, t, i0 - 1, i0 + 1, 0.5, True
        return i0, t, i0, i0 + 1, 1.0, inside

    @njit(cache=True, parallel=True)
    def _nb_sample3(img, coords, out):
        C, n0, n1, n2 = img.shape
        for q in prange(coords.shape[1]):
            i, ti, _, _, _, _ = _nb_axis(coords[0, q], n0)
            j, tj, _, _, _, _ = _nb_axis(coords[1, q], n1)
            k, tk, _, _, _, _ = _nb_axis(coords[2, q], n2)
            i1 = min(i + 1, n0 - 1)
            j1 = min(j + 1, n1 - 1)
            k1 = min(k + 1, n2 - 1)
            for c in range(C):
                out[c, q] = (
                    (1 - ti) * ((1 - tj) * ((1 - tk) * img[c, i, j, k] + tk * img[c, i, j, k1])
                                + tj * ((1 - tk) * img[c, i, j1, k] + tk * img[c, i, j1, k1]))
                    + ti * ((1 - tj) * ((1 - tk) * img[c, i1, j, k] + tk * img[c, i1, j, k1])
                            + tj * ((1 - tk) * img[c, i1, j1, k] + tk * img[c, i1, j1, k1]))
                )

    @njit(cache=True)
    def _nb_sample3_grad_image(coords, g, out):
        C, n0, n1, n2 = out.shape
        for q in range(coords.shape[1]):
            i, ti, _, _, _, _ = _nb_axis(coords[0, q], n0)
            j, tj, _, _, _, _ = _nb_axis(coords[1, q], n1)
            k, tk, _, _, _, _ = _nb_axis(coords[2, q], n2)
            i1 = min(i + 1, n0 - 1)
            j1 = min(j + 1, n1 - 1)
            k1 = min(k + 1, n2 - 1)
            for c in range(C):
                v = g[c, q]
                out[c, i, j, k] += (1 - ti) * (1 - tj) * (1 - tk) * v
                out[c, i, j, k1] += (1 - ti) * (1 - tj) * tk * v
                out[c, i, j1, k] += (1 - ti) * tj * (1 - tk) * v
                out[c, i, j1, k1] += (1 - ti) * tj * tk * v
                out[c, i1, j, k] += ti * (1 - tj) * (1 - tk) * v
                out[c, i1, j, k1] += ti * (1 - tj) * tk * v
                out[c, i1, j1, k] += ti * tj * (1 - tk) * v
                out[c, i1, j1, k1] += ti * tj * tk * v

    @njit(cache=True, parallel=True)
    def _nb_sample3_grad_coords(img, coords, g, out):
        C, n0, n1, n2 = img.shape
        for q in prange(coords.shape[1]):
            i, ti, ilo, ihi, di, ini = _nb_axis(coords[0, q], n0)
            j, tj, jlo, jhi, dj, inj = _nb_axis(coords[1, q], n1)
            k, tk, klo, khi, dk, ink = _nb_axis(coords[2, q], n2)
            i1 = min(i + 1, n0 - 1)
            j1 = min(j + 1, n1 - 1)
            k1 = min(k + 1, n2 - 1)
            gi = 0.0
            gj = 0.0
            gk = 0.0
            for c in range(C):
                v = g[c, q]
                if ini:
                    gi += v * di * (
                        (1 - tj) * (1 - tk) * (img[c, ihi, j, k] - img[c, ilo, j, k])
                        + (1 - tj) * tk * (img[c, ihi, j, k1] - img[c, ilo, j, k1])
                        + tj * (1 - tk) * (img[c, ihi, j1, k] - img[c, ilo, j1, k])
                        + tj * tk * (img[c, ihi, j1, k1] - img[c, ilo, j1, k1])
                    )
                if inj:
                    gj += v * dj * (
                        (1 - ti) * (1 - tk) * (img[c, i, jhi, k] - img[c, i, jlo, k])
                        + (1 - ti) * tk * (img[c, i, jhi, k1] - img[c, i, jlo, k1])
                        + ti * (1 - tk) * (img[c, i1, jhi, k] - img[c, i1, jlo, k])
                        + ti * tk * (img[c, i1, jhi, k1] - img[c, i1, jlo, k1])
                    )
                if ink:
                    gk += v * dk * (
                        (1 - ti) * (1 - tj) * (img[c, i, j, khi] - img[c, i, j, klo])
                        + (1 - ti) * tj * (img[c, i, j1, khi] - img[c, i, j1, klo])
                        + ti * (1 - tj) * (img[c, i1, j, khi] - img[c, i1, j, klo])
                        + ti * tj * (img[c, i1, j1, khi] - img[c, i1, j1, klo])
                    )
            out[0, q] = gi
            out[1, q] = gj
            out[2, q] = gk

    @njit(cache=True)
    def _nb_sample3_vjp(img, coords, g, gimg, gcoords):
        # fused adjoint: image scatter and coordinate gradient in one pass
        C, n0, n1, n2 = img.shape
        for q in range(coords.shape[1]):
            i, ti, ilo, ihi, di, ini = _nb_axis(coords[0, q], n0)
            j, tj, jlo, jhi, dj, inj = _nb_axis(coords[1, q], n1)
            k, tk, klo, khi, dk, ink = _nb_axis(coords[2, q], n2)
            i1 = min(i + 1, n0 - 1)
            j1 = min(j + 1, n1 - 1)
            k1 = min(k + 1, n2 - 1)
            w000 = (1 - ti) * (1 - tj) * (1 - tk)
            w001 = (1 - ti) * (1 - tj) * tk
            w010 = (1 - ti) * tj * (1 - tk)
            w011 = (1 - ti) * tj * tk
            w100 = ti * (1 - tj) * (1 - tk)
            w101 = ti * (1 - tj) * tk
            w110 = ti * tj * (1 - tk)
            w111 = ti * tj * tk
            gi = 0.0
            gj = 0.0
            gk = 0.0
            for c in range(C):
                v = g[c, q]
                gimg[c, i, j, k] += w000 * v
                gimg[c, i, j, k1] += w001 * v
                gimg[c, i, j1, k] += w010 * v
                gimg[c, i, j1, k1] += w011 * v
                gimg[c, i1, j, k] += w100 * v
                gimg[c, i1, j, k1] += w101 * v
                gimg[c, i1, j1, k] += w110 * v
                gimg[c, i1, j1, k1] += w111 * v
                if ini:
                    gi += v * di * (
                        (1 - tj) * (1 - tk) * (img[c, ihi, j, k] - img[c, ilo, j, k])
                        + (1 - tj) * tk * (img[c, ihi, j, k1] - img[c, ilo, j, k1])
                        + tj * (1 - tk) * (img[c, ihi, j1, k] - img[c, ilo, j1, k])
                        + tj * tk * (img[c, ihi, j1, k1] - img[c, ilo, j1, k1])
                    )
                if inj:
                    gj += v * dj * (
                        (1 - ti) * (1 - tk) * (img[c, i, jhi, k] - img[c, i, jlo, k])
                        + (1 - ti) * tk * (img[c, i, jhi, k1] - img[c, i, jlo, k1])
                        + ti * (1 - tk) * (img[c, i1, jhi, k] - img[c, i1, jlo, k])
                        + ti * tk * (img[c, i1, jhi, k1] - img[c, i1, jlo, k1])
                    )
                if ink:
                    gk += v * dk * (
                        (1 - ti) * (1 - tj) * (img[c, i, j, khi] - img[c, i, j, klo])
                        + (1 - ti) * tj * (img[c, i, j1, khi] - img[c, i, j1, klo])
                        + ti * (1 - tj) * (img[c, i1, j, khi] - img[c, i1, j, klo])
                        + ti * tj * (img[c, i1, j1, khi] - img[c, i1, j1, klo])
                    )
            gcoords[0, q] = gi
            gcoords[1, q] = gj
            gcoords[2, q] = gk

    @njit(cache=True)
    def _nb_sample2_vjp(img, coords, g, gimg, gcoords):
        C, n0, n1 = img.shape
        for q in range(coords.shape[1]):
            i, ti, ilo, ihi, di, ini = _nb_axis(coords[0, q], n0)
            j, tj, jlo, jhi, dj, inj = _nb_axis(coords[1, q], n1)
            i1 = min(i + 1, n0 - 1)
            j1 = min(j + 1, n1 - 1)
            gi = 0.0
            gj = 0.0
            for c in range(C):
                v = g[c, q]
                gimg[c, i, j] += (1 - ti) * (1 - tj) * v
                gimg[c, i, j1] += (1 - ti) * tj * v
                gimg[c, i1, j] += ti * (1 - tj) * v
                gimg[c, i1, j1] += ti * tj * v
                if ini:
                    gi += v * di * ((1 - tj) * (img[c, ihi, j] - img[c, ilo, j])
                                    + tj * (img[c, ihi, j1] - img[c, ilo, j1]))
                if inj:
                    gj += v * dj * ((1 - ti) * (img[c, i, jhi] - img[c, i, jlo])
                                    + ti * (img[c, i1, jhi] - img[c, i1, jlo]))
            gcoords[0, q] = gi
            gcoords[1, q] = gj

    @njit(cache=True, parallel=True)
    def _nb_sample2(img, coords, out):
        C, n0, n1 = img.shape
        for q in prange(coords.shape[1]):
            i, ti, _, _, _, _ = _nb_axis(coords[0, q], n0)
            j, tj, _, _, _, _ = _nb_axis(coords[1, q], n1)
            i1 = min(i + 1, n0 - 1)
            j1 = min(j + 1, n1 - 1)
            for c in range(C):
                out[c, q] = (
                    (1 - ti) * ((1 - tj) * img[c, i, j] + tj * img[c, i, j1])
                    + ti * ((1 - tj) * img[c, i1, j] + tj * img[c, i1, j1])
                )

    @njit(cache=True)
    def _nb_sample2_grad_image(coords, g, out):
        C, n0, n1 = out.shape
        for q in range(coords.shape[1]):
            i, ti, _, _, _, _ = _nb_axis(coords[0, q], n0)
            j, tj, _, _, _, _ = _nb_axis(coords[1, q], n1)
            i1 = min(i + 1, n0 - 1)
            j1 = min(j + 1, n1 - 1)
            for c in range(C):
                v = g[c, q]
                out[c, i, j] += (1 - ti) * (1 - tj) * v
                out[c, i, j1] += (1 - ti) * tj * v
                out[c, i1, j] += ti * (1 - tj) * v
                out[c, i1, j1] += ti * tj * v

    @njit(cache=True, parallel=True)
    def _nb_sample2_grad_coords(img, coords, g, out):
        C, n0, n1 = img.shape
        for q in prange(coords.shape[1]):
            i, ti, ilo, ihi, di, ini = _nb_axis(coords[0, q], n0)
            j, tj, jlo, jhi, dj, inj = _nb_axis(coords[1, q], n1)
            i1 = min(i + 1, n0 - 1)
            j1 = min(j + 1, n1 - 1)
            gi = 0.0
            gj = 0.0
            for c in range(C):
                v = g[c, q]
                if ini:
                    gi += v * di * ((1 - tj) * (img[c, ihi, j] - img[c, ilo, j])
                                    + tj * (img[c, ihi, j1] - img[c, ilo, j1]))
                if inj:
                    gj += v * dj * ((1 - ti) * (img[c, i, jhi] - img[c, i, jlo])
                                    + ti * (img[c, i1, jhi] - img[c, i1, jlo]))
            out[0, q] = gi
            out[1, q] = gj


# ---------------------------------------------------------------------------
# dispatch


def _use_numba(d):
    return _BACKEND == "numba" and d in (2, 3)


def sample(img, coords):
    """Sample a multi-channel grid ``img`` (C, *dims) at ``coords`` (d, *q)."""
    img = np.asarray(img, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    d = img.ndim - 1
    if not _use_numba(d):
        return _np_sample(img, coords)
    q = coords.shape[1:]
    flat = np.ascontiguousarray(coords.reshape(d, -1))
    out = np.empty((img.shape[0], flat.shape[1]))
    (_nb_sample3 if d == 3 else _nb_sample2)(np.ascontiguousarray(img), flat, out)
    return out.reshape((img.shape[0],) + q)


def sample_grad_image(coords, g, dims):
    """Adjoint of ``sample`` with respect to the sampled grid."""
    coords = np.asarray(coords, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    d = len(dims)
    if not _use_numba(d):
        return _np_sample_grad_image(coords, g, tuple(dims))
    flat = np.ascontiguousarray(coords.reshape(d, -1))
    out = np.zeros((g.shape[0],) + tuple(dims))
    fn = _nb_sample3_grad_image if d == 3 else _nb_sample2_grad_image
    fn(flat, np.ascontiguousarray(g.reshape(g.shape[0], -1)), out)
    return out


def sample_grad_coords(img, coords, g):
    """Adjoint of ``sample`` with respect to the query coordinates."""
    img = np.asarray(img, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    d = img.ndim - 1
    if not _use_numba(d):
        return _np_sample_grad_coords(img, coords, g)
    flat = np.ascontiguousarray(coords.reshape(d, -1))
    out = np.empty_like(flat)
    fn = _nb_sample3_grad_coords if d == 3 else _nb_sample2_grad_coords
    fn(np.ascontiguousarray(img), flat, np.ascontiguousarray(g.reshape(g.shape[0], -1)), out)
    return out.reshape(coords.shape)


def sample_vjp(img, coords, g):
    """Both adjoints of ``sample``: (grad wrt image, grad wrt coords)."""
    img = np.asarray(img, dtype=np.float64)
    coords = np.asarray(coords, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    d = img.ndim - 1
    if not _use_numba(d):
        return _np_sample_grad_image(coords, g, img.shape[1:]), _np_sample_grad_coords(img, coords, g)
    flat = np.ascontiguousarray(coords.reshape(d, -1))
    gimg = np.zeros(img.shape)
    gc = np.empty_like(flat)
    fn = _nb_sample3_vjp if d == 3 else _nb_sample2_vjp
    fn(np.ascontiguousarray(img), flat, np.ascontiguousarray(g.reshape(g.shape[0], -1)), gimg, gc)
    return gimg, gc.reshape(coords.shape)
