"""Slice renderings written as binary PPM: deformed grid lines and a signed Jacobian map."""

import numpy as np

from .fields import sample_linear
from .io import atomic_write


def ppm_bytes(rgb):
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"need (h, w, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes()


def write_ppm(rgb, path):
    atomic_write(path, ppm_bytes(rgb))


def take_slice(disp, axis, index):
    """In-plane displacement of a 2-D or 3-D field: ``(2, h, w)``."""
    disp = np.asarray(disp, dtype=np.float64)
    nd = disp.shape[0]
    if nd == 2:
        return disp
    if nd != 3:
        raise ValueError(f"cannot slice a {nd}-D field")
    if not 0 <= index < disp.shape[1 + axis]:
        raise IndexError(f"slice {index} outside axis {axis} of size {disp.shape[1 + axis]}")
    keep = [a for a in range(3) if a != axis]
    plane = np.take(disp, index, axis=1 + axis)
    return plane[keep]


def take_scalar_slice(vol, axis, index):
    vol = np.asarray(vol, dtype=np.float64)
    if vol.ndim == 2:
        return vol
    if not 0 <= index < vol.shape[axis]:
        raise IndexError(f"slice {index} outside axis {axis} of size {vol.shape[axis]}")
    return np.take(vol, index, axis=axis)


def grid_image(disp2, spacing=4, scale=8):
    """Deformed grid lines of a 2-D displacement, drawn on a ``scale``-times larger canvas.

    A line of the undeformed grid at row (or column) ``k * spacing`` is traced
    through ``x + disp(x)``, densely sampled so each canvas pixel it crosses is set.
    """
    h, w = disp2.shape[1:]
    H, W = h * scale, w * scale
    img = np.full((H, W, 3), 255, np.uint8)
    dense = np.linspace(0, 1, 4 * scale * max(h, w))
    for horizontal in (True, False):
        count, length = (h, w) if horizontal else (w, h)
        for k in range(0, count, spacing):
            t = dense * (length - 1)
            if horizontal:
                pts = np.stack([np.full_like(t, k), t])
            else:
                pts = np.stack([t, np.full_like(t, k)])
            y = pts[0] + sample_linear(disp2[0], pts)
            x = pts[1] + sample_linear(disp2[1], pts)
            r = np.clip(np.rint((y + 0.5) * scale - 0.5), 0, H - 1).astype(int)
            c = np.clip(np.rint((x + 0.5) * scale - 0.5), 0, W - 1).astype(int)
            img[r, c] = (20, 20, 20)
    return img


def jacobian_image(det2, scale=8, span=4.0):
    """Diverging map of a determinant slice: blue below 1, red above, black where not positive.

    Colour intensity follows ``log(det) / log(span)``, saturating at ``span``-fold
    compression or expansion.
    """
    det2 = np.asarray(det2, dtype=np.float64)
    pos = det2 > 0
    t = np.zeros_like(det2)
    t[pos] = np.clip(np.log(det2[pos]) / np.log(span), -1.0, 1.0)
    rgb = np.empty(det2.shape + (3,))
    rgb[..., 0] = np.where(t < 0, 1 + t, 1.0)
    rgb[..., 1] = 1 - np.abs(t)
    rgb[..., 2] = np.where(t > 0, 1 - t, 1.0)
    rgb[~pos] = 0.0
    rgb = np.rint(rgb * 255).astype(np.uint8)
    return np.repeat(np.repeat(rgb, scale, axis=0), scale, axis=1)
