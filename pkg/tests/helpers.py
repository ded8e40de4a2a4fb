"""Shared test utilities."""

import numpy as np
from scipy import ndimage


def smooth_field(rng, dims, max_norm, sigma=None):
    """Gaussian-filtered periodic noise rescaled to a maximum vector norm."""
    d = len(dims)
    sigma = min(dims) / 4 if sigma is None else sigma
    noise = rng.standard_normal((d,) + tuple(dims))
    v = np.stack([ndimage.gaussian_filter(noise[c], sigma, mode="wrap") for c in range(d)])
    return v * (max_norm / np.sqrt((v ** 2).sum(0)).max())


def interior(arr, margin, lead=1):
    """Slice off ``margin`` voxels from every spatial axis (after ``lead`` leading axes)."""
    sl = (slice(None),) * lead + (slice(margin, -margin),) * (arr.ndim - lead)
    return arr[sl]
