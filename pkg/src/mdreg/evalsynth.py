"""Overlap and fold metrics, label warping, and synthetic registration pairs."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .fields import GeometryError, dims_of, identity_grid, warp
from .transform import DeformationField, count_nonpositive_jacobian, integrate_svf


class GenerationError(RuntimeError):
    pass


def dice(a, b, labels=None):
    """Per-label Dice and their mean; labels absent from both volumes are skipped.

    ``labels`` defaults to every non-zero label present in either volume.
    """
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise GeometryError(f"dice of shapes {a.shape} and {b.shape}")
    if labels is None:
        labels = np.union1d(np.unique(a), np.unique(b))
        labels = labels[labels != 0]
    scores = {}
    for lab in labels:
        ma = a == lab
        mb = b == lab
        denom = int(ma.sum()) + int(mb.sum())
        if denom == 0:
            continue
        scores[int(lab)] = 2.0 * np.logical_and(ma, mb).sum() / denom
    mean = float(np.mean(list(scores.values()))) if scores else float("nan")
    return scores, mean


def warp_labels(labels, d):
    """Nearest-neighbour pull-back of an integer label volume."""
    labels = np.asarray(labels)
    disp = d.disp if isinstance(d, DeformationField) else d
    disp = np.asarray(disp)
    if dims_of(disp) != labels.shape:
        raise GeometryError(f"labels {labels.shape} vs field {dims_of(disp)}")
    coords = identity_grid(labels.shape) + disp
    idx = []
    for a, n in enumerate(labels.shape):
        idx.append(np.clip(np.rint(coords[a]), 0, n - 1).astype(np.intp))
    return labels[tuple(idx)]


def interior_mask(dims, margin=4):
    m = np.zeros(dims, bool)
    m[tuple(slice(margin, n - margin) for n in dims)] = True
    return m


def endpoint_error(est, gt, mask=None):
    """Mean and max Euclidean distance between displacement vectors over ``mask``."""
    e = np.asarray(est.disp if isinstance(est, DeformationField) else est)
    g = np.asarray(gt.disp if isinstance(gt, DeformationField) else gt)
    if e.shape != g.shape:
        raise GeometryError(f"fields of shapes {e.shape} and {g.shape}")
    if mask is None:
        mask = interior_mask(e.shape[1:])
    dist = np.sqrt(((e - g) ** 2).sum(axis=0))[mask]
    return float(dist.mean()), float(dist.max())


@dataclass
class SynthPair:
    fixed: np.ndarray
    moving: np.ndarray
    svf: np.ndarray
    disp: np.ndarray
    fixed_labels: np.ndarray
    moving_labels: np.ndarray
    seed: int


def blob_template(rng, dims, blobs, size_range=(0.04, 0.08)):
    """Sum of Gaussian blobs; each blob's half-maximum core carries its own label."""
    dims = tuple(dims)
    grid = identity_grid(dims)
    size = min(dims)
    img = np.zeros(dims)
    best = np.zeros(dims)
    labels = np.zeros(dims, np.uint16)
    for k in range(blobs):
        sigma = rng.uniform(*size_range) * size
        center = [rng.uniform(0.1 * n, 0.9 * n - 1) for n in dims]
        amp = rng.uniform(0.5, 1.0)
        r2 = sum((grid[a] - center[a]) ** 2 for a in range(len(dims)))
        g = amp * np.exp(-r2 / (2 * sigma ** 2))
        img += g
        core = (g > 0.5 * amp) & (g > best)
        labels[core] = k + 1
        best = np.maximum(best, np.where(g > 0.5 * amp, g, 0.0))
    return img, labels


def random_svf(rng, dims, magnitude, smoothness=None):
    """Gaussian-smoothed white noise rescaled to a maximum vector norm of ``magnitude``."""
    dims = tuple(dims)
    d = len(dims)
    if magnitude == 0:
        return np.zeros((d,) + dims)
    smoothness = min(dims) / 8.0 if smoothness is None else smoothness
    noise = rng.standard_normal((d,) + dims)
    v = np.stack([ndimage.gaussian_filter(noise[c], smoothness, mode="wrap") for c in range(d)])
    norm = np.sqrt((v ** 2).sum(axis=0)).max()
    return v * (magnitude / norm)


def synth_pair(seed, dims=(32, 32, 32), magnitude=4.0, blobs=40, noise=0.0, steps=7,
               template=None, max_tries=20):
    """Fixed image = template warped by the flow of a random smooth SVF; moving = template."""
    dims = tuple(int(n) for n in dims)
    if min(dims) < 16:
        raise ValueError(f"synthetic pairs need at least 16 voxels per axis, got {dims}")
    if magnitude > min(dims) / 8:
        raise ValueError(f"magnitude {magnitude} exceeds dims/8 for {dims}")
    rng = np.random.default_rng(seed)
    img, labels = blob_template(rng, dims, blobs) if template is None else template
    for _ in range(max_tries):
        svf = random_svf(rng, dims, magnitude)
        phi = integrate_svf(svf, steps)
        if count_nonpositive_jacobian(phi) == 0:
            break
    else:
        raise GenerationError(f"no fold-free field of magnitude {magnitude} after {max_tries} draws")
    fixed = warp(img, phi.disp)
    moving = img.copy()
    if noise > 0:
        fixed = fixed + noise * rng.standard_normal(dims)
        moving = moving + noise * rng.standard_normal(dims)
    return SynthPair(fixed, moving, svf, phi.disp, warp_labels(labels, phi), labels, seed)


def synth_suite(n, seed=0, shared_template=False, **kw):
    """Pairs for seeds ``seed .. seed + n - 1``.

    With ``shared_template`` every pair deforms one template drawn from ``seed``,
    so all moving images (and moving labels) are that template.
    """
    if shared_template:
        dims = tuple(kw.get("dims", (32, 32, 32)))
        kw["template"] = blob_template(np.random.default_rng([seed, 1]), dims, kw.pop("blobs", 40))
    return [synth_pair(seed + i, **kw) for i in range(n)]
