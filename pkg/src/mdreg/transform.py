"""Diffeomorphic transform algebra on displacement fields.

A deformation maps ``x -> x + disp(x)``. Composition follows the pull-back
order: ``compose(a, b)`` applies ``b`` first, so ``(a o b)(x) = a(b(x))``.
"""

from dataclasses import dataclass
from typing import Any

import numpy as np

from .autodiff import neg, scale, value
from .fields import GeometryError, dims_of, identity_grid, resample


@dataclass(frozen=True)
class DeformationField:
    disp: Any  # ndarray or Var of shape (d, *dims)
    provenance: str = "external"

    @property
    def dims(self):
        return dims_of(self.disp)

    @classmethod
    def identity(cls, dims):
        dims = tuple(dims)
        return cls(np.zeros((len(dims),) + dims), "external")


def compose(a, b):
    """Displacement of ``a o b``: ``b.disp(x) + a.disp(x + b.disp(x))``."""
    if a.dims != b.dims:
        raise GeometryError(f"cannot compose fields on {a.dims} and {b.dims}")
    coords = identity_grid(b.dims) + b.disp
    return DeformationField(b.disp + resample(a.disp, coords), "composed")


def integrate_svf(v, steps=7):
    """Scaling and squaring: halve ``v`` ``steps`` times, then self-compose ``steps`` times."""
    if steps < 1:
        raise ValueError("need at least one integration step")
    dims_of(v)
    d = DeformationField(scale(v, 1.0 / 2 ** steps), "integrated-from-SVF")
    for _ in range(steps):
        d = compose(d, d)
    return DeformationField(d.disp, "integrated-from-SVF")


def invert_svf(v, steps=7):
    """Inverse deformation as the flow of the negated velocity."""
    return integrate_svf(neg(v), steps)


def jacobian_determinant(d):
    """Determinant of the Jacobian of ``x + disp(x)``.

    Central differences in the interior, one-sided at the borders.
    """
    disp = value(d.disp if isinstance(d, DeformationField) else d)
    dims = disp.shape[1:]
    if min(dims) < 3:
        raise ValueError(f"jacobian needs at least 3 voxels per axis, got {dims}")
    nd = len(dims)
    J = np.empty(dims + (nd, nd))
    for c in range(nd):
        grads = np.gradient(disp[c], axis=tuple(range(nd)))
        if nd == 1:
            grads = [grads]
        for a in range(nd):
            J[..., c, a] = grads[a] + (1.0 if a == c else 0.0)
    return np.linalg.det(J)


def count_nonpositive_jacobian(d):
    return int(np.count_nonzero(jacobian_determinant(d) <= 0))
