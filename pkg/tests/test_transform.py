import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from helpers import interior, smooth_field
from mdreg.fields import GeometryError, identity_grid
from mdreg.transform import (DeformationField, compose, count_nonpositive_jacobian, integrate_svf, invert_svf,
                             jacobian_determinant)


def euler_flow(v, substeps=1024):
    """Forward-Euler flow of dx/dt = v(x) with scipy linear interpolation at every substep."""
    dims = v.shape[1:]
    x = identity_grid(dims).reshape(len(dims), -1).copy()
    for _ in range(substeps):
        x += np.stack([ndimage.map_coordinates(c, x, order=1, mode="nearest") for c in v]) / substeps
    return x.reshape(v.shape) - identity_grid(dims)


def constant(c, dims):
    return np.broadcast_to(np.reshape(c, (-1,) + (1,) * len(dims)), (len(dims),) + tuple(dims)).copy()


def folding_field(n=12):
    """Two opposing translations meeting at the middle plane of axis 0."""
    d = np.zeros((3, n, n, n))
    d[0, : n // 2] = 2.0
    d[0, n // 2:] = -2.0
    return DeformationField(d)


class TestIntegrate:
    def test_zero_is_identity(self):
        d = integrate_svf(np.zeros((3, 6, 7, 8)))
        assert not d.disp.any()
        assert d.provenance == "integrated-from-SVF"

    def test_constant_is_translation(self):
        c = [1.5, -0.75, 0.4]
        d = integrate_svf(constant(c, (16, 16, 16)))
        np.testing.assert_allclose(interior(d.disp, 3), constant(c, (10, 10, 10)), atol=1e-10)

    def test_small_field_matches_euler(self, rng):
        v = smooth_field(rng, (16, 16, 16), 0.5)
        ref = euler_flow(v)
        assert np.abs(interior(integrate_svf(v).disp - ref, 3)).max() < 1e-3

    def test_steps_convergence(self, rng):
        v = smooth_field(rng, (24, 24, 24), 2.0)
        a, b = integrate_svf(v, 7).disp, integrate_svf(v, 8).disp
        assert np.abs(a - b).max() < 1e-3

    def test_half_time_group_property(self, rng):
        v = smooth_field(rng, (24, 24, 24), 2.0)
        half = integrate_svf(v / 2)
        np.testing.assert_array_less(np.abs(interior(compose(half, half).disp - integrate_svf(v).disp, 4)), 1e-2)

    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            integrate_svf(np.zeros((2, 4, 4)), 0)


class TestCompose:
    def test_identity_is_neutral(self, rng):
        b = DeformationField(rng.standard_normal((3, 6, 6, 6)))
        e = DeformationField.identity((6, 6, 6))
        np.testing.assert_array_equal(compose(e, b).disp, b.disp)
        np.testing.assert_array_equal(compose(b, e).disp, b.disp)

    def test_translations_add(self):
        dims = (12, 12, 12)
        a = DeformationField(constant([1.0, 0.5, -0.25], dims))
        b = DeformationField(constant([-0.5, 1.25, 0.75], dims))
        out = compose(a, b)
        assert out.provenance == "composed"
        np.testing.assert_allclose(interior(out.disp, 2), constant([0.5, 1.75, 0.5], (8, 8, 8)), atol=1e-12)

    def test_order_is_pull_back(self):
        # a is a shear depending on axis 1, b a translation along axis 1
        n = 10
        grid = identity_grid((n, n))
        a = DeformationField(np.stack([0.1 * grid[1], np.zeros((n, n))]))
        b = DeformationField(np.stack([np.zeros((n, n)), np.ones((n, n))]))
        out = compose(a, b).disp
        # a(b(x)) moves axis 0 by 0.1 * (x1 + 1)
        np.testing.assert_allclose(out[0, :, : n - 1], 0.1 * (grid[1] + 1)[:, : n - 1], atol=1e-12)

    def test_associativity(self, rng):
        # interpolation breaks exact associativity; the gap grows with field magnitude
        f = [DeformationField(smooth_field(rng, (32, 32, 32), 1.0)) for _ in range(3)]
        left = compose(compose(f[0], f[1]), f[2]).disp
        right = compose(f[0], compose(f[1], f[2])).disp
        assert np.abs(interior(left - right, 4)).max() < 1e-2

    def test_geometry_mismatch(self):
        with pytest.raises(GeometryError):
            compose(DeformationField.identity((4, 4)), DeformationField.identity((4, 5)))


class TestInverse:
    def test_zero(self):
        assert not invert_svf(np.zeros((2, 5, 5))).disp.any()

    def test_constant(self):
        d = invert_svf(constant([1.0, -2.0], (16, 16)))
        np.testing.assert_allclose(interior(d.disp, 3), constant([-1.0, 2.0], (10, 10)), atol=1e-10)

    def test_is_negated_flow(self, rng):
        v = smooth_field(rng, (8, 9, 10), 1.0)
        np.testing.assert_array_equal(invert_svf(v, 5).disp, integrate_svf(-v, 5).disp)

    def test_inverse_consistency_2d(self, rng):
        v = smooth_field(rng, (48, 48), 3.0)
        both = compose(integrate_svf(v), invert_svf(v)).disp
        assert np.abs(interior(both, 6)).max() < 0.05


class TestJacobian:
    def test_identity(self):
        np.testing.assert_array_equal(jacobian_determinant(DeformationField.identity((5, 5, 5))), 1.0)

    def test_linear_scaling(self):
        d = 0.1 * identity_grid((7, 7, 7))
        np.testing.assert_allclose(jacobian_determinant(d), 1.331, rtol=1e-12)

    def test_folding_field(self):
        f = folding_field()
        det = jacobian_determinant(f)
        assert (det <= 0).any()
        # brute force: the axis-0 map jumps back from x + 2 to x - 2 across the plane
        x = np.arange(12) + f.disp[0, :, 0, 0]
        assert (np.diff(x) < 0).any()
        assert count_nonpositive_jacobian(f) > 0

    def test_counts(self):
        assert count_nonpositive_jacobian(DeformationField.identity((6, 6, 6))) == 0

    @given(st.lists(st.floats(-20, 20), min_size=3, max_size=3))
    def test_translation_is_exactly_one(self, c):
        d = constant(c, (5, 6, 4))
        np.testing.assert_array_equal(jacobian_determinant(d), 1.0)
        assert count_nonpositive_jacobian(d) == 0

    def test_2d_matches_manual(self, rng):
        d = rng.standard_normal((2, 6, 7)) * 0.3
        det = jacobian_determinant(d)
        i, j = 3, 4
        a = 1 + (d[0, i + 1, j] - d[0, i - 1, j]) / 2
        b = (d[0, i, j + 1] - d[0, i, j - 1]) / 2
        c = (d[1, i + 1, j] - d[1, i - 1, j]) / 2
        e = 1 + (d[1, i, j + 1] - d[1, i, j - 1]) / 2
        assert det[i, j] == pytest.approx(a * e - b * c, rel=1e-12)

    def test_too_small(self):
        with pytest.raises(ValueError):
            jacobian_determinant(np.zeros((2, 2, 5)))
