import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from scipy import ndimage

from mdreg.fields import (ConfigurationError, DegenerateInputError, GeometryError, avg_pool_down, build_pyramid,
                          gaussian_smooth, gaussian_weights, identity_grid, sample_linear, upsample_linear, warp)


def pool_oracle(v):
    """Loop-by-loop 3-wide stride-2 mean with shrunk border windows."""
    out = np.zeros(tuple(-(-n // 2) for n in v.shape))
    for idx in np.ndindex(out.shape):
        sl = tuple(slice(max(2 * j - 1, 0), min(2 * j + 2, n)) for j, n in zip(idx, v.shape))
        out[idx] = v[sl].mean()
    return out


class TestPool:
    def test_constant(self):
        out = avg_pool_down(np.full((8, 8, 8), 2.5))
        assert out.shape == (4, 4, 4)
        np.testing.assert_allclose(out, 2.5, rtol=0, atol=1e-15)

    def test_odd_dims(self):
        assert avg_pool_down(np.zeros((9, 9, 9))).shape == (5, 5, 5)

    def test_ramp_interior_is_2j(self):
        out = avg_pool_down(np.arange(9, dtype=float))
        np.testing.assert_allclose(out[1:-1], 2.0 * np.arange(1, 4), atol=1e-14)
        # border windows shrink: (0+1)/2 and (7+8)/2
        assert out[0] == pytest.approx(0.5)
        assert out[-1] == pytest.approx(7.5)

    def test_matches_loop_oracle(self, rng):
        for shape in [(7, 6, 5), (9, 4), (16, 16, 16)]:
            v = rng.standard_normal(shape)
            np.testing.assert_allclose(avg_pool_down(v), pool_oracle(v), atol=1e-13)

    def test_linearity(self, rng):
        v = rng.standard_normal((10, 11, 12))
        np.testing.assert_allclose(avg_pool_down(3.7 * v), 3.7 * avg_pool_down(v), rtol=1e-14, atol=1e-14)

    def test_too_small(self):
        with pytest.raises(DegenerateInputError):
            avg_pool_down(np.zeros((2, 8, 8)))


class TestPyramid:
    def test_dims(self):
        pyr = build_pyramid(np.zeros((64, 64, 64)), 4)
        assert [p.shape for p in pyr] == [(8,) * 3, (16,) * 3, (32,) * 3, (64,) * 3]

    def test_single_level(self, rng):
        v = rng.standard_normal((8, 8))
        pyr = build_pyramid(v, 1)
        assert len(pyr) == 1 and pyr[0] is v

    def test_constant(self):
        for level in build_pyramid(np.full((32, 32), -1.5), 3):
            np.testing.assert_allclose(level, -1.5, atol=1e-14)

    def test_too_deep(self):
        with pytest.raises(ConfigurationError):
            build_pyramid(np.zeros((16, 16, 16)), 4)


class TestSampling:
    def test_integer_coords_exact(self, rng):
        v = rng.standard_normal((5, 6, 7))
        np.testing.assert_array_equal(sample_linear(v, identity_grid(v.shape)), v)

    def test_midpoint(self):
        out = sample_linear(np.array([0.0, 1.0]), np.array([[0.5]]))
        assert out[0] == 0.5

    def test_clamp(self, rng):
        v = rng.standard_normal((4, 5, 6))
        q = rng.uniform(0, 3, size=(3, 20))
        q2 = q.copy()
        q2[1] = -3.7
        q[1] = 0.0
        np.testing.assert_array_equal(sample_linear(v, q2), sample_linear(v, q))

    def test_matches_scipy(self, rng):
        v = rng.standard_normal((6, 7, 8))
        q = rng.uniform(-2, 9, size=(3, 200))
        ref = ndimage.map_coordinates(v, q, order=1, mode="nearest")
        np.testing.assert_allclose(sample_linear(v, q), ref, atol=1e-12)

    def test_geometry_mismatch(self):
        with pytest.raises(GeometryError):
            sample_linear(np.zeros((4, 4)), np.zeros((3, 5)))

    @given(hnp.arrays(np.float64, (4, 4, 4), elements=st.floats(-10, 10)),
           hnp.arrays(np.float64, (3, 8), elements=st.floats(-2, 6)))
    def test_stencil_bounds(self, v, q):
        out = sample_linear(v, q)
        qc = np.clip(q, 0, 3)
        lo = np.minimum(np.floor(qc), 2).astype(int)
        for k in range(q.shape[1]):
            stencil = v[lo[0, k]:lo[0, k] + 2, lo[1, k]:lo[1, k] + 2, lo[2, k]:lo[2, k] + 2]
            assert stencil.min() - 1e-12 <= out[k] <= stencil.max() + 1e-12

    @given(hnp.arrays(np.float64, (2, 6), elements=st.floats(-20, 20)))
    def test_clamp_idempotent(self, q):
        v = np.arange(20.0).reshape(4, 5)
        qc = np.clip(q, 0, np.array([[3], [4]]))
        np.testing.assert_array_equal(sample_linear(v, q), sample_linear(v, qc))


class TestWarp:
    def test_zero_is_identity(self, rng):
        v = rng.standard_normal((6, 7, 8))
        np.testing.assert_array_equal(warp(v, np.zeros((3, 6, 7, 8))), v)

    def test_unit_shift_oracle(self, rng):
        v = rng.standard_normal((8, 8, 8))
        disp = np.zeros((3, 8, 8, 8))
        disp[0] = -1.0
        out = warp(v, disp)
        np.testing.assert_allclose(out[1:], v[:-1], atol=1e-14)

    def test_constant_volume(self, rng):
        disp = 3 * rng.standard_normal((2, 9, 9))
        np.testing.assert_allclose(warp(np.full((9, 9), 4.0), disp), 4.0, atol=1e-14)

    def test_geometry(self):
        with pytest.raises(GeometryError):
            warp(np.zeros((4, 4, 4)), np.zeros((3, 4, 4, 5)))

    @given(hnp.arrays(np.float64, (5, 6), elements=st.floats(-100, 100)))
    def test_identity_property(self, v):
        np.testing.assert_array_equal(warp(v, np.zeros((2, 5, 6))), v)


class TestGaussian:
    def test_weights(self):
        w = gaussian_weights(1.732, 3)
        e = np.exp(-1 / (2 * 1.732 ** 2))
        np.testing.assert_allclose(w, np.array([e, 1, e]) / (1 + 2 * e), rtol=1e-15)
        # frozen from an independent evaluation of the formula (sigma**2 = 2.9998)
        np.testing.assert_allclose(w, [0.31432979579323, 0.37134040841353, 0.31432979579323], atol=1e-13)

    def test_constant_unchanged(self):
        f = np.full((3, 6, 6, 6), 2.0)
        np.testing.assert_allclose(gaussian_smooth(f), f, atol=1e-14)

    def test_impulse_is_outer_product(self):
        f = np.zeros((3, 9, 9, 9))
        f[1, 4, 4, 4] = 1.0
        w = gaussian_weights(1.732, 3)
        ref = np.zeros((9, 9, 9))
        ref[3:6, 3:6, 3:6] = np.einsum("i,j,k->ijk", w, w, w)
        out = gaussian_smooth(f)
        np.testing.assert_allclose(out[1], ref, atol=1e-15)
        assert not out[0].any() and not out[2].any()

    def test_matches_scipy_nearest(self, rng):
        f = rng.standard_normal((2, 7, 9))
        w = gaussian_weights(1.732, 3)
        ref = np.stack([ndimage.correlate1d(ndimage.correlate1d(c, w, axis=0, mode="nearest"),
                                            w, axis=1, mode="nearest") for c in f])
        np.testing.assert_allclose(gaussian_smooth(f), ref, atol=1e-14)

    def test_mean_preserved_with_constant_border(self, rng):
        f = np.zeros((2, 12, 12))
        f[:, 3:9, 3:9] = rng.standard_normal((2, 6, 6))
        np.testing.assert_allclose(gaussian_smooth(f).mean(axis=(1, 2)), f.mean(axis=(1, 2)), atol=1e-14)

    def test_even_kernel(self):
        with pytest.raises(ConfigurationError):
            gaussian_smooth(np.zeros((2, 5, 5)), 1.0, 4)


class TestUpsample:
    def test_constant_doubles(self):
        out = upsample_linear(np.full((3, 4, 4, 4), 0.7), (8, 8, 8))
        assert out.shape == (3, 8, 8, 8)
        np.testing.assert_allclose(out, 1.4, atol=1e-15)

    def test_zero(self):
        out = upsample_linear(np.zeros((2, 5, 6)), (9, 11))
        assert out.shape == (2, 9, 11) and not out.any()

    def test_three_to_five(self):
        out = upsample_linear(np.array([[0.0, 1.0, 2.0]]), (5,))
        # the per-axis scale factor is 2 here; undo it to see the interpolated samples
        np.testing.assert_allclose(out[0] / 2.0, [0, 0.5, 1, 1.5, 2], atol=1e-15)

    def test_target_smaller(self):
        with pytest.raises(GeometryError):
            upsample_linear(np.zeros((2, 8, 8)), (4, 8))

    def test_pool_centred_mapping(self):
        # 8 -> 4 pooling puts coarse j at fine 2j, so fine i reads coarse i/2
        coarse = np.arange(4.0)[None]
        out = upsample_linear(coarse, (8,))[0] / 2.0
        np.testing.assert_allclose(out, [0, 0.5, 1, 1.5, 2, 2.5, 3, 3])

    def test_non_halving_is_corner_aligned(self):
        # 4 does not ceil-halve to 3, so the end voxels are aligned and the factor is 3/2
        out = upsample_linear(np.array([[0.0, 1.0, 2.0]]), (4,))[0]
        np.testing.assert_allclose(out / 1.5, [0, 2 / 3, 4 / 3, 2], atol=1e-15)
