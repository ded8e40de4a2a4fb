from types import SimpleNamespace

import numpy as np
import pytest

from helpers import smooth_field
from mdreg import engine
from mdreg.autodiff import Parameter
from mdreg.engine import (DEFAULT_LAMBDAS, Adam, NumericalAbort, RegistrationConfig, gradient_free, lambda_sweep,
                          register, train)
from mdreg.evalsynth import synth_pair
from mdreg.fields import ConfigurationError
from mdreg.objective import ncc
from mdreg.transform import DeformationField, compose, integrate_svf


def small_cfg(**kw):
    base = dict(levels=2, iterations=10, width=0.25, seed=0)
    base.update(kw)
    return RegistrationConfig(**base)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"levels": 0}, {"lam": -1.0}, {"steps": 0}, {"lr": 0.0},
                                    {"mode": "both"}, {"batch": 2}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            RegistrationConfig(**kw)

    def test_round_trip_and_digest(self):
        cfg = RegistrationConfig(lam=0.5, mode="direct")
        again = RegistrationConfig.from_dict(cfg.to_dict())
        assert again == cfg and again.digest() == cfg.digest()
        assert cfg.replace(lam=0.35).digest() != cfg.digest()

    def test_unknown_key(self):
        with pytest.raises(ConfigurationError):
            RegistrationConfig.from_dict({"levels": 2, "depth": 9})

    def test_defaults(self):
        cfg = RegistrationConfig()
        assert (cfg.levels, cfg.steps, cfg.sigma, cfg.ksize, cfg.lr) == (3, 7, 1.732, 3, 1e-4)
        assert (cfg.beta1, cfg.beta2, cfg.eps, cfg.iterations) == (0.9, 0.999, 1e-8, 150000)
        assert DEFAULT_LAMBDAS == (0.1, 0.2, 0.35, 0.5, 0.75, 1.0)
        assert cfg.replace(smoothing_enabled=False).smoothing is None


class TestAdam:
    def test_zero_gradient_is_a_no_op(self, rng):
        p = Parameter(rng.standard_normal((3, 4)))
        before = p.value.copy()
        opt = Adam([p], 0.1)
        for _ in range(3):
            opt.zero_grad()
            opt.step()
        np.testing.assert_array_equal(p.value, before)

    def test_matches_reference_update(self, rng):
        x0 = rng.standard_normal(5)
        p = Parameter(x0.copy())
        opt = Adam([p], 0.01)
        m = v = np.zeros(5)
        x = x0.copy()
        for t in range(1, 4):
            g = rng.standard_normal(5)
            p.grad = g.copy()
            opt.step()
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            x = x - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p.value, x, rtol=1e-13)

    def test_snapshot_restore(self, rng):
        p = Parameter(rng.standard_normal(4))
        opt = Adam([p], 0.1)
        p.grad = np.ones(4)
        opt.step()
        snap = opt.snapshot()
        kept = p.value.copy()
        p.grad = -np.ones(4)
        opt.step()
        opt.restore(snap)
        np.testing.assert_array_equal(p.value, kept)
        assert opt.t == 1


class TestTrain:
    def test_history_length_and_reproducible(self, rng):
        imgs = [smooth_field(rng, (16, 16), 1.0, 2.0)[0] for _ in range(2)]
        cfg = small_cfg(iterations=6, lr=1e-3)
        p1, h1 = train(imgs, cfg)
        p2, h2 = train(imgs, cfg)
        assert len(h1) == 6
        assert h1 == h2
        a, b = p1.named_arrays(), p2.named_arrays()
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_self_pair_stays_at_identity(self, rng):
        img = smooth_field(rng, (16, 16, 16), 1.0, 2.0)[0]
        params, hist = train([img], small_cfg(iterations=15, lr=1e-3))
        assert hist[-1] == pytest.approx(-4.0, abs=1e-6)
        res = register(params, img, img, small_cfg())
        assert np.abs(res.forward.disp).max() < 0.25

    def test_uneven_dims(self):
        with pytest.raises(ConfigurationError):
            train([np.zeros((16, 16)), np.zeros((16, 18))], small_cfg())

    def test_nonfinite_aborts_with_term(self):
        img = np.zeros((16, 16))
        img[3, 3] = np.nan
        with pytest.raises(NumericalAbort, match="level"):
            train([img], small_cfg(iterations=1))


class TestRegister:
    def test_self_registration_direct(self, rng):
        img = smooth_field(rng, (16, 16, 16), 1.0, 2.0)[0]
        res = register(None, img, img, small_cfg(mode="direct", iterations=20))
        assert float(ncc(img, res.warped)) >= 0.999
        assert np.abs(res.forward.disp).max() < 0.25

    def test_result_fields(self):
        pair = synth_pair(3, dims=(24, 24), magnitude=3.0, blobs=12)
        res = register(None, pair.fixed, pair.moving, small_cfg(mode="direct", iterations=30))
        np.testing.assert_array_equal(res.inverse.disp, integrate_svf(-res.svf, 7).disp)
        assert res.folds >= 0 and res.seconds > 0
        assert len(res.increments) == len(res.accumulated) == 2
        assert len(res.history) == 30

    @pytest.mark.xfail(strict=True, reason="registered fields are rougher than the smooth family the "
                       "0.05-voxel inverse bound holds for; the residual is ~0.15 voxels")
    def test_result_inverse_consistency_3d(self):
        pair = synth_pair(3)
        res = register(None, pair.fixed, pair.moving, RegistrationConfig(mode="direct", iterations=100))
        both = compose(res.forward, res.inverse).disp
        assert np.abs(both[:, 4:-4, 4:-4, 4:-4]).max() < 0.05

    def test_direct_history_never_rises(self):
        pair = synth_pair(5, dims=(32, 32), magnitude=4.0, blobs=20)
        hist = register(None, pair.fixed, pair.moving, small_cfg(mode="direct", levels=3, iterations=120)).history
        assert all(b <= a + 1e-6 for a, b in zip(hist, hist[1:]))
        assert hist[-1] < hist[0]

    def test_network_mode_is_gradient_free(self, rng):
        imgs = [rng.standard_normal((16, 16)) for _ in range(2)]
        cfg = small_cfg()
        params = engine.init_params(cfg.spec(2), (16, 16), 0)
        res = gradient_free(register, params, imgs[0], imgs[1], cfg)
        assert not res.history and res.folds == 0

    def test_network_mode_needs_params(self):
        with pytest.raises(ConfigurationError):
            register(None, np.zeros((16, 16)), np.zeros((16, 16)), small_cfg())

    def test_gradient_free_detects_recording(self):
        from mdreg.autodiff import Tape, mul

        def taped():
            with Tape():
                mul(Parameter(np.ones(2)), 2.0)

        with pytest.raises(AssertionError):
            gradient_free(taped)


def _fake_register(shift_by_lam, folds_by_lam):
    """Stand-in for ``register`` whose label warp and fold count depend only on lambda."""

    def fake(params, fixed, moving, cfg):
        dims = fixed.shape
        shift = np.zeros((len(dims),) + dims)
        shift[0] = shift_by_lam[cfg.lam]
        return SimpleNamespace(forward=DeformationField(shift), folds=folds_by_lam[cfg.lam])

    return fake


class TestSweep:
    def _data(self):
        lab = np.zeros((12, 12), np.uint16)
        lab[3:7, 3:7] = 1
        return [np.zeros((12, 12))] * 2, [lab, lab], np.zeros((12, 12)), lab

    def test_tie_goes_to_smallest_lambda(self, monkeypatch):
        vals, labs, tmpl, tlab = self._data()
        monkeypatch.setattr(engine, "register", _fake_register({l: 0.0 for l in DEFAULT_LAMBDAS},
                                                               {l: 0 for l in DEFAULT_LAMBDAS}))
        res = lambda_sweep([], vals, labs, tmpl, tlab, small_cfg(mode="direct"))
        assert len(res.rows) == 6
        assert [r.lam for r in res.rows] == list(DEFAULT_LAMBDAS)
        assert res.selected == 0.1 and not res.flagged
        assert all(r.dice == 1.0 and r.total_folds == 0 for r in res.rows)

    def test_folds_exclude_lambda(self, monkeypatch):
        vals, labs, tmpl, tlab = self._data()
        shifts = {0.1: 0.0, 0.2: 0.0, 0.35: 1.0, 0.5: 0.0, 0.75: 1.0, 1.0: 2.0}
        folds = {0.1: 3, 0.2: 1, 0.35: 0, 0.5: 0, 0.75: 0, 1.0: 0}
        monkeypatch.setattr(engine, "register", _fake_register(shifts, folds))
        res = lambda_sweep([], vals, labs, tmpl, tlab, small_cfg(mode="direct"))
        assert res.selected == 0.5 and not res.flagged
        assert res.rows[0].total_folds == 6 and res.rows[0].folds == 3.0

    def test_all_folding_is_flagged(self, monkeypatch):
        vals, labs, tmpl, tlab = self._data()
        folds = {0.1: 5, 0.2: 2, 0.35: 2, 0.5: 4, 0.75: 3, 1.0: 9}
        monkeypatch.setattr(engine, "register", _fake_register({l: 0.0 for l in DEFAULT_LAMBDAS}, folds))
        res = lambda_sweep([], vals, labs, tmpl, tlab, small_cfg(mode="direct"))
        assert res.flagged and res.selected == 0.2

    def test_empty_inputs(self):
        with pytest.raises(ConfigurationError):
            lambda_sweep([], [], [], None, None, small_cfg(mode="direct"))
        with pytest.raises(ConfigurationError):
            lambda_sweep([], [np.zeros((4, 4))], [np.zeros((4, 4))], None, None, small_cfg(mode="direct"),
                         lambdas=())

    def test_real_direct_sweep_rows(self):
        pairs = [synth_pair(s, dims=(16, 16), magnitude=2.0, blobs=8) for s in range(2)]
        res = lambda_sweep([], [p.fixed for p in pairs], [p.fixed_labels for p in pairs],
                           pairs[0].moving, pairs[0].moving_labels, small_cfg(mode="direct", iterations=3),
                           lambdas=(0.2, 0.5))
        assert [r.lam for r in res.rows] == [0.2, 0.5]
        assert all(0 <= r.dice <= 1 for r in res.rows)
