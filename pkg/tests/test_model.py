"""Disparity and occlusion networks, parameter init, checkpoints."""

import numpy as np
import pytest

from stereoadapt import autodiff as ad
from stereoadapt import losses, model
from stereoadapt.autodiff import Tensor


SMALL = model.StereoNetConfig(
    feature_channels=8, feature_layers=2, max_disparity=8, reg_layers=2, cost_norm=True
)


def rgb_pair_with_shift(rng, h, w, shift):
    """I_r(u) = I_l(u + shift) exactly; random high-frequency texture."""
    canvas = rng.random((3, h, w + shift))
    i_l = canvas[:, :, :w][None]
    i_r = canvas[:, :, shift:][None]
    return Tensor(i_l), Tensor(i_r)


class TestInitParams:
    def test_same_seed_bit_identical(self):
        a = model.init_params(SMALL, seed=3)
        b = model.init_params(SMALL, seed=3)
        assert a.keys() == b.keys()
        for k in a:
            assert np.array_equal(a[k].data, b[k].data), k

    def test_different_seeds_differ(self):
        a = model.init_params(SMALL, seed=3)
        b = model.init_params(SMALL, seed=4)
        assert any(not np.array_equal(a[k].data, b[k].data) for k in a)

    def test_he_variance(self):
        cfg = model.StereoNetConfig(feature_channels=32, feature_layers=2)
        params = model.init_params(cfg, seed=5)
        w = params["disp.feat.1.w"].data  # (32, 32, 3, 3), fan_in 288
        target = 2.0 / 288.0
        assert abs(w.var() / target - 1.0) < 0.2

    def test_biases_zero_and_shapes(self):
        params = model.init_params(SMALL, seed=0)
        assert np.array_equal(params["disp.feat.0.b"].data, np.zeros((1, 8, 1, 1)))
        assert params["disp.feat.0.w"].shape == (8, 3, 3, 3)
        assert params["disp.reg.0.w"].shape == (8, 8, 3, 3)
        assert params["occ.2.w"].shape == (1, 8, 3, 3)

    def test_bad_config_rejected(self):
        with pytest.raises(ValueError):
            model.StereoNetConfig(max_disparity=0)
        with pytest.raises(ValueError):
            model.OcclusionNetConfig(layers=0)


class TestExtractFeatures:
    def test_siamese_identical_inputs(self):
        rng = np.random.default_rng(6)
        params = model.init_params(SMALL, seed=1)
        img = Tensor(rng.random((1, 3, 6, 10)))
        fa = model.extract_features(img, params, SMALL)
        fb = model.extract_features(Tensor(img.data.copy()), params, SMALL)
        assert np.array_equal(fa.data, fb.data)

    def test_default_output_shape(self):
        cfg = model.StereoNetConfig()
        params = model.init_params(cfg, seed=2)
        img = Tensor(np.random.default_rng(7).random((2, 3, 5, 16)))
        out = model.extract_features(img, params, cfg)
        assert out.shape == (2, 16, 5, 16)

    def test_translation_equivariance_interior(self):
        rng = np.random.default_rng(8)
        params = model.init_params(SMALL, seed=3)
        w, s = 20, 2
        base = rng.random((1, 3, 6, w))
        shifted = np.zeros_like(base)
        shifted[:, :, :, s:] = base[:, :, :, : w - s]
        fa = model.extract_features(Tensor(base), params, SMALL).data
        fb = model.extract_features(Tensor(shifted), params, SMALL).data
        # receptive radius is 2; stay clear of both borders and the seam
        margin = s + 3
        assert np.allclose(
            fb[:, :, :, margin + s : w - margin + s - s],
            fa[:, :, :, margin : w - margin - s],
            atol=1e-12,
        )


class TestForwardDisparity:
    def test_output_range_any_params(self):
        rng = np.random.default_rng(9)
        params = model.init_params(SMALL, seed=4)
        # distort parameters wildly; bounds must still hold
        for k, p in params.items():
            p.data = p.data * 37.0 + 0.5
        i_l = Tensor(rng.random((1, 3, 5, 12)))
        i_r = Tensor(rng.random((1, 3, 5, 12)))
        d = model.forward_disparity(i_l, i_r, params, SMALL)
        assert d.shape == (1, 1, 5, 12)
        assert np.all(d.data >= 0.0) and np.all(d.data <= SMALL.max_disparity - 1)

    def test_zero_params_give_symmetric_mean(self):
        params = model.init_params(SMALL, seed=5)
        for p in params.values():
            p.data = np.zeros_like(p.data)
        rng = np.random.default_rng(10)
        i_l = Tensor(rng.random((1, 3, 4, 10)))
        i_r = Tensor(rng.random((1, 3, 4, 10)))
        d = model.forward_disparity(i_l, i_r, params, SMALL)
        expect = (SMALL.max_disparity - 1) / 2.0
        assert np.max(np.abs(d.data - expect)) < 1e-12

    def test_narrow_image_rejected(self):
        params = model.init_params(SMALL, seed=6)
        img = ad.zeros((1, 3, 4, 6))
        with pytest.raises(ValueError, match="width"):
            model.forward_disparity(img, img, params, SMALL)

    def test_scale_invariance_with_cost_norm(self):
        rng = np.random.default_rng(11)
        params = model.init_params(SMALL, seed=7)
        i_l = Tensor(rng.random((1, 3, 5, 12)))
        i_r = Tensor(rng.random((1, 3, 5, 12)))
        base = model.forward_disparity(i_l, i_r, params, SMALL).data
        scaled = model.forward_disparity(
            i_l, i_r, params, SMALL, feature_hook=lambda t: t * 7.3
        ).data
        assert np.max(np.abs(base - scaled)) < 1e-9

    def test_scale_sensitivity_without_cost_norm(self):
        cfg = model.StereoNetConfig(
            feature_channels=8, feature_layers=2, max_disparity=8, reg_layers=2, cost_norm=False
        )
        rng = np.random.default_rng(12)
        params = model.init_params(cfg, seed=8)
        i_l = Tensor(rng.random((1, 3, 5, 12)))
        i_r = Tensor(rng.random((1, 3, 5, 12)))
        base = model.forward_disparity(i_l, i_r, params, cfg).data
        scaled = model.forward_disparity(i_l, i_r, params, cfg, feature_hook=lambda t: t * 7.3).data
        assert np.max(np.abs(base - scaled)) > 1e-6

    def test_end_to_end_gradient_single_weight(self):
        cfg = model.StereoNetConfig(
            feature_channels=6, feature_layers=2, max_disparity=8, reg_layers=1
        )
        params = model.init_params(cfg, seed=9)
        rng = np.random.default_rng(13)
        i_l = Tensor(rng.random((1, 3, 8, 16)))
        i_r = Tensor(rng.random((1, 3, 8, 16)))
        w0 = params["disp.feat.0.w"].data.copy()

        def f(wt):
            p2 = dict(params)
            p2["disp.feat.0.w"] = wt
            return ad.reduce_mean_all(model.forward_disparity(i_l, i_r, p2, cfg))

        report = ad.grad_check(f, [w0], step=1e-6)
        assert report.max_rel_err < 1e-4, str(report)

    def test_overfit_single_shifted_pair(self):
        rng = np.random.default_rng(14)
        i_l, i_r = rgb_pair_with_shift(rng, 12, 24, 2)
        params = model.init_params(SMALL, seed=10)
        opt = ad.Adam(params, lr=0.01)
        gt = ad.full((1, 1, 12, 24), 2.0)
        valid = np.ones((1, 1, 12, 24))
        for _ in range(500):
            pred = model.forward_disparity(i_l, i_r, params, SMALL)
            loss = losses.loss_smooth_l1(pred, gt, valid)
            ad.Adam.zero_grads(params)
            ad.backward(loss)
            opt.step(params)
        pred = model.forward_disparity(i_l, i_r, params, SMALL)
        med = np.median(pred.data)
        assert abs(med - 2.0) < 0.5, f"median {med}"


class TestForwardOcclusion:
    def _inputs(self, rng, h=8, w=12):
        d = Tensor(rng.random((1, 1, h, w)) * 7.0)
        i_r = Tensor(rng.random((1, 3, h, w)))
        e = Tensor(rng.random((1, 1, h, w)) * 0.2)
        return d, i_r, e

    def test_output_open_interval(self):
        rng = np.random.default_rng(15)
        params = model.init_params(SMALL, seed=11)
        d, i_r, e = self._inputs(rng)
        o = model.forward_occlusion(d, i_r, e, params, model.OcclusionNetConfig(), 8)
        assert o.shape == (1, 1, 8, 12)
        assert np.all(o.data > 0.0) and np.all(o.data < 1.0)

    def test_deterministic(self):
        rng = np.random.default_rng(16)
        params = model.init_params(SMALL, seed=12)
        d, i_r, e = self._inputs(rng)
        a = model.forward_occlusion(d, i_r, e, params, model.OcclusionNetConfig(), 8).data
        b = model.forward_occlusion(d, i_r, e, params, model.OcclusionNetConfig(), 8).data
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_supervised_training_accuracy(self, seed):
        rng = np.random.default_rng(100 + seed)
        h, w, dmax = 16, 32, 8
        samples = []
        for _ in range(3):
            d_np = np.ones((1, 1, h, w))
            x0 = int(rng.integers(8, 20))
            y0 = int(rng.integers(2, 8))
            d_np[:, :, y0 : y0 + 7, x0 : x0 + 8] = 5.0
            occ = losses.gt_occlusion_from_disparity(d_np)
            i_r = rng.random((1, 3, h, w))
            # error map bright where occlusion breaks the reconstruction
            e = occ * (0.2 + 0.1 * rng.random((1, 1, h, w)))
            samples.append((Tensor(d_np), Tensor(i_r), Tensor(e), occ))
        params = model.init_params(SMALL, seed=200 + seed)
        occ_cfg = model.OcclusionNetConfig()
        opt = ad.Adam(params, lr=0.01)
        for _ in range(200):
            total = None
            for d_t, ir_t, e_t, occ_np in samples:
                o = model.forward_occlusion(d_t, ir_t, e_t, params, occ_cfg, dmax)
                term = losses.loss_bce(o, Tensor(occ_np))
                total = term if total is None else total + term
            ad.Adam.zero_grads(params)
            ad.backward(total * (1.0 / len(samples)))
            opt.step(params)
        correct = total_px = 0
        for d_t, ir_t, e_t, occ_np in samples:
            o = model.forward_occlusion(d_t, ir_t, e_t, params, occ_cfg, dmax)
            pred = (o.data > 0.5).astype(np.float64)
            correct += (pred == occ_np).sum()
            total_px += occ_np.size
        acc = correct / total_px
        # occluded fraction ~0.15, so all-visible would score well below this
        assert acc > 0.9, f"accuracy {acc}"


class TestCheckpoint:
    def _setup(self, tmp_path):
        params = model.init_params(SMALL, seed=13)
        opt = ad.Adam(params, lr=0.01)
        rng = np.random.default_rng(17)
        i_l = Tensor(rng.random((1, 3, 5, 12)))
        i_r = Tensor(rng.random((1, 3, 5, 12)))
        pred = model.forward_disparity(i_l, i_r, params, SMALL)
        ad.backward(ad.reduce_mean_all(pred))
        opt.step(params)
        configs = model.config_dicts(SMALL, model.OcclusionNetConfig())
        extra = {"iteration": 41, "note": "smoke"}
        path = tmp_path / "ck.bin"
        model.save_checkpoint(path, params, configs, adam=opt, extra=extra)
        return params, opt, configs, extra, path

    def test_roundtrip(self, tmp_path):
        params, opt, configs, extra, path = self._setup(tmp_path)
        p2, c2, a2, e2 = model.load_checkpoint(path)
        assert c2 == configs and e2 == extra
        assert list(p2.keys()) == list(params.keys())
        for k in params:
            assert np.array_equal(p2[k].data, params[k].data)
            assert np.array_equal(a2.m[k], opt.m[k])
            assert np.array_equal(a2.v[k], opt.v[k])
        assert a2.t == opt.t and a2.lr == opt.lr

    def test_byte_stable(self, tmp_path):
        params, opt, configs, extra, path = self._setup(tmp_path)
        path2 = tmp_path / "ck2.bin"
        model.save_checkpoint(path2, params, configs, adam=opt, extra=extra)
        assert path.read_bytes() == path2.read_bytes()

    def test_config_echo_reconstructs(self, tmp_path):
        _, _, _, _, path = self._setup(tmp_path)
        _, configs, _, _ = model.load_checkpoint(path)
        cfg = model.stereo_config_from_dict(configs["stereo"])
        assert cfg == SMALL
        occ = model.occ_config_from_dict(configs["occlusion"])
        assert occ == model.OcclusionNetConfig()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTACKPTxxxxxxxx")
        with pytest.raises(ValueError, match="magic"):
            model.load_checkpoint(path)

    def test_resume_training_continues_identically(self, tmp_path):
        params, opt, configs, extra, path = self._setup(tmp_path)

        def one_step(ps, op, seed):
            rng = np.random.default_rng(seed)
            i_l = Tensor(rng.random((1, 3, 5, 12)))
            i_r = Tensor(rng.random((1, 3, 5, 12)))
            pred = model.forward_disparity(i_l, i_r, ps, SMALL)
            loss = ad.reduce_mean_all(pred * pred)
            ad.Adam.zero_grads(ps)
            ad.backward(loss)
            op.step(ps)

        one_step(params, opt, 999)
        p2, _, a2, _ = model.load_checkpoint(path)
        one_step(p2, a2, 999)
        for k in params:
            assert np.array_equal(p2[k].data, params[k].data), k
