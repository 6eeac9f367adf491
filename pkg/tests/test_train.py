"""Training loop: config plumbing, determinism, ablation switch semantics."""

import dataclasses
from pathlib import Path

import numpy as np
import pytest

from stereoadapt import autodiff as ad
from stereoadapt import color, fileio, losses, model, synth, train
from stereoadapt.autodiff import Tensor


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    """Small two-domain dataset shared across the module's tests."""
    root = tmp_path_factory.mktemp("data")
    src = root / "src"
    tgt = root / "tgt"
    spec_a = synth.domain_spec("a", width=64, height=32, max_disparity=6)
    spec_b = synth.domain_spec("b", width=64, height=32, max_disparity=6)
    for i, s in enumerate(synth.generate_dataset(spec_a, 3, seed=0)):
        synth.save_sample(src, synth.sample_stem(i), s)
    for i, s in enumerate(synth.generate_dataset(spec_b, 3, seed=50)):
        synth.save_sample(tgt, synth.sample_stem(i), s)
    return src, tgt


def tiny_config(src, tgt, out, **kw):
    base = dict(
        source_dir=str(src),
        target_dir=str(tgt),
        out_dir=str(out),
        iterations=4,
        eval_interval=2,
        batch_size=2,
        crop_width=32,
        crop_height=16,
        feature_channels=6,
        feature_layers=2,
        max_disparity=8,
        reg_layers=1,
        seed=3,
    )
    base.update(kw)
    return train.config_from_sources(overrides=base)


class TestConfigPlumbing:
    def test_defaults(self):
        cfg = train.TrainConfig()
        assert cfg.lr == 0.001
        assert (cfg.lambda_s_occ, cfg.lambda_t_ar, cfg.lambda_t_occ, cfg.lambda_t_sm) == (
            0.2,
            1.0,
            0.2,
            0.1,
        )
        assert cfg.batch_size == 2
        assert (cfg.crop_width, cfg.crop_height) == (128, 64)
        assert cfg.iterations <= 5000
        assert cfg.color_transfer and cfg.cost_norm and cfg.recon

    def test_parse_config_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text(
            "# comment line\n"
            "iterations = 7\n"
            "lr = 0.01   # trailing comment\n"
            "color_transfer = off\n"
            "\n"
            "source_dir = /data/src\n"
        )
        raw = train.parse_config_file(p)
        cfg = train.config_from_sources(file_values=raw)
        assert cfg.iterations == 7
        assert cfg.lr == 0.01
        assert cfg.color_transfer is False
        assert cfg.source_dir == "/data/src"

    def test_cli_overrides_file(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("iterations = 7\nseed = 1\n")
        cfg = train.config_from_sources(
            file_values=train.parse_config_file(p), overrides={"iterations": 9}
        )
        assert cfg.iterations == 9
        assert cfg.seed == 1

    def test_bad_lines_rejected(self, tmp_path):
        p = tmp_path / "run.cfg"
        p.write_text("iterations 7\n")
        with pytest.raises(ValueError, match="key = value"):
            train.parse_config_file(p)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config key"):
            train.config_from_sources(file_values={"learning_rate": "0.1"})

    def test_bool_words(self):
        for word, expect in [("on", True), ("off", False), ("true", True), ("0", False)]:
            cfg = train.config_from_sources(overrides={"recon": word})
            assert cfg.recon is expect
        with pytest.raises(ValueError, match="on/off"):
            train.config_from_sources(overrides={"recon": "maybe"})

    def test_crop_narrower_than_disparity_rejected(self):
        with pytest.raises(ValueError, match="crop_width"):
            train.config_from_sources(overrides={"crop_width": 8, "max_disparity": 16})


class TestTrainRun:
    def test_outputs_written(self, tiny_data, tmp_path):
        src, tgt = tiny_data
        res = train.train_adapt(tiny_config(src, tgt, tmp_path / "run"))
        assert Path(res.checkpoint_path).exists()
        assert Path(res.metrics_path).exists()
        lines = Path(res.metrics_path).read_text().splitlines()
        assert lines[0] == "iter,l_s_main,l_s_occ,l_t_ar,l_t_occ,l_t_sm,total,target_d1"
        assert len(lines) == 1 + len(res.rows)
        assert res.rows[-1]["iter"] == 4

    def test_checkpoint_carries_color_state_and_config(self, tiny_data, tmp_path):
        src, tgt = tiny_data
        cfg = tiny_config(src, tgt, tmp_path / "run", gamma=0.9)
        res = train.train_adapt(cfg)
        _, configs, adam, extra = model.load_checkpoint(res.checkpoint_path)
        state = extra["color_state"]
        assert state["gamma"] == 0.9
        # one update per source sample per iteration
        assert state["update_count"] == cfg.iterations * cfg.batch_size
        assert extra["train_config"]["seed"] == cfg.seed
        assert adam.t == cfg.iterations

    def test_same_seed_byte_identical(self, tiny_data, tmp_path):
        # identical config means identical out_dir too; the second run
        # overwrites the first, so grab the bytes in between
        src, tgt = tiny_data
        res_a = train.train_adapt(tiny_config(src, tgt, tmp_path / "a"))
        metrics_a = Path(res_a.metrics_path).read_bytes()
        ckpt_a = Path(res_a.checkpoint_path).read_bytes()
        res_b = train.train_adapt(tiny_config(src, tgt, tmp_path / "a"))
        assert Path(res_b.metrics_path).read_bytes() == metrics_a
        assert Path(res_b.checkpoint_path).read_bytes() == ckpt_a

    def test_different_seed_differs(self, tiny_data, tmp_path):
        src, tgt = tiny_data
        res_a = train.train_adapt(tiny_config(src, tgt, tmp_path / "a"))
        res_b = train.train_adapt(tiny_config(src, tgt, tmp_path / "b", seed=4))
        assert (
            Path(res_a.checkpoint_path).read_bytes()
            != Path(res_b.checkpoint_path).read_bytes()
        )

    def test_switches_zero_matching_terms(self, tiny_data, tmp_path):
        src, tgt = tiny_data
        res = train.train_adapt(
            tiny_config(src, tgt, tmp_path / "off", recon=False, color_transfer=False, cost_norm=False)
        )
        for row in res.rows:
            assert row["l_s_occ"] == 0.0
            assert row["l_t_ar"] == 0.0
            assert row["l_t_occ"] == 0.0
            assert row["l_t_sm"] == 0.0
            assert row["total"] == row["l_s_main"]

    def test_recon_on_terms_nonzero(self, tiny_data, tmp_path):
        src, tgt = tiny_data
        res = train.train_adapt(tiny_config(src, tgt, tmp_path / "on"))
        row = res.rows[-1]
        assert row["l_s_occ"] > 0.0
        assert row["l_t_ar"] > 0.0
        assert row["l_t_occ"] > 0.0
        assert row["l_t_sm"] > 0.0

    def test_switch_flips_keep_rng_stream(self, tiny_data, tmp_path):
        """Same seed, different switches: identical sample draws, so the
        supervised source term at iteration 1 starts from the same crops."""
        src, tgt = tiny_data
        res_off = train.train_adapt(
            tiny_config(src, tgt, tmp_path / "o1", recon=False, color_transfer=False, eval_interval=1)
        )
        res_on = train.train_adapt(
            tiny_config(src, tgt, tmp_path / "o2", recon=True, color_transfer=False, eval_interval=1)
        )
        # identical params and crops at iteration 1 -> identical supervised term
        assert res_off.rows[0]["l_s_main"] == res_on.rows[0]["l_s_main"]

    def test_crop_bigger_than_images_rejected(self, tiny_data, tmp_path):
        src, tgt = tiny_data
        with pytest.raises(ValueError, match="smaller than"):
            train.train_adapt(
                tiny_config(src, tgt, tmp_path / "r", crop_width=256, crop_height=128)
            )

    def test_nan_guard_names_iteration(self, tiny_data, tmp_path):
        # a NaN in a ground-truth map (as real sparse datasets have) must
        # abort with the batch named, not silently corrupt parameters
        src, tgt = tiny_data
        bad_src = tmp_path / "bad_src"
        sample = synth.load_sample(src, "0000")
        sample.disparity[5, 5] = np.nan
        synth.save_sample(bad_src, "0000", sample)
        cfg = tiny_config(bad_src, tgt, tmp_path / "nan", iterations=3)
        with pytest.raises(RuntimeError, match=r"iteration \d.*source batch"):
            train.train_adapt(cfg)


class TestSourceOnlyEquivalence:
    def test_matches_handwritten_supervised_loop(self, tiny_data, tmp_path):
        """All switches off must behave exactly like a plain supervised loop
        written independently against the same draw order."""
        src, tgt = tiny_data
        cfg = tiny_config(
            src,
            tgt,
            tmp_path / "loop",
            iterations=10,
            eval_interval=1,
            recon=False,
            color_transfer=False,
            cost_norm=False,
        )
        res = train.train_adapt(cfg)

        source = [synth.load_sample(src, s) for s in synth.list_stems(src)]
        target = [synth.load_sample(tgt, s) for s in synth.list_stems(tgt)]
        stereo_cfg = model.StereoNetConfig(
            feature_channels=cfg.feature_channels,
            feature_layers=cfg.feature_layers,
            max_disparity=cfg.max_disparity,
            reg_layers=cfg.reg_layers,
            cost_norm=False,
        )
        params = model.init_params(stereo_cfg, seed=cfg.seed, occ_config=model.OcclusionNetConfig())
        opt = ad.Adam(params, lr=cfg.lr)
        rng = np.random.default_rng(cfg.seed)
        ch, cw = cfg.crop_height, cfg.crop_width
        seen = []
        for _ in range(cfg.iterations):
            si = rng.integers(0, len(source), size=cfg.batch_size)
            ti = rng.integers(0, len(target), size=cfg.batch_size)
            offs = []
            for b in si:
                s = source[b]
                offs.append(
                    (
                        int(rng.integers(0, s.left.shape[0] - ch + 1)),
                        int(rng.integers(0, s.left.shape[1] - cw + 1)),
                    )
                )
            for b in ti:
                t = target[b]
                rng.integers(0, t.left.shape[0] - ch + 1)
                rng.integers(0, t.left.shape[1] - cw + 1)
            lefts, rights, gts, valids = [], [], [], []
            for b, (y0, x0) in zip(si, offs):
                s = source[b]
                lefts.append(fileio.image_to_tensor(s.left[y0 : y0 + ch, x0 : x0 + cw]).data)
                rights.append(fileio.image_to_tensor(s.right[y0 : y0 + ch, x0 : x0 + cw]).data)
                gts.append(s.disparity[y0 : y0 + ch, x0 : x0 + cw])
                valids.append(s.valid[y0 : y0 + ch, x0 : x0 + cw])
            d = model.forward_disparity(
                Tensor(np.concatenate(lefts)), Tensor(np.concatenate(rights)), params, stereo_cfg
            )
            loss = losses.loss_smooth_l1(d, Tensor(np.stack(gts)[:, None]), np.stack(valids)[:, None])
            seen.append(loss.item())
            ad.Adam.zero_grads(params)
            ad.backward(loss)
            opt.step(params)

        got = [row["l_s_main"] for row in res.rows]
        assert got == seen  # bit-identical, not approximately equal
