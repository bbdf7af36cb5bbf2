import numpy as np
import pytest

from pancraft import ops
from pancraft import tensor as T
from pancraft.layers import Mode
from pancraft.model import (Level, ModelConfig, ModelInputs, PanSharpener,
                            desk_config, paper_config)

from fdcheck import numeric_grad_at, rel_err, weighted_sum

# pinned after the first run of the default paper-profile layout; the
# published budget for the full-size network is 7.17 M
PAPER_PARAM_COUNT = 6_696_840


def _toy(bands=4, channels=8, seed=0):
    return PanSharpener(desk_config(bands=bands, channels=channels, seed=seed))


def _pair(rng, bands=4, size=32, batch=1):
    pan = rng.random((batch, 1, size, size), dtype=np.float32)
    ms = rng.random((batch, bands, size // 4, size // 4), dtype=np.float32)
    return pan, ms


def _randomize_head(model, scale=0.05):
    rng = np.random.default_rng(99)
    model.head.w.data[...] = rng.standard_normal(model.head.w.shape) * scale
    for p in model.params():
        if ".mod." in p.name:
            p.data[...] = rng.standard_normal(p.shape) * 0.1


class TestResidualIdentity:
    def test_fresh_model_reproduces_base_in_both_modes(self):
        model = _toy()
        pan, ms = _pair(np.random.default_rng(1))
        inputs = ModelInputs.build(pan, ms)
        assert np.array_equal(model.forward(inputs, Mode.MS).data, inputs.ms_lr.data)
        assert np.array_equal(model.forward(inputs, Mode.PAN).data, inputs.pan_lr_rep.data)

    def test_zero_init_infer_is_clamped_bicubic(self):
        model = _toy()
        pan, ms = _pair(np.random.default_rng(2))
        out = model.infer(pan, ms)
        want = np.clip(ops.resample(T.Tensor(ms), 4, "bicubic").data, 0.0, 1.0)
        assert np.array_equal(out.data, want)


class TestForward:
    def test_batch_independence(self):
        model = _toy()
        _randomize_head(model)
        pan, ms = _pair(np.random.default_rng(3))
        pan2 = np.concatenate([pan, pan])
        ms2 = np.concatenate([ms, ms])
        out = model.infer(pan2, ms2)
        assert np.array_equal(out.data[0], out.data[1])

    def test_extent_divisibility_is_hard_error(self):
        model = PanSharpener(ModelConfig(channels=8, bands=4, heads=2,
                                         levels=(Level(1, False), Level(1, True),
                                                 Level(1, True), Level(1, True))))
        pan = np.zeros((1, 1, 36, 36), dtype=np.float32)   # 36 % 8 != 0
        ms = np.zeros((1, 4, 9, 9), dtype=np.float32)
        with pytest.raises(ValueError):
            model.forward(ModelInputs.build(pan, ms), Mode.MS)

    def test_band_mismatch_is_hard_error(self):
        model = _toy(bands=4)
        pan, ms = _pair(np.random.default_rng(4), bands=8)
        with pytest.raises(ValueError):
            model.forward(ModelInputs.build(pan, ms), Mode.MS)

    def test_modes_diverge_after_training_moves_modulation(self):
        model = _toy()
        _randomize_head(model)
        pan, ms = _pair(np.random.default_rng(5))
        inputs = ModelInputs.build(pan, ms)
        out_ms = model.forward(inputs, Mode.MS)
        out_pan = model.forward(inputs, Mode.PAN)
        delta_base = inputs.ms_lr.data - inputs.pan_lr_rep.data
        assert not np.allclose(out_ms.data - out_pan.data, delta_base)


class TestModeRouting:
    def test_gradient_sets_differ_exactly_in_unused_halves(self):
        model = _toy()
        _randomize_head(model)
        pan, ms = _pair(np.random.default_rng(6))
        inputs = ModelInputs.build(pan, ms)
        gt = T.Tensor(np.random.default_rng(7).random(inputs.ms_lr.shape).astype(np.float32))

        def run(mode):
            model.zero_grad()
            with T.Tape() as tape:
                out = model.forward(inputs, mode)
                tape.backward(T.tmean(T.absolute(out - gt)))
            return {p.name for p in model.params() if np.abs(p.grad).max() > 0}

        touched_ms = run(Mode.MS)
        touched_pan = run(Mode.PAN)
        names = {p.name for p in model.params()}
        pan_half = {n for n in names if n.endswith(("gamma_pan", "beta_pan", "alpha_pan_1", "alpha_pan_2"))}
        ms_half = {n for n in names if n.endswith(("gamma_ms", "beta_ms", "alpha_ms_1", "alpha_ms_2"))}
        assert pan_half and ms_half
        assert touched_ms & pan_half == set()
        assert touched_pan & ms_half == set()
        assert ms_half <= touched_ms
        assert pan_half <= touched_pan
        # the two sets differ exactly in the unused halves
        assert touched_ms - touched_pan == ms_half
        assert touched_pan - touched_ms == pan_half


class TestParameterBudget:
    def test_paper_profile_within_budget_and_pinned(self):
        model = PanSharpener(paper_config())
        count = model.param_count()
        assert count == PAPER_PARAM_COUNT
        assert abs(count - 7_170_000) / 7_170_000 < 0.15


class TestFullModelGradients:
    def test_toy_model_vs_finite_differences(self):
        # C=8, two levels, 4 bands, 32x32 PAN, float64; 5 sampled coordinates
        # per parameter tensor
        with T.use_dtype(np.float64):
            model = _toy(bands=4, channels=8, seed=8)
            _randomize_head(model)
            rng = np.random.default_rng(9)
            pan = rng.random((1, 1, 32, 32))
            ms = rng.random((1, 4, 8, 8))
            inputs = ModelInputs.build(pan, ms)

            def loss_fn():
                a = weighted_sum(model.forward(inputs, Mode.MS), seed=21)
                b = weighted_sum(model.forward(inputs, Mode.PAN), seed=22)
                return a + b

            model.zero_grad()
            with T.Tape() as tape:
                tape.backward(loss_fn())

            def f():
                return float(loss_fn().data.reshape(()))

            worst = 0.0
            coord_rng = np.random.default_rng(10)
            for p in model.params():
                n = min(5, p.data.size)
                idxs = coord_rng.choice(p.data.size, size=n, replace=False)
                fd = numeric_grad_at(f, p.data, idxs)
                ana = p.grad.reshape(-1)[idxs]
                worst = max(worst, rel_err(ana, fd, atol=1e-7))
            assert worst < 1e-4


class TestCheckpoints:
    def test_roundtrip_preserves_outputs(self, tmp_path):
        model = _toy(seed=11)
        _randomize_head(model)
        path = tmp_path / "model.ckpt"
        model.save(path)
        loaded = PanSharpener.load(path)
        assert loaded.cfg == model.cfg
        pan, ms = _pair(np.random.default_rng(12))
        assert np.array_equal(model.infer(pan, ms).data, loaded.infer(pan, ms).data)

    def test_checkpoint_bytes_deterministic(self, tmp_path):
        model = _toy(seed=13)
        p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        model.save(p1)
        model.save(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_corrupt_checkpoint_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"not a zip at all")
        with pytest.raises(Exception):
            PanSharpener.load(path)

    def test_config_rejects_unknown_keys(self):
        with pytest.raises(ValueError):
            ModelConfig.from_dict({"channels": 8, "bogus": 1})


def test_first_level_attention_rejected():
    with pytest.raises(ValueError):
        ModelConfig(levels=(Level(2, True),))
