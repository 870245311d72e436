import numpy as np
import pytest

from defectsynth import tensor as tt
from defectsynth.adapter import Adapter, AdapterConfig
from defectsynth.errors import ShapeError, ValidationError
from defectsynth.schedule import make_schedule
from defectsynth.tensor import Tape, Tensor, finite_diff_grad, rel_error_norm
from defectsynth.training import TrainBatch, training_loss
from defectsynth.unet import Denoiser, DenoiserConfig, denoise

CFG = DenoiserConfig(latent_size=4, latent_channels=12, width=8, text_width=8,
                     temb_dim=8, T=50, seed=1, dtype="float64")


def small_models(adapter_seed=2, randomize_head=True):
    den = Denoiser(CFG, trainable=False)
    if randomize_head:
        sd = den.state_dict()
        sd["head.w"] = np.random.default_rng(9).standard_normal(sd["head.w"].shape) * 0.05
        den.load_state_dict(sd)
    ad = Adapter(AdapterConfig(cm_width=8, feat_len=4, widths=CFG.attn_widths,
                               seed=adapter_seed, dtype="float64"))
    return den, ad


class TestDenoise:
    def test_zero_init_adapter_is_invisible(self):
        den, ad = small_models()
        rng = np.random.default_rng(0)
        z = rng.standard_normal((2, 4, 4, 12))
        c = rng.standard_normal((2, 4, 8))
        cp = rng.standard_normal((2, 4, 8))
        t = np.array([3, 40])
        with_cp = denoise(z, t, c, cp, den, ad).data
        without = denoise(z, t, c, None, den, None).data
        np.testing.assert_array_equal(with_cp, without)

    def test_null_feature_equals_no_adapter_even_when_trained(self):
        den, ad = small_models()
        for p in ad.params.values():  # pretend-trained adapter
            p.data = np.random.default_rng(4).standard_normal(p.data.shape) * 0.1
        rng = np.random.default_rng(1)
        z = rng.standard_normal((1, 4, 4, 12))
        c = rng.standard_normal((1, 4, 8))
        got = denoise(z, [5], c, None, den, ad).data
        want = denoise(z, [5], c, None, den, None).data
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_deterministic_bitwise(self):
        den, ad = small_models()
        rng = np.random.default_rng(2)
        z = rng.standard_normal((2, 4, 4, 12))
        c = rng.standard_normal((2, 4, 8))
        cp = rng.standard_normal((2, 4, 8))
        t = np.array([7, 11])
        a = denoise(z, t, c, cp, den, ad).data
        b = denoise(z, t, c, cp, den, ad).data
        assert a.tobytes() == b.tobytes()

    def test_shape_errors(self):
        den, _ = small_models()
        with pytest.raises(ShapeError):
            den.forward(np.zeros((1, 5, 5, 12)), [1], np.zeros((1, 4, 8)))
        with pytest.raises(ShapeError):
            den.forward(np.zeros((1, 4, 4, 12)), [1], np.zeros((1, 4, 9)))

    def test_adapter_gradients_match_finite_differences(self):
        den, ad = small_models()
        rng = np.random.default_rng(3)
        for p in ad.params.values():
            p.data = rng.standard_normal(p.data.shape) * 0.05
        z = rng.standard_normal((2, 4, 4, 12))
        eps = rng.standard_normal(z.shape)
        c = rng.standard_normal((2, 4, 8)) * 0.5
        cp = rng.standard_normal((2, 4, 8)) * 0.5
        t = np.array([13, 29])

        for pname in ("block0.wv", "block0.wk", "block1.wv"):
            param = ad.params[pname]

            def f(w):
                saved = ad.params[pname]
                ad.params[pname] = w if isinstance(w, Tensor) else Tensor(w)
                try:
                    pred = denoise(z, t, c, cp, den, ad)
                    return tt.tmean(tt.square(tt.sub(pred, Tensor(eps))))
                finally:
                    ad.params[pname] = saved

            param.zero_grad()
            with Tape() as tape:
                tape.backward(f(param))
            fd = finite_diff_grad(f, param, h=1e-6)
            assert rel_error_norm(param.grad, fd) < 1e-4


class TestStateDict:
    def test_roundtrip_exact(self):
        den, _ = small_models()
        sd = den.state_dict()
        den2 = Denoiser(CFG, trainable=False)
        den2.load_state_dict(sd)
        assert den2.params_hash() == den.params_hash()

    def test_shape_mismatch_rejected(self):
        den, _ = small_models()
        sd = den.state_dict()
        sd["stem.w"] = sd["stem.w"][:, :1]
        with pytest.raises(ShapeError):
            Denoiser(CFG).load_state_dict(sd)

    def test_key_mismatch_rejected(self):
        den, _ = small_models()
        sd = den.state_dict()
        del sd["stem.b"]
        with pytest.raises(ShapeError):
            Denoiser(CFG).load_state_dict(sd)


class TestTrainingLoss:
    def _batch(self, rng, schedule, b=3):
        z0 = rng.standard_normal((b, 4, 4, 12))
        eps = rng.standard_normal(z0.shape)
        t = rng.integers(1, schedule.T + 1, size=b)
        c = rng.standard_normal((b, 4, 8)) * 0.5
        return TrainBatch(z0=z0, eps=eps, t=t, text_emb=c, cm_feat=None)

    def test_oracle_denoiser_zero_loss(self):
        # loss is 0 exactly when predictions equal the drawn noise
        rng = np.random.default_rng(5)
        schedule = make_schedule(50)
        batch = self._batch(rng, schedule)
        pred = Tensor(batch.eps)
        loss = tt.tmean(tt.square(tt.sub(pred, Tensor(batch.eps))))
        assert loss.item() == 0.0

    def test_zero_predictor_unit_loss(self):
        # zero-init head predicts 0, so loss is mean eps^2 ~ 1 per dimension
        rng = np.random.default_rng(6)
        schedule = make_schedule(50)
        den = Denoiser(CFG, trainable=False)
        vals = []
        for _ in range(30):
            batch = self._batch(rng, schedule, b=4)
            vals.append(training_loss(batch, den, None, None, 0.0, schedule).item())
        assert abs(np.mean(vals) - 1.0) < 0.05

    def test_forced_both_drop_equals_unconditional_loss(self):
        rng = np.random.default_rng(7)
        schedule = make_schedule(50)
        den, ad = small_models()
        for p in ad.params.values():
            p.data = rng.standard_normal(p.data.shape) * 0.1
        batch = self._batch(rng, schedule)
        batch = TrainBatch(batch.z0, batch.eps, batch.t, batch.text_emb,
                           cm_feat=rng.standard_normal((3, 4, 8)))
        # u in [2p, 3p) forces the both-dropped event for every sample
        draws = np.full(3, 0.125)
        dropped = training_loss(batch, den, ad, draws, 0.05, schedule).item()
        uncond = TrainBatch(batch.z0, batch.eps, batch.t,
                            np.zeros_like(batch.text_emb), np.zeros_like(batch.cm_feat))
        expected = training_loss(uncond, den, ad, None, 0.0, schedule).item()
        assert dropped == expected

    def test_empty_batch_rejected(self):
        schedule = make_schedule(50)
        den, _ = small_models()
        empty = TrainBatch(np.zeros((0, 4, 4, 12)), np.zeros((0, 4, 4, 12)),
                           np.zeros(0, dtype=int), np.zeros((0, 4, 8)), None)
        with pytest.raises(ValidationError):
            training_loss(empty, den, None, None, 0.0, schedule)
