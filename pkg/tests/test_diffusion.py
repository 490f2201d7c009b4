import numpy as np
import pytest

from distillab.diffusion import (
    DenoiserTrainConfig,
    build_schedule,
    denoise_loss_and_grads,
    forward_noise,
    load_denoiser,
    sample_img2img,
    sample_img2img_batch,
    save_denoiser,
    timestep_embedding,
    train_denoiser,
)
from distillab.models import CheckpointFormatError, predict_batch
from distillab.numerics import SeededRng

from conftest import gradient_check


class TestSchedule:
    def test_single_step(self):
        sched = build_schedule(1, 0.1, 0.1)
        assert sched.betas.tolist() == [0.1]
        assert sched.alpha_bars[0] == pytest.approx(0.9, abs=1e-15)

    def test_ddpm_1000_matches_high_precision_product(self):
        import mpmath

        sched = build_schedule(1000, 1e-4, 0.02)
        mpmath.mp.dps = 50
        start, end = mpmath.mpf("1e-4"), mpmath.mpf("0.02")
        prod = mpmath.mpf(1)
        for i in range(1000):
            beta = start + (end - start) * i / 999
            prod *= 1 - beta
        expected = float(prod)
        assert expected == pytest.approx(4.04e-5, rel=5e-3)
        assert abs(sched.alpha_bars[-1] - expected) / expected < 1e-9

    def test_alpha_bar_strictly_decreasing(self):
        for t, b0, b1 in [(10, 1e-4, 0.3), (200, 1e-4, 0.03), (50, 0.5, 0.9)]:
            sched = build_schedule(t, b0, b1)
            assert np.all(np.diff(sched.alpha_bars) < 0)
            assert np.all((sched.betas > 0) & (sched.betas < 1))
            assert np.all(np.diff(sched.betas) >= 0)

    def test_default_schedule_endpoints(self, frozen_schedule):
        assert frozen_schedule.alpha_bars[0] >= 0.99
        assert frozen_schedule.alpha_bars[-1] < 0.05

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            build_schedule(0, 1e-4, 0.02)
        with pytest.raises(ValueError):
            build_schedule(10, 0.0, 0.02)
        with pytest.raises(ValueError):
            build_schedule(10, 0.03, 0.02)
        with pytest.raises(ValueError):
            build_schedule(10, 0.5, 1.0)


class TestForwardNoise:
    def test_zero_noise(self):
        sched = build_schedule(10, 0.01, 0.2)
        z0 = np.ones(4, dtype=np.float32)
        zt = forward_noise(z0, 3, np.zeros(4, dtype=np.float32), sched)
        assert np.allclose(zt, np.sqrt(sched.alpha_bars[2]), atol=1e-7)

    def test_near_identity_at_tiny_beta(self):
        sched = build_schedule(5, 1e-6, 1e-6)
        z0 = SeededRng(1).normal(8)
        zt = forward_noise(z0, 1, SeededRng(2).normal(8), sched)
        assert np.allclose(zt, z0, atol=2e-3)

    def test_linearity(self):
        sched = build_schedule(20, 1e-3, 0.1)
        rng = SeededRng(5)
        z0, eps = rng.normal(16), rng.normal(16)
        t = 7
        a, b = np.sqrt(sched.alpha_bars[t - 1]), np.sqrt(1 - sched.alpha_bars[t - 1])
        expected = (a * z0.astype(np.float64) + b * eps.astype(np.float64)).astype(np.float32)
        assert np.array_equal(forward_noise(z0, t, eps, sched), expected)
        # scaling both inputs scales the output
        assert np.allclose(
            forward_noise(2 * z0, t, 2 * eps, sched), 2 * forward_noise(z0, t, eps, sched), atol=1e-6
        )

    def test_t_out_of_range(self):
        sched = build_schedule(10, 0.01, 0.1)
        z = np.zeros(3, dtype=np.float32)
        for t in (0, 11):
            with pytest.raises(ValueError):
                forward_noise(z, t, z, sched)

    def test_monte_carlo_variance(self):
        # element variance of z_t around sqrt(abar)*z0 must be 1 - abar
        sched = build_schedule(100, 1e-4, 0.05)
        rng = SeededRng(33)
        z0 = np.zeros(16, dtype=np.float32)
        n = 10_000
        for t in (1, 25, 50, 75, 100):
            draws = np.stack(
                [forward_noise(z0, t, rng.normal(16), sched) for _ in range(n // 16)]
            )
            var = draws.astype(np.float64).var()
            expected = 1.0 - sched.alpha_bars[t - 1]
            # 3 sigma of a variance estimate over m samples: var * sqrt(2/m) * 3
            m = draws.size
            tol = 3.0 * expected * np.sqrt(2.0 / m)
            assert abs(var - expected) < tol


class TestTimestepEmbedding:
    def test_shape_and_range(self):
        emb = timestep_embedding(np.arange(1, 11), 16)
        assert emb.shape == (10, 16)
        assert np.all(np.abs(emb) <= 1.0)

    def test_distinct_timesteps(self):
        emb = timestep_embedding(np.array([1, 2]), 8)
        assert not np.allclose(emb[0], emb[1])

    def test_odd_dim_rejected(self):
        with pytest.raises(ValueError):
            timestep_embedding(np.array([1]), 7)


def _tiny_denoiser(rng_seed=17, n=40, d=6, k=3, epochs=2):
    rng = SeededRng(rng_seed)
    latents = rng.normal((n, d))
    labels = rng.integers(k, n=n)
    sched = build_schedule(10, 1e-3, 0.2)
    cfg = DenoiserTrainConfig(
        epochs=epochs, batch_size=8, hidden_sizes=(16, 16), time_embed_dim=4, label_embed_dim=4
    )
    den = train_denoiser(latents, labels, sched, cfg, SeededRng(rng_seed + 1))
    return den, sched, latents, labels


class TestTrainDenoiser:
    def test_loss_halves_on_frozen_spec(self, denoiser):
        hist = denoiser.meta["loss_history"]
        assert hist[-1] <= 0.5 * hist[0]

    def test_deterministic(self):
        d1, _, _, _ = _tiny_denoiser()
        d2, _, _, _ = _tiny_denoiser()
        for a, b in zip(d1.mlp.params(), d2.mlp.params()):
            assert np.array_equal(a, b)
        assert np.array_equal(d1.label_table, d2.label_table)

    def test_full_dropout_is_unconditional(self):
        rng = SeededRng(3)
        latents = rng.normal((30, 5))
        labels = rng.integers(2, n=30)
        sched = build_schedule(8, 1e-3, 0.2)
        cfg = DenoiserTrainConfig(
            epochs=3, batch_size=8, hidden_sizes=(12,), time_embed_dim=4,
            label_embed_dim=4, label_dropout=1.0,
        )
        den = train_denoiser(latents, labels, sched, cfg, SeededRng(4))
        z = SeededRng(5).normal((6, 5)).astype(np.float64)
        t = np.full(6, 4)
        null = den.predict_noise(z, t, np.full(6, den.null_token))
        # offsets never trained under full dropout, so every class token
        # embeds exactly as the null base vector
        for c in range(2):
            cond = den.predict_noise(z, t, np.full(6, c))
            assert np.array_equal(cond, null)

    def test_null_row_trained(self, denoiser):
        # dropout guarantees the null row moved away from its init scale
        assert denoiser.label_table.shape[0] == denoiser.num_classes + 1
        assert np.abs(denoiser.label_table[denoiser.null_token]).max() > 0

    def test_empty_latents_rejected(self):
        sched = build_schedule(5, 1e-3, 0.1)
        with pytest.raises(ValueError):
            train_denoiser(
                np.zeros((0, 4), dtype=np.float32),
                np.zeros(0, dtype=np.int64),
                sched,
                DenoiserTrainConfig(epochs=1),
                SeededRng(1),
            )

    def test_gradcheck(self):
        den, sched, latents, labels = _tiny_denoiser(epochs=1)
        # switch parameters to float64 for a clean finite-difference probe
        den.mlp.weights = [w.astype(np.float64) for w in den.mlp.weights]
        den.mlp.biases = [b.astype(np.float64) for b in den.mlp.biases]
        den.label_table = den.label_table.astype(np.float64)
        rng = SeededRng(8)
        b = 10
        zt = rng.normal((b, den.latent_dim)).astype(np.float64)
        t = rng.integers(sched.timesteps, n=b) + 1
        tokens = rng.integers(den.num_classes + 1, n=b)
        eps = rng.normal((b, den.latent_dim)).astype(np.float64)

        def loss_fn():
            return denoise_loss_and_grads(den, zt, t, tokens, eps)

        params = den.mlp.params() + [den.label_table]
        checked, _ = gradient_check(loss_fn, params, SeededRng(12), probes=60)
        assert checked >= 50


class TestSampling:
    def test_strength_zero_returns_prototype(self):
        den, sched, latents, _ = _tiny_denoiser()
        proto = latents[0]
        out = sample_img2img(den, sched, proto, 0, 0.0, 10.0, SeededRng(1))
        assert np.array_equal(out, proto.astype(np.float32))

    def test_determinism(self):
        den, sched, latents, _ = _tiny_denoiser()
        a = sample_img2img(den, sched, latents[0], 1, 0.7, 5.0, SeededRng(42))
        b = sample_img2img(den, sched, latents[0], 1, 0.7, 5.0, SeededRng(42))
        assert np.array_equal(a, b)

    def test_guidance_one_equals_pure_conditional(self):
        # w=1: eps_hat = eps_null + (eps_c - eps_null) = eps_c
        den, sched, latents, _ = _tiny_denoiser()
        z = latents[:4].astype(np.float64)
        t = np.full(4, 5)
        from distillab.diffusion import _guided_noise

        guided = _guided_noise(den, z, t, 1, 1.0)
        cond = den.predict_noise(z, t, np.full(4, 1))
        assert np.allclose(guided, cond, atol=1e-12)

    def test_guidance_zero_equals_null(self):
        den, sched, latents, _ = _tiny_denoiser()
        z = latents[:4].astype(np.float64)
        t = np.full(4, 5)
        from distillab.diffusion import _guided_noise

        guided = _guided_noise(den, z, t, 2, 0.0)
        null = den.predict_noise(z, t, np.full(4, den.null_token))
        assert np.array_equal(guided, null)

    def test_only_target_and_null_rows_read(self, monkeypatch):
        den, sched, latents, _ = _tiny_denoiser()
        seen = []
        original = den.label_vec

        def recording(tokens):
            seen.extend(np.atleast_1d(np.asarray(tokens)).tolist())
            return original(tokens)

        monkeypatch.setattr(den, "label_vec", recording)
        sample_img2img(den, sched, latents[0], 2, 0.8, 3.0, SeededRng(6))
        assert set(seen) == {2, den.null_token}

    def test_strength_bounds_and_unknown_label(self):
        den, sched, latents, _ = _tiny_denoiser()
        with pytest.raises(ValueError):
            sample_img2img(den, sched, latents[0], 0, 1.5, 1.0, SeededRng(1))
        with pytest.raises(ValueError):
            sample_img2img(den, sched, latents[0], 0, -0.1, 1.0, SeededRng(1))
        with pytest.raises(ValueError):
            sample_img2img(den, sched, latents[0], den.num_classes, 0.5, 1.0, SeededRng(1))
        with pytest.raises(ValueError):
            sample_img2img(den, sched, latents[0], 0, 0.5, -1.0, SeededRng(1))

    def test_batch_shape(self):
        den, sched, latents, _ = _tiny_denoiser()
        rngs = [SeededRng(0).spawn(9, i) for i in range(5)]
        out = sample_img2img_batch(den, sched, latents[:5], 1, 0.6, 2.0, rngs)
        assert out.shape == (5, den.latent_dim)
        assert out.dtype == np.float32

    def test_class_fidelity_frozen_pipeline(
        self, denoiser, frozen_schedule, codec, detector, toy_train, train_latents
    ):
        # strength 0.7, guidance 10: samples land in the conditioning class
        from distillab.prototypes import extract_prototypes

        protos = extract_prototypes(
            codec.encode, toy_train, 10, SeededRng(77), restarts=3
        )
        per_class_ok = {c: [] for c in range(toy_train.num_classes)}
        for c in range(toy_train.num_classes):
            latvecs = np.stack([p.latent for p in protos if p.class_id == c])
            reps = np.tile(latvecs, (10, 1))[:100]
            rngs = [SeededRng(0).spawn(55, c, i) for i in range(100)]
            out = sample_img2img_batch(denoiser, frozen_schedule, reps, c, 0.7, 10.0, rngs)
            labels, _, _ = predict_batch(detector, codec.decode(out))
            per_class_ok[c] = (labels == c).mean()
        assert all(v >= 0.8 for v in per_class_ok.values()), per_class_ok


class TestDenoiserCheckpoint:
    def test_round_trip(self, tmp_path):
        den, sched, latents, _ = _tiny_denoiser()
        p = tmp_path / "den.mdlc"
        save_denoiser(p, den)
        back = load_denoiser(p)
        for a, b in zip(den.mlp.params(), back.mlp.params()):
            assert np.array_equal(a, b)
        assert np.array_equal(den.label_table, back.label_table)
        out1 = sample_img2img(den, sched, latents[0], 1, 0.5, 2.0, SeededRng(3))
        out2 = sample_img2img(back, sched, latents[0], 1, 0.5, 2.0, SeededRng(3))
        assert np.array_equal(out1, out2)

    def test_kind_checked(self, tmp_path, detector):
        from distillab.models import save_detector

        p = tmp_path / "det.mdlc"
        save_detector(p, detector)
        with pytest.raises(CheckpointFormatError):
            load_denoiser(p)
