import numpy as np
import pytest

from snfmrs.diffcore import finite_diff_check
from snfmrs.inference import (
    CheckpointError, ElboError, ModelConfig, SNFModel, TrainConfig, build_model, elbo, encode,
    load_checkpoint, loss_and_grad, posterior_logq, prior_model, reparameterize, sample_posterior,
    sample_posterior_batch, save_checkpoint, train)
from snfmrs.diffcore import AdamState, adam_step
from snfmrs.simulator import PriorRanges, SimConfig, simulate_arrays
from snfmrs.spectral import AcquisitionGrid, default_peaks, forward_model_batch, synthesize_basis

from conftest import singlets

SMALL = dict(widths=(16, 8), flow_width=128)


def flat(params, names):
    return np.concatenate([params[k].ravel() for k in names])


def unflat(x, like, names):
    out, pos = {}, 0
    for k in names:
        n = like[k].size
        out[k] = x[pos:pos + n].reshape(like[k].shape)
        pos += n
    return out


@pytest.fixture
def tiny_model(tiny_sim):
    return build_model(ModelConfig(n_flows=2, **SMALL), tiny_sim, seed=0)


class TestEncode:
    def test_zero_weights(self, tiny_model, tiny_sim):
        m = tiny_model
        for k in m.params:
            if k.startswith("W"):
                m.params[k] = np.zeros_like(m.params[k])
        x = simulate_arrays(tiny_sim, 3).noisy
        mu, sigma, lam = encode(x, m)
        np.testing.assert_array_equal(mu, np.broadcast_to(m.params["b_mu"], mu.shape))
        np.testing.assert_allclose(sigma, np.exp(np.broadcast_to(m.params["b_ls"], mu.shape)))
        assert np.all(lam == lam[0])

    def test_inputs_distinguished(self, tiny_model, tiny_sim):
        x = simulate_arrays(tiny_sim, 2).noisy
        mu, sigma, _ = tiny_model.encode(x)
        assert not np.allclose(mu[0], mu[1])
        assert not np.allclose(sigma[0], sigma[1])

    def test_deterministic_and_positive(self, tiny_model, tiny_sim):
        x = simulate_arrays(tiny_sim, 4).noisy
        a, b = tiny_model.encode(x), tiny_model.encode(x)
        np.testing.assert_array_equal(a[0], b[0])
        assert np.all(a[1] > 0)

    def test_default_dimensions(self):
        basis = synthesize_basis(default_peaks(), AcquisitionGrid())
        priors = PriorRanges.default(basis.names, order=3)
        m = SNFModel(ModelConfig(widths=(8,), n_flows=1), basis, priors)
        x = forward_model_batch(priors.midpoint[None], basis)
        mu, sigma, lam = m.encode(x)
        assert mu.shape == sigma.shape == (1, 29)
        assert lam.shape == (1, m.flow_shape.layer_size)
        assert m.flow_shape.bottleneck == 29

    @pytest.mark.parametrize("amortized", [True, False])
    def test_amortization_flag(self, tiny_sim, amortized):
        m = build_model(ModelConfig(n_flows=2, amortized=amortized, **SMALL), tiny_sim)
        lam = m.encode(simulate_arrays(tiny_sim, 3).noisy)[2]
        assert np.allclose(lam, lam[0]) is (not amortized)

    def test_rejects_wrong_length(self, tiny_model):
        with pytest.raises(ValueError):
            tiny_model.encode(np.zeros((1, 17), complex))


class TestReparameterize:
    def test_zero_noise(self):
        mu = np.array([1.0, -2.0])
        np.testing.assert_array_equal(reparameterize(mu, [0.5, 3.0], np.zeros(2)), mu)

    def test_vanishing_sigma(self):
        mu = np.array([1.0, -2.0])
        np.testing.assert_allclose(reparameterize(mu, np.full(2, 1e-300), np.ones(2)), mu)

    def test_moments(self):
        rng = np.random.default_rng(0)
        mu, sigma = np.array([0.3, -1.0]), np.array([2.0, 0.1])
        th = reparameterize(mu, sigma, rng.standard_normal((100_000, 2)))
        n = th.shape[0]
        assert np.all(np.abs(th.mean(0) - mu) < 3 * sigma / np.sqrt(n))
        assert np.all(np.abs(th.std(0) - sigma) < 3 * sigma / np.sqrt(2 * n))

    def test_sigma_must_be_positive(self):
        with pytest.raises(ValueError):
            reparameterize(np.zeros(1), np.zeros(1), np.zeros(1))


class TestPosteriorLogq:
    def test_standard_normal_origin(self):
        assert posterior_logq(np.zeros(2), [], np.zeros(2), np.ones(2)) == pytest.approx(-np.log(2 * np.pi))

    def test_identity_layers(self):
        th, mu, sd = np.array([0.2, 1.0]), np.array([0.1, 0.4]), np.array([0.5, 2.0])
        assert posterior_logq(th, [0.0, 0.0], mu, sd) == posterior_logq(th, [], mu, sd)

    def test_subtracts_logdets(self):
        th = np.zeros(3)
        base = posterior_logq(th, [], th, np.ones(3))
        assert posterior_logq(th, [0.5, -0.2], th, np.ones(3)) == pytest.approx(base - 0.3)

    def test_graph_agrees(self, tiny_model, tiny_sim):
        x = simulate_arrays(tiny_sim, 2).noisy
        noise = np.random.default_rng(0).standard_normal((2, 5, tiny_model.dim))
        out = tiny_model.graph("sample").forward(tiny_model.feed(x, noise))
        mu, sigma, _ = tiny_model.encode(x)
        ref = posterior_logq(out["theta0"], [out["sum_logdet"]], mu[:, None], sigma[:, None])
        np.testing.assert_allclose(out["logqK"], ref, atol=1e-10)


class TestElbo:
    def test_perfect_fit_prior_posterior(self, tiny_model):
        pm = prior_model(tiny_model)
        theta = tiny_model.latent.latent_to_theta(tiny_model.latent.prior.mean)
        x = forward_model_batch(theta[None], tiny_model.basis)
        res = elbo(pm, x, noise=np.zeros((1, 1, pm.dim)))
        assert res.recon[0] == pytest.approx(0.0, abs=1e-20)
        assert res.kl[0] == 0.0
        assert res.loss[0] == pytest.approx(0.0, abs=1e-20)

    def test_closed_form_kl(self, tiny_model):
        pm = prior_model(tiny_model)
        prior = tiny_model.latent.prior
        rng = np.random.default_rng(1)
        m = prior.mean + 0.01 * prior.std * rng.standard_normal(pm.dim)
        s = prior.std * np.exp(0.01 * rng.standard_normal(pm.dim))
        pm.params["b_mu"], pm.params["b_ls"] = m[None], np.log(s)[None]
        x = forward_model_batch(tiny_model.priors.midpoint[None], tiny_model.basis)
        res = elbo(pm, x, noise=rng.standard_normal((1, 10_000, pm.dim)))
        exact = np.sum(np.log(prior.std / s) + (s ** 2 + (m - prior.mean) ** 2) / (2 * prior.std ** 2) - 0.5)
        assert abs(res.kl[0] - exact) < 1e-3

    def test_beta_weights_kl(self, tiny_model, tiny_sim):
        x = simulate_arrays(tiny_sim, 2).noisy
        noise = np.random.default_rng(2).standard_normal((2, 1, tiny_model.dim))
        r1, r3 = elbo(tiny_model, x, beta=1.0, noise=noise), elbo(tiny_model, x, beta=3.0, noise=noise)
        np.testing.assert_allclose(r3.loss - r1.loss, 2 * r1.kl, rtol=1e-10)
        np.testing.assert_allclose(r1.loss, r1.recon + r1.kl, rtol=1e-12)

    def test_non_finite_raises(self, tiny_model):
        x = np.full((1, 64), np.nan + 0j)
        with pytest.raises(ElboError):
            elbo(tiny_model, x)

    def test_gradient_matches_finite_differences(self, tiny_sim):
        m = build_model(ModelConfig(widths=(3,), n_flows=2, flow_width=3, n_householder=2), tiny_sim)
        x = simulate_arrays(tiny_sim, 2).noisy
        noise = np.random.default_rng(3).standard_normal((2, 2, m.dim))
        names = sorted(m.params)
        x0 = flat(m.params, names)
        _, grads, _ = loss_and_grad(m, m.params, x, noise, 10.0)
        g0 = flat(grads, names)
        pick = np.random.default_rng(4).choice(x0.size, 150, replace=False)

        def f(v):
            full = x0.copy()
            full[pick] = v
            return loss_and_grad(m, unflat(full, m.params, names), x, noise, 10.0)[0]

        rep = finite_diff_check(f, lambda v: g0[pick], x0[pick], step=1e-5, tolerance=1e-4,
                                floor=1e-5 * np.max(np.abs(g0)))
        assert rep.passed, rep.max_rel_error

    def test_overfit_fixed_batch(self, tiny_model, tiny_sim):
        batch = simulate_arrays(tiny_sim, 16, "fixed").noisy
        noise = np.random.default_rng(5).standard_normal((16, 1, tiny_model.dim))
        params, state = tiny_model.params, AdamState(lr=1e-3)
        first, _, _ = loss_and_grad(tiny_model, params, batch, noise, 10.0)
        for _ in range(50):
            loss, grads, _ = loss_and_grad(tiny_model, params, batch, noise, 10.0)
            params, state = adam_step(params, grads, state)
        assert loss < first


class TestTrain:
    def test_zero_batches(self, tiny_model, tiny_sim):
        before = {k: v.copy() for k, v in tiny_model.params.items()}
        m, hist = train(TrainConfig(max_batches=0), tiny_sim, model=tiny_model)
        assert hist.batch_loss == [] and hist.validation == []
        for k in before:
            np.testing.assert_array_equal(m.params[k], before[k])

    def test_reproducible(self, tiny_sim):
        cfg = TrainConfig(max_batches=12, val_period=5, seed=9)
        runs = [train(cfg, tiny_sim, model_cfg=ModelConfig(n_flows=1, **SMALL)) for _ in range(2)]
        assert runs[0][1] == runs[1][1]
        assert len(runs[0][1].batch_loss) == 12
        assert [r["batch"] for r in runs[0][1].validation] == [0, 5, 10]
        for k in runs[0][0].params:
            np.testing.assert_array_equal(runs[0][0].params[k], runs[1][0].params[k])

    def test_patience_stops(self, tiny_sim):
        cfg = TrainConfig(max_batches=50, val_period=2, patience=1, lr=1e-12)
        _, hist = train(cfg, tiny_sim, model_cfg=ModelConfig(n_flows=0, **SMALL))
        assert hist.stopped in ("patience", "max_batches")
        assert len(hist.batch_loss) <= 50

    def test_ema_zero_decay_is_raw(self, tiny_sim):
        mc = ModelConfig(n_flows=1, **SMALL)
        raw, _ = train(TrainConfig(max_batches=6, val_period=3), tiny_sim, model_cfg=mc)
        avg, _ = train(TrainConfig(max_batches=6, val_period=3, ema_decay=0.0), tiny_sim, model_cfg=mc)
        for k in raw.params:
            np.testing.assert_allclose(avg.params[k], raw.params[k], rtol=0, atol=1e-15)

    def test_ema_matches_manual_average(self, tiny_sim):
        mc = ModelConfig(n_flows=1, **SMALL)
        decay, n = 0.5, 5
        iterates = [build_model(mc, tiny_sim, seed=0).params]
        for t in range(1, n + 1):
            iterates.append(train(TrainConfig(max_batches=t, val_period=n), tiny_sim, model_cfg=mc)[0].params)
        expect = {k: v.copy() for k, v in iterates[0].items()}
        for t in range(1, n + 1):
            d = min(decay, (1 + t) / (10 + t))
            expect = {k: d * expect[k] + (1 - d) * iterates[t][k] for k in expect}
        got, _ = train(TrainConfig(max_batches=n, val_period=n, ema_decay=decay), tiny_sim, model_cfg=mc)
        for k in expect:
            np.testing.assert_allclose(got.params[k], expect[k], rtol=1e-12, atol=1e-14)

    def test_history_csv(self, tiny_sim):
        _, hist = train(TrainConfig(max_batches=3, val_period=2), tiny_sim,
                        model_cfg=ModelConfig(n_flows=0, **SMALL))
        lines = hist.to_csv().splitlines()
        assert lines[0].startswith("kind,batch,loss")
        assert len(lines) == 1 + 3 + 2

    def test_toy_run_improves_recon(self, tiny_sim):
        # Same held-out spectra and Monte Carlo noise before and after training.
        model = build_model(ModelConfig(n_flows=2, widths=(64, 32)), tiny_sim)
        untrained = model.copy()
        trained, _ = train(TrainConfig(max_batches=2000, val_period=2000, lr=1e-3), tiny_sim, model=model)
        held = simulate_arrays(tiny_sim, 256, "held-out").noisy
        noise = np.random.default_rng(0).standard_normal((256, 4, model.dim))
        before = elbo(untrained, held, noise=noise).recon.mean()
        after = elbo(trained, held, noise=noise).recon.mean()
        assert after < before

    @pytest.mark.parametrize("bad", [dict(beta=0.0), dict(lr=-1.0), dict(batch_size=0),
                                     dict(ema_decay=1.0)])
    def test_invalid_config(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestPosterior:
    def test_single_draw(self, tiny_model, tiny_sim):
        x = simulate_arrays(tiny_sim, 1).noisy[0]
        d = sample_posterior(tiny_model, x, 1)
        assert d.latent.shape == (1, tiny_model.dim)
        assert d.theta.shape == (1, len(tiny_sim.priors.names))
        assert d.logq.shape == d.logprior.shape == (1,)

    def test_collapsed_base(self, tiny_model, tiny_sim):
        m = tiny_model
        m.params["W_ls"] = np.zeros_like(m.params["W_ls"])
        m.params["b_ls"] = np.full_like(m.params["b_ls"], np.log(1e-6))
        x = simulate_arrays(tiny_sim, 1).noisy
        d = sample_posterior(m, x[0], 200)
        mu = m.encode(x)[0]
        ref = m.graph("sample").forward(m.feed(x, np.zeros((1, 1, m.dim))))["thetaK"][0, 0]
        assert np.max(d.latent.std(0)) < 1e-4
        np.testing.assert_allclose(d.latent, np.broadcast_to(ref, d.latent.shape), atol=1e-4)
        assert mu.shape == (1, m.dim)

    def test_identity_flow_mean(self, tiny_sim):
        m = build_model(ModelConfig(n_flows=0, **SMALL), tiny_sim)
        x = simulate_arrays(tiny_sim, 1).noisy[0]
        d = sample_posterior(m, x, 100_000, seed=4)
        mu, sigma, _ = m.encode(x)
        assert np.all(np.abs(d.latent.mean(0) - mu[0]) < 4 * sigma[0] / np.sqrt(len(d)))

    def test_batch_matches_single(self, tiny_model, tiny_sim):
        x = simulate_arrays(tiny_sim, 3).noisy
        batch = sample_posterior_batch(tiny_model, x, 10, seed=1)
        one = sample_posterior_batch(tiny_model, x[:1], 10, seed=1)[0]
        np.testing.assert_allclose(batch[0].theta, one.theta, rtol=1e-12, atol=1e-12)
        assert not np.array_equal(batch[0].theta, batch[1].theta)


class TestCheckpoint:
    def test_round_trip_bytes(self, tiny_model, tmp_path):
        h1 = save_checkpoint(tmp_path / "a.ckpt", tiny_model, {"seed": 1})
        loaded = load_checkpoint(tmp_path / "a.ckpt", tiny_model.basis)
        h2 = save_checkpoint(tmp_path / "b.ckpt", loaded, {"seed": 1})
        assert h1 == h2
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert loaded.metadata == {"seed": 1}
        for k in tiny_model.params:
            np.testing.assert_array_equal(loaded.params[k], tiny_model.params[k])

    def test_fingerprint_mismatch(self, tiny_model, tmp_path):
        save_checkpoint(tmp_path / "a.ckpt", tiny_model)
        other = synthesize_basis(singlets([2.6, 3.5], amp=4.0), tiny_model.basis.grid)
        with pytest.raises(CheckpointError, match="fingerprint"):
            load_checkpoint(tmp_path / "a.ckpt", other)
        assert load_checkpoint(tmp_path / "a.ckpt", other, force=True).basis is other

    def test_not_a_checkpoint(self, tmp_path):
        (tmp_path / "x").write_bytes(b"hello")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "x")

    def test_flow_count_recorded(self, tiny_sim, tmp_path):
        from snfmrs.inference import read_checkpoint_header
        m = build_model(ModelConfig(n_flows=0, **SMALL), tiny_sim)
        save_checkpoint(tmp_path / "v.ckpt", m)
        head = read_checkpoint_header(tmp_path / "v.ckpt")
        assert head["n_flows"] == 0 and head["label"] == "VAE"
