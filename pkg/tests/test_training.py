"""Loss fixed points, optimizer behavior and the per-temperature loop."""

import numpy as np
import pytest

from tempdiff.energies import EnergyCallCounter, GaussianDiag
from tempdiff.mcmc import SampleBuffer
from tempdiff.netkernel import (
    DenoiserModel,
    EnergyModel,
    MLPBackbone,
    ParamVector,
    Preconditioner,
    grad_params,
)
from tempdiff.netkernel import tape
from tempdiff.schedule import NoiseSchedule
from tempdiff.training import (
    Adam,
    TrainingConfig,
    distill_loss,
    dsm_loss,
    ensure_buffer_cache,
    pinning_loss,
    train_at_temperature,
    tsm_loss,
)

SCHED = NoiseSchedule(sigma_min=0.05, sigma_max=80.0, rho=7.0)


def _zero_params(net):
    return ParamVector(np.zeros(sum(int(np.prod(s)) for _, s in net.layout)), net.layout)


def _models(dim=2, sigma_data=1.0, zero=True, seed=0, hidden=(12, 12),
            a_const=None, final_scale=1.0):
    net_s = MLPBackbone(dim=dim, hidden_dims=hidden, n_cond=2)
    net_e = MLPBackbone(dim=dim, hidden_dims=hidden, n_cond=2)
    rng = np.random.default_rng(seed)
    ps = _zero_params(net_s) if zero else net_s.init_params(rng, final_scale)
    pe = _zero_params(net_e) if zero else net_e.init_params(rng, final_scale)
    pc = Preconditioner(sigma_data)
    return (DenoiserModel(net_s, ps, pc, SCHED),
            EnergyModel(net_e, pe, pc, SCHED, a_const=a_const))


def _batch(model, n=4, t_val=0.5, rng_seed=1):
    rng = np.random.default_rng(rng_seed)
    t = np.full(n, t_val)
    sigma = np.asarray(SCHED.sigma_rev(t))
    x_t = rng.standard_normal((n, model.dim)) * 1.5
    x = model.denoise(x_t, t)  # makes D(x_t) == x exactly
    return {"x": x, "x_t": x_t, "t": t, "sigma": sigma, "beta": np.ones(n),
            "score_x": None, "energy_x": np.zeros(n)}


class TestLossFixedPoints:
    def test_dsm_zero_at_perfect_denoiser(self):
        score, _ = _models()
        batch = _batch(score)
        tensors = score.backbone.param_tensors(score.params)
        loss = dsm_loss(score, tensors, batch, lambda_kind="one")
        np.testing.assert_allclose(loss.data, 0.0, atol=1e-24)

    def test_dsm_single_sample_distance_two(self):
        score, _ = _models()
        batch = _batch(score, n=1)
        batch["x"] = batch["x"] + np.array([[2.0, 0.0]])
        tensors = score.backbone.param_tensors(score.params)
        loss = dsm_loss(score, tensors, batch, lambda_kind="one")
        assert loss.data[0] == pytest.approx(4.0, rel=1e-12)

    def test_tsm_inactive_below_threshold(self):
        score, _ = _models()
        batch = _batch(score, t_val=0.3)
        batch["score_x"] = np.ones_like(batch["x"])
        tensors = score.backbone.param_tensors(score.params)
        loss = tsm_loss(score, tensors, batch, t_thresh=0.8)
        np.testing.assert_allclose(loss.data, 0.0)

    def test_tsm_zero_at_regression_target(self):
        # pick the batch score so sigma^2 beta score(x) + x equals D(x_t)
        score, _ = _models()
        batch = _batch(score, t_val=0.9)
        d = score.denoise(batch["x_t"], batch["t"])
        batch["score_x"] = (d - batch["x"]) / batch["sigma"][:, None] ** 2
        tensors = score.backbone.param_tensors(score.params)
        loss = tsm_loss(score, tensors, batch, t_thresh=0.8)
        np.testing.assert_allclose(loss.data, 0.0, atol=1e-24)

    def test_tsm_hand_value_single_sample(self):
        score, _ = _models(dim=1)
        t = SCHED.invert_sigma(np.array([0.1]))
        t_rev = 1.0 - t
        x = np.array([[1.0]])
        gauss = GaussianDiag(dim=1)
        target_vec = 0.1**2 * gauss.score(x) + x  # -0.01 + 1
        assert target_vec[0, 0] == pytest.approx(0.99)
        batch = {"x": x, "x_t": x.copy(), "t": t_rev,
                 "sigma": np.array([0.1]), "beta": np.ones(1),
                 "score_x": gauss.score(x), "energy_x": np.zeros(1)}
        tensors = score.backbone.param_tensors(score.params)
        loss = tsm_loss(score, tensors, batch, t_thresh=0.0)
        d_val = score.denoise(x, t_rev)
        assert loss.data[0] == pytest.approx(float((0.99 - d_val[0, 0]) ** 2), rel=1e-12)

    def test_distill_zero_at_consistent_energy(self):
        score, energy = _models()
        batch = _batch(score)
        gx = energy.grad_x(batch["x_t"], batch["t"])
        frozen = batch["x_t"] - batch["sigma"][:, None] ** 2 * gx
        tensors = energy.backbone.param_tensors(energy.params)
        loss = distill_loss(energy, tensors, batch, frozen, lambda_kind="one")
        np.testing.assert_allclose(loss.data, 0.0, atol=1e-18)

    def test_distill_quadratic_vs_skip_closed_form(self):
        # zero backbones: -grad U = -x/sigma^2 so the prediction is zero,
        # and the frozen denoiser is c_skip x_t; residual is c_skip^2 ||x_t||^2
        score, energy = _models()
        t = np.array([0.5])
        sigma = float(SCHED.sigma_rev(0.5))
        x_t = np.array([[1.0, -2.0]])
        batch = {"x": x_t, "x_t": x_t, "t": t, "sigma": np.array([sigma]),
                 "beta": np.ones(1), "score_x": None, "energy_x": np.zeros(1)}
        frozen = score.denoise(x_t, t)
        tensors = energy.backbone.param_tensors(energy.params)
        loss = distill_loss(energy, tensors, batch, frozen, lambda_kind="one")
        cs = score.precond.c_skip(sigma)
        assert loss.data[0] == pytest.approx(cs**2 * 5.0, rel=1e-10)

    def test_distill_theta_gradient_is_structurally_zero(self):
        score, energy = _models(zero=False, seed=3)
        batch = _batch(score, n=6)
        frozen = score.denoise(batch["x_t"], batch["t"])
        eta_tensors = energy.backbone.param_tensors(energy.params)

        def loss_via_theta(theta_tensors, b):
            # the distillation target is evaluated outside the tape, so the
            # score parameters never enter the graph
            return distill_loss(energy, eta_tensors, b, frozen)

        _, grad_theta = grad_params(loss_via_theta, score.backbone, score.params, batch)
        np.testing.assert_allclose(grad_theta.values, 0.0)
        _, grad_eta = grad_params(
            lambda tns, b: distill_loss(energy, tns, b, frozen), energy.backbone,
            energy.params, batch)
        assert np.linalg.norm(grad_eta.values) > 0

    def test_pinning_zero_and_constant_offset(self):
        _, energy = _models()
        rng = np.random.default_rng(4)
        x = rng.standard_normal((5, 2))
        beta = 0.5
        u = energy.energy(x, np.ones(5), beta=beta)
        tensors = energy.backbone.param_tensors(energy.params)
        batch = {"x": x, "energy_x": u / beta, "beta": np.full(5, beta)}
        loss = pinning_loss(energy, tensors, batch)
        np.testing.assert_allclose(loss.data, 0.0, atol=1e-20)
        c = 1.7
        batch_off = {"x": x, "energy_x": (u + c) / beta, "beta": np.full(5, beta)}
        loss_off = pinning_loss(energy, tensors, batch_off)
        np.testing.assert_allclose(loss_off.data, c**2, rtol=1e-12)


class TestAdamAndFits:
    def test_linear_denoiser_recovers_posterior_mean_coefficient(self):
        rng = np.random.default_rng(5)
        sigma = 0.8
        x = rng.standard_normal(4096)
        x_t = x + sigma * rng.standard_normal(4096)
        c = np.array([0.0])
        opt = Adam(lr=0.05)
        for _ in range(300):
            ct = tape.leaf(c)
            pred = ct * tape.const(x_t)
            loss = ((pred - tape.const(x)) ** 2).mean()
            loss.backward()
            c = opt.step(c, ct.grad)
        assert c[0] == pytest.approx(1.0 / (1.0 + sigma**2), rel=0.05)

    def test_quadratic_energy_pinning_fit(self):
        # fit U(x) = a x^2 + b onto beta log pi for a standard normal:
        # optimum a = beta/2, b = 0 (curvature and gauge offset)
        rng = np.random.default_rng(6)
        beta = 0.7
        x = rng.standard_normal(4096)
        target = beta * 0.5 * x**2 + 0.3  # beta E(x) with a gauge offset
        params = np.array([0.0, 0.0])
        opt = Adam(lr=0.05)
        for _ in range(400):
            av = tape.leaf(params[:1])
            bv = tape.leaf(params[1:])
            u = av * tape.const(x**2) + bv
            loss = ((u - tape.const(target)) ** 2).mean()
            loss.backward()
            grad = np.concatenate([av.grad, bv.grad])
            params = opt.step(params, grad)
        assert params[0] == pytest.approx(beta / 2, rel=0.05)
        assert params[1] == pytest.approx(0.3, rel=0.05)


def _gaussian_buffer(n=8192, seed=7, beta=1.0):
    rng = np.random.default_rng(seed)
    g = GaussianDiag(dim=1)
    samples = rng.standard_normal((n, 1))
    return g, SampleBuffer(beta=beta, samples=samples)


class TestTrainLoop:
    def test_zero_steps_returns_initial_parameters(self):
        score, energy = _models(dim=1, zero=False, seed=8)
        target, buffer = _gaussian_buffer(n=64)
        cfg = TrainingConfig(n_steps=0, batch_size=8)
        s2, e2, _ = train_at_temperature(score, energy, buffer, target, 1.0, SCHED, cfg)
        np.testing.assert_array_equal(s2.params.values, score.params.values)
        np.testing.assert_array_equal(e2.params.values, energy.params.values)

    def test_ema_identity_when_decay_zero(self):
        target, buffer = _gaussian_buffer(n=256)
        score, energy = _models(dim=1, zero=False, seed=9)
        theta0 = score.params.values.copy()
        cfg0 = TrainingConfig(n_steps=1, batch_size=32, ema_decay=0.0, seed=11)
        cfg999 = TrainingConfig(n_steps=1, batch_size=32, ema_decay=0.999, seed=11)
        s_plain, _, _ = train_at_temperature(score, energy, buffer, target, 1.0, SCHED, cfg0)
        s_ema, _, _ = train_at_temperature(score, energy, buffer, target, 1.0, SCHED, cfg999)
        reconstructed = (s_ema.params.values - 0.999 * theta0) / 0.001
        np.testing.assert_allclose(reconstructed, s_plain.params.values, rtol=1e-6, atol=1e-9)

    def test_cached_training_spends_one_call_per_buffer_point(self):
        target, buffer = _gaussian_buffer(n=512)
        target.counter = EnergyCallCounter()
        target.counter.phase = "training"
        score, energy = _models(dim=1, zero=False, seed=10)
        cfg = TrainingConfig(n_steps=5, batch_size=64, seed=12)
        train_at_temperature(score, energy, buffer, target, 1.0, SCHED, cfg)
        assert target.counter.energy_calls["training"] == 512
        assert target.counter.score_calls["training"] == 512
        # second run with the now-cached buffer spends nothing
        train_at_temperature(score, energy, buffer, target, 1.0, SCHED, cfg)
        assert target.counter.energy_calls["training"] == 512
        assert target.counter.score_calls["training"] == 512

    def test_uncached_training_spends_batch_size_times_steps(self):
        target, buffer = _gaussian_buffer(n=512)
        target.counter = EnergyCallCounter()
        target.counter.phase = "training"
        score, energy = _models(dim=1, zero=False, seed=10)
        cfg = TrainingConfig(n_steps=5, batch_size=64, seed=12, use_cache=False)
        train_at_temperature(score, energy, buffer, target, 1.0, SCHED, cfg)
        assert target.counter.score_calls["training"] == 5 * 64  # tsm active
        assert target.counter.energy_calls["training"] == 5 * 64  # pin active

    def test_gaussian_training_recovers_score_at_low_noise(self):
        target, buffer = _gaussian_buffer(n=16384, seed=13)
        score, energy = _models(dim=1, zero=False, seed=14, hidden=(32, 32),
                                a_const=1.0, final_scale=0.0)
        cfg = TrainingConfig(n_steps=2000, batch_size=256, seed=15, log_every=500)
        s_tr, e_tr, _ = train_at_temperature(score, energy, buffer, target, 1.0, SCHED, cfg)
        grid = np.linspace(-3, 3, 121)[:, None]
        learned = s_tr.score(grid, 1.0)[:, 0]
        analytic = -grid[:, 0] / (1.0 + SCHED.sigma_min**2)
        rel_l2 = np.linalg.norm(learned - analytic) / np.linalg.norm(analytic)
        assert rel_l2 < 0.10
        # the distilled energy head should track the same score
        neg_grad = -e_tr.grad_x(grid, 1.0)[:, 0]
        rel_l2_e = np.linalg.norm(neg_grad - analytic) / np.linalg.norm(analytic)
        assert rel_l2_e < 0.15

    def test_report_stream(self):
        target, buffer = _gaussian_buffer(n=256)
        score, energy = _models(dim=1, zero=False, seed=16)
        seen = []
        cfg = TrainingConfig(n_steps=10, batch_size=32, log_every=5, seed=17)
        train_at_temperature(score, energy, buffer, target, 1.0, SCHED, cfg,
                             report_sink=seen.append)
        assert [r.step for r in seen] == [0, 5, 9]
        assert all(np.isfinite([r.dsm, r.tsm, r.distill, r.pin]).all() for r in seen)

    def test_seed_determinism(self):
        target, buffer = _gaussian_buffer(n=256)
        score, energy = _models(dim=1, zero=False, seed=18)
        cfg = TrainingConfig(n_steps=20, batch_size=32, seed=19)
        a, ae, _ = train_at_temperature(score, energy, buffer, target, 1.0, SCHED, cfg)
        b, be, _ = train_at_temperature(score, energy, buffer, target, 1.0, SCHED, cfg)
        assert np.array_equal(a.params.values, b.params.values)
        assert np.array_equal(ae.params.values, be.params.values)


class TestBufferCache:
    def test_ensure_cache_counts(self):
        target, buffer = _gaussian_buffer(n=100)
        spent = ensure_buffer_cache(buffer, target)
        assert spent == 200
        assert buffer.validate_cache(target)
        assert ensure_buffer_cache(buffer, target) == 0


class TestCheckpointSink:
    def test_periodic_snapshots(self):
        target, buffer = _gaussian_buffer(n=128)
        score, energy = _models(dim=1, zero=False, seed=20)
        seen = []
        cfg = TrainingConfig(n_steps=10, batch_size=16, checkpoint_every=4, seed=21)
        train_at_temperature(score, energy, buffer, target, 1.0, SCHED, cfg,
                             checkpoint_sink=lambda s, sm, em: seen.append((s, sm, em)))
        assert [s for s, _, _ in seen] == [3, 7]
        assert seen[0][1].train_step == score.train_step + 4
