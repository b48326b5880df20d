"""End-to-end acceptance suite.

Each test prints one PASS/FAIL line (run with ``pytest -s`` to see them
all); the two experiment fixtures (GMM ladder, particle-cluster smoke)
are module-scoped because several criteria share their outputs.
"""

import json
import time

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from tempdiff.annealer import (
    AnnealConfig,
    ParticleEnsemble,
    annealed_inference,
    geometric_inference,
    resample,
    snis_estimate,
)
from tempdiff.cli import main as cli_main
from tempdiff.energies import EnergyCallCounter, GaussianDiag, GMM2D, TargetDensity, make_target
from tempdiff.fields import GaussianEnergyField, GaussianScoreField
from tempdiff.mcmc import ChainConfig, SampleBuffer, collect_buffer
from tempdiff.metrics import (
    direct_temperature_is,
    interatomic_distances,
    score_scaling_sample,
    wasserstein_1d,
)
from tempdiff.netkernel import (
    DenoiserModel,
    EnergyModel,
    MLPBackbone,
    Preconditioner,
    divergence,
    grad_params,
    load_checkpoint,
)
from tempdiff.netkernel import tape
from tempdiff.orchestrator import _phase_rng, build_ladder_config, resume, run_ladder
from tempdiff.schedule import GammaSchedule, NoiseSchedule
from tempdiff.training import (
    TrainingConfig,
    distill_loss,
    dsm_loss,
    pinning_loss,
    train_at_temperature,
    tsm_loss,
)

SCHED = NoiseSchedule(sigma_min=0.05, sigma_max=80.0, rho=7.0)


def _report(num, name, ok, detail=""):
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {num:02d} [{status}] {name}: {detail}")
    assert ok, f"criterion {num} ({name}) failed: {detail}"


def _gauss_fields(dim=1, var0=1.0, sched=SCHED):
    return GaussianScoreField(sched, dim, var0), GaussianEnergyField(sched, dim, var0)


# ---------------------------------------------------------------- criterion 1
def test_criterion_01_zero_variance_weights():
    t0 = time.monotonic()
    sf, ef = _gauss_fields()
    target = GaussianDiag(dim=1)

    def run(n_steps):
        cfg = AnnealConfig(n_particles=1024, n_steps=n_steps,
                           gamma=GammaSchedule("constant", 1.0, 1.0),
                           resample_policy="never", bridge_endpoint=False, seed=11)
        _, diag = annealed_inference(sf, ef, target, 1.0, SCHED, cfg)
        return float(np.std(diag.final_log_weights))

    std500 = run(500)
    std1000 = run(1000)
    elapsed = time.monotonic() - t0
    ok = std500 < 0.05 and std1000 <= std500 + 1e-10 and elapsed < 30
    _report(1, "zero-variance weights for exact Gaussian fields", ok,
            f"std(500)={std500:.2e}, std(1000)={std1000:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 2
def test_criterion_02_annealed_gaussian_exactness():
    t0 = time.monotonic()
    sf, ef = _gauss_fields()
    target = GaussianDiag(dim=1)
    cfg = AnnealConfig(n_particles=4096, n_steps=500,
                       gamma=GammaSchedule("constant", 1.0, 2.0),
                       resample_policy="ess", bridge_endpoint=False, seed=12)
    buf, diag = annealed_inference(sf, ef, target, 2.0, SCHED, cfg)
    var = float(np.var(buf.samples[:, 0]))
    ens = ParticleEnsemble(diag.final_states, diag.final_log_weights)
    mean = snis_estimate(ens, lambda x: x[:, 0])
    second = snis_estimate(ens, lambda x: x[:, 0] ** 2)
    se = np.sqrt(max(second - mean**2, 1e-12) / (ens.n * np.exp(diag.final_log_ess)))
    elapsed = time.monotonic() - t0
    ok = abs(var - 0.5) < 0.05 and abs(mean) < 3 * se + 1e-6 and elapsed < 60
    _report(2, "gamma=2 annealing of the exact Gaussian", ok,
            f"var={var:.4f} (target 0.5 +-10%), |mean|={abs(mean):.2e} "
            f"(3SE={3 * se:.2e}), {elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 3
def test_criterion_03_geometric_averaging():
    # gamma_mix = 1: the pure-Gaussian transport contracts at rate 1/sigma^2,
    # so the check runs on a ladder whose sigma_min keeps the weighted
    # population inside the target's support (see decisions ledger)
    gentle = NoiseSchedule(sigma_min=0.5, sigma_max=80.0, rho=7.0)
    sf_g, ef_g = _gauss_fields(sched=gentle)
    cfg = AnnealConfig(n_particles=8192, n_steps=2000,
                       gamma=GammaSchedule("constant", 1.0, 1.0),
                       resample_policy="ess", bridge_endpoint=False, seed=13)
    buf1, _ = geometric_inference(sf_g, ef_g, gentle, cfg, gamma_mix=1.0)
    var1 = float(np.var(buf1.samples[:, 0]))
    ok1 = abs(var1 - gentle.sigma_min**2) < 0.05 * gentle.sigma_min**2

    # gamma_mix = 0 must reproduce the criterion-1 pipeline
    sf, ef = _gauss_fields()
    target = GaussianDiag(dim=1)
    cfg0 = AnnealConfig(n_particles=4096, n_steps=500,
                        gamma=GammaSchedule("constant", 1.0, 1.0),
                        resample_policy="never", bridge_endpoint=False, seed=14)
    buf_geo, _ = geometric_inference(sf, ef, SCHED, cfg0, gamma_mix=0.0)
    buf_fk, _ = annealed_inference(sf, ef, target, 1.0, SCHED, cfg0)
    w1 = wasserstein_1d(buf_geo.samples[:, 0], buf_fk.samples[:, 0], 1)
    ok0 = w1 < 0.05
    _report(3, "geometric averaging limits", ok1 and ok0,
            f"var(gamma=1)={var1:.4f} vs {gentle.sigma_min**2:.4f}, "
            f"W1(gamma=0 vs annealed)={w1:.4f}")


# ------------------------------------------------------- GMM ladder fixture
GMM_CONFIG = {
    "target": {"kind": "gmm2d", "weights": [0.3, 0.7]},
    "seed": 2026,
    "ladder": {"betas": [0.25, 0.5, 1.0]},
    "schedule": {"sigma_min": 0.05, "sigma_max": 80.0, "rho": 7.0},
    "model": {"hidden_dims": [64, 64], "energy_precond_a": 1.0},
    "mcmc": {"n_steps": 5000, "burn_in": 1000, "n_chains": 32, "thin": 5,
             "step_size": 1.0, "init_scale": 4.0},
    "train": {"n_steps": 5000, "batch_size": 256, "log_every": 1000},
    "train_per_rung": [{}, {}, {"n_steps": 0}],
    "anneal": {"n_particles": 16384, "n_steps": 1000},
}


@pytest.fixture(scope="module")
def gmm_ladder(tmp_path_factory):
    out = tmp_path_factory.mktemp("gmm_ladder")
    cfg = build_ladder_config(json.loads(json.dumps(GMM_CONFIG)), out_dir=out / "run")
    t0 = time.monotonic()
    result = run_ladder(cfg)
    elapsed = time.monotonic() - t0
    return {"cfg": cfg, "result": result, "elapsed": elapsed}


def _gmm_mode_mass_right(beta, L=9.0, n=1501):
    g = GMM2D(weights=(0.3, 0.7))
    grid = np.linspace(-L, L, n)
    xs, ys = np.meshgrid(grid, grid, indexing="ij")
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    dens = np.exp(-beta * g.energy(pts)).reshape(xs.shape)
    return float(dens[grid > 0, :].sum() / dens.sum())


# ---------------------------------------------------------------- criterion 4
@pytest.mark.slow
def test_criterion_04_gmm_ladder(gmm_ladder):
    result = gmm_ladder["result"]
    buf = result.final_buffer
    oracle_mass = _gmm_mode_mass_right(1.0)
    mass = float(np.mean(buf.samples[:, 0] > 0))
    g = GMM2D(weights=(0.3, 0.7))
    e_big = g.energy(g.sample_exact(np.random.default_rng(777), 100_000))
    w1 = wasserstein_1d(buf.cached_energies, e_big, 1)
    e_iid = g.energy(g.sample_exact(np.random.default_rng(778), buf.n))
    w1_base = wasserstein_1d(e_iid, e_big, 1)
    elapsed = gmm_ladder["elapsed"]
    ok = (abs(mass - oracle_mass) <= 0.07 and w1 < 2.0 * w1_base
          and elapsed < 20 * 60)
    _report(4, "GMM ladder end-to-end", ok,
            f"mode mass {mass:.4f} vs oracle {oracle_mass:.4f} (tol 0.07), "
            f"energy-W1 {w1:.4f} vs 2x baseline {2 * w1_base:.4f}, "
            f"ladder time {elapsed / 60:.1f} min")


# ---------------------------------------------------------------- criterion 5
@pytest.mark.slow
def test_criterion_05_ess_ordering(gmm_ladder):
    result = gmm_ladder["result"]
    run_dir = result.run_dir
    buf0 = SampleBuffer.load(run_dir / "rung_00" / "buffer.bin")
    direct = direct_temperature_is(buf0, 1.0)
    per_rung = [r.metrics["final_log_ess"] for r in result.reports
                if "final_log_ess" in r.metrics]
    ok = direct < min(per_rung)
    _report(5, "single-shot IS is worse than the ladder's worst rung", ok,
            f"direct log-ESS {direct:.3f} < min per-rung {min(per_rung):.3f}")


# ------------------------------------------------ particle-cluster fixture
LJ_CONFIG = {
    "target": {"kind": "lennard_jones", "n_particles": 13, "r_m": 1.0, "eps": 2.0,
               "tau_lj": 1.0, "c_osc": 1.0, "sign_convention": "twelve_minus_six"},
    "seed": 4213,
    "ladder": {"betas": [0.25, 0.5, 1.0]},
    "schedule": {"sigma_min": 0.05, "sigma_max": 80.0, "rho": 7.0},
    "model": {"hidden_dims": [96, 96], "center": "com3d", "energy_precond_a": 1.0},
    "mcmc": {"n_steps": 8000, "burn_in": 2000, "n_chains": 32, "thin": 5,
             "step_size": 0.005, "init_kind": "lattice", "recenter_com": True},
    "train": {"n_steps": 9000, "batch_size": 256, "log_every": 3000,
              "rotation_augment": True, "w_pin": 2.0, "w_tsm": 0.05},
    "train_per_rung": [{}, {}, {"n_steps": 0}],
    "anneal": {"n_particles": 2048, "n_steps": 600},
}


@pytest.fixture(scope="module")
def lj_ladder(tmp_path_factory):
    out = tmp_path_factory.mktemp("lj_ladder")
    cfg = build_ladder_config(json.loads(json.dumps(LJ_CONFIG)), out_dir=out / "run")
    t0 = time.monotonic()
    result = run_ladder(cfg)
    target = make_target(LJ_CONFIG["target"])
    ref_cfg = ChainConfig(n_steps=24000, burn_in=4000, n_chains=32, thin=10,
                          step_size=0.003, init_kind="lattice", recenter_com=True,
                          seed=2)
    reference = collect_buffer(target, 1.0, ref_cfg)
    elapsed = time.monotonic() - t0
    return {"cfg": cfg, "result": result, "reference": reference,
            "elapsed": elapsed}


# ---------------------------------------------------------------- criterion 6
@pytest.mark.slow
def test_criterion_06_lj13_smoke(lj_ladder):
    cfg = lj_ladder["cfg"]
    result = lj_ladder["result"]
    ref = lj_ladder["reference"]
    d_ref = interatomic_distances(ref.samples[::4])
    w2_pita = wasserstein_1d(interatomic_distances(result.final_buffer.samples), d_ref, 2)
    score_mid = load_checkpoint(result.run_dir / "rung_01" / "score.ckpt")
    baseline = score_scaling_sample(score_mid, cfg.schedule, gamma=2.0,
                                    n_samples=2048, n_steps=600,
                                    rng=_phase_rng(cfg.seed, 9, 5))
    w2_base = wasserstein_1d(interatomic_distances(baseline), d_ref, 2)
    elapsed = lj_ladder["elapsed"]
    within_paper_scale = w2_pita <= 5 * 0.04  # reported, not gated
    ok = w2_pita < w2_base and elapsed < 2 * 3600
    _report(6, "13-particle cluster smoke experiment", ok,
            f"distance-W2 {w2_pita:.4f} vs score-scaling {w2_base:.4f}; "
            f"within 5x of 0.04: {within_paper_scale} (reported); "
            f"time {elapsed / 60:.1f} min")


# ---------------------------------------------------------------- criterion 7
def test_criterion_07_gradient_divergence_suite():
    t0 = time.monotonic()
    rng = np.random.default_rng(31)
    net = MLPBackbone(dim=6, hidden_dims=(16, 16), n_cond=2)
    pv = net.init_params(rng)
    x = rng.standard_normal((8, 6))
    cond = rng.standard_normal((8, 2))
    y = rng.standard_normal((8, 6))

    def loss_fn(tensors, _):
        out = net.forward_tape(tensors, x, cond)
        diff = out - tape.const(y)
        return (diff * diff).sum(axis=1)

    _, grad = grad_params(loss_fn, net, pv, None)

    def scalar(p):
        out = net.forward(p, x, cond)
        return float(np.mean(np.sum((out - y) ** 2, axis=1)))

    worst_param = 0.0
    for _ in range(20):
        d = rng.standard_normal(pv.size)
        d /= np.linalg.norm(d)
        fd = (scalar(type(pv)(pv.values + 1e-6 * d, pv.layout))
              - scalar(type(pv)(pv.values - 1e-6 * d, pv.layout))) / 2e-6
        got = float(grad.values @ d)
        worst_param = max(worst_param, abs(got - fd) / max(abs(fd), 1e-12))

    energy = EnergyModel(net, pv, Preconditioner(1.0), SCHED, a_const=1.0)
    xs = rng.standard_normal((8, 6))
    worst_time = 0.0
    for t in (0.2, 0.5, 0.9):
        fd = energy.du_dt(xs, t, method="fd", h=1e-5)
        fwd = energy.du_dt(xs, t, method="forward")
        worst_time = max(worst_time, float(np.max(np.abs(fwd - fd) / np.maximum(np.abs(fd), 1e-9))))

    net8 = MLPBackbone(dim=8, hidden_dims=(16, 16), n_cond=2)
    model8 = DenoiserModel(net8, net8.init_params(rng), Preconditioner(1.0), SCHED)
    x8 = rng.standard_normal((6, 8))
    exact = divergence(model8, x8, 0.7, method="exact")
    hutch = divergence(model8, x8, 0.7, method="hutchinson", n_probes=1024,
                       rng=np.random.default_rng(32))
    div_err = float(np.max(np.abs(hutch - exact) / np.abs(exact)))
    elapsed = time.monotonic() - t0
    ok = worst_param < 1e-4 and worst_time < 1e-3 and div_err < 0.02 and elapsed < 60
    _report(7, "gradient and divergence checks", ok,
            f"param FD {worst_param:.2e} < 1e-4, time FD {worst_time:.2e} < 1e-3, "
            f"hutchinson vs exact {div_err:.2%} < 2%, {elapsed:.1f}s")


# ---------------------------------------------------------------- criterion 8
def test_criterion_08_resampling_unbiasedness():
    rng = np.random.default_rng(41)
    k = 16
    w = rng.uniform(0.05, 1.0, size=k)
    lw = np.log(w / w.sum())
    counts = np.zeros(k)
    trials = 10_000
    ess_ok = True
    for _ in range(trials):
        ens = ParticleEnsemble(np.arange(k, dtype=float)[:, None], lw.copy())
        resample(ens, rng)
        ess_ok &= abs(ens.normalized_ess() - 1.0) < 1e-12
        counts += np.bincount(ens.states[:, 0].astype(int), minlength=k)
    expected = k * w / w.sum()
    rel = np.abs(counts / trials - expected) / expected
    ok = bool(np.max(rel) < 0.01) and ess_ok
    _report(8, "systematic resampling unbiasedness", ok,
            f"max relative copy-count error {np.max(rel):.4%} < 1%, ESS==1 after "
            f"each of {trials} events: {ess_ok}")


# ---------------------------------------------------------------- criterion 9
def test_criterion_09_loss_fixed_points():
    rng = np.random.default_rng(51)
    net_s = MLPBackbone(dim=2, hidden_dims=(12, 12), n_cond=2)
    net_e = MLPBackbone(dim=2, hidden_dims=(12, 12), n_cond=2)
    score = DenoiserModel(net_s, net_s.init_params(rng), Preconditioner(1.0), SCHED)
    energy = EnergyModel(net_e, net_e.init_params(rng), Preconditioner(1.0), SCHED,
                         a_const=1.0)
    n = 6
    t = np.full(n, 0.9)
    sigma = np.asarray(SCHED.sigma_rev(t))
    x_t = rng.standard_normal((n, 2))
    d_val = score.denoise(x_t, t)
    batch = {"x": d_val, "x_t": x_t, "t": t, "sigma": sigma, "beta": np.ones(n),
             "score_x": (d_val - d_val) / 1.0, "energy_x": np.zeros(n)}
    ts = score.backbone.param_tensors(score.params)
    te = energy.backbone.param_tensors(energy.params)

    v_dsm = float(np.max(np.abs(dsm_loss(score, ts, batch).data)))
    batch_tsm = dict(batch)
    batch_tsm["score_x"] = (d_val - batch["x"]) / sigma[:, None] ** 2
    v_tsm = float(np.max(np.abs(tsm_loss(score, ts, batch_tsm, t_thresh=0.8).data)))
    gx = energy.grad_x(x_t, t)
    frozen = x_t - sigma[:, None] ** 2 * gx
    v_dis = float(np.max(np.abs(distill_loss(energy, te, batch, frozen).data)))
    u = energy.energy(batch["x"], np.ones(n))
    batch_pin = dict(batch)
    batch_pin["energy_x"] = u  # beta = 1
    v_pin = float(np.max(np.abs(pinning_loss(energy, te, batch_pin).data)))

    def theta_distill(theta_tensors, b):
        return distill_loss(energy, te, b, frozen)

    _, g_theta = grad_params(theta_distill, score.backbone, score.params, batch)
    theta_zero = float(np.max(np.abs(g_theta.values)))
    ok = max(v_dsm, v_tsm, v_dis, v_pin) < 1e-16 and theta_zero == 0.0
    _report(9, "loss fixed points and stop-gradient", ok,
            f"dsm={v_dsm:.1e} tsm={v_tsm:.1e} distill={v_dis:.1e} pin={v_pin:.1e}, "
            f"|d distill/d theta|={theta_zero}")


# --------------------------------------------------------------- criterion 10
class _CountingStub(TargetDensity):
    kind = "gaussian_diag"
    dim = 1

    def _energy(self, x):
        return 0.5 * np.sum(x**2, axis=1)

    def _score(self, x):
        return -x

    def params_dict(self):
        return {}


def test_criterion_10_energy_meter_exactness():
    stub = _CountingStub()
    stub.counter = EnergyCallCounter()
    stub.counter.phase = "mcmc"
    cfg = ChainConfig(n_steps=120, burn_in=40, n_chains=4, thin=2, seed=3)
    buf = collect_buffer(stub, 1.0, cfg)
    mcmc_exact = (buf.energy_evals_spent == stub.counter.total()
                  == 2 * 4 * (120 + 1))

    stub.counter.phase = "training"
    net_s = MLPBackbone(dim=1, hidden_dims=(8,), n_cond=2)
    net_e = MLPBackbone(dim=1, hidden_dims=(8,), n_cond=2)
    rng = np.random.default_rng(4)
    score = DenoiserModel(net_s, net_s.init_params(rng), Preconditioner(1.0), SCHED)
    energy = EnergyModel(net_e, net_e.init_params(rng), Preconditioner(1.0), SCHED)
    fresh = SampleBuffer(beta=1.0, samples=np.random.default_rng(5).standard_normal((50, 1)))
    tcfg = TrainingConfig(n_steps=4, batch_size=8, seed=6)
    train_at_temperature(score, energy, fresh, stub, 1.0, SCHED, tcfg)
    cached_one_call = (stub.counter.score_calls["training"] == 50
                       and stub.counter.energy_calls["training"] == 50)
    before_e = stub.counter.energy_calls["training"]
    before_s = stub.counter.score_calls["training"]
    tcfg2 = TrainingConfig(n_steps=3, batch_size=8, seed=7, use_cache=False)
    train_at_temperature(score, energy, fresh, stub, 1.0, SCHED, tcfg2)
    uncached_counts = (stub.counter.score_calls["training"] - before_s == 3 * 8
                       and stub.counter.energy_calls["training"] - before_e == 3 * 8)
    ok = mcmc_exact and cached_one_call and uncached_counts
    _report(10, "energy-meter exactness", ok,
            f"mcmc exact: {mcmc_exact}, cached one-call-per-point: {cached_one_call}, "
            f"uncached batch*steps: {uncached_counts}")


# --------------------------------------------------------------- criterion 11
TINY = {
    "target": {"kind": "gmm2d", "weights": [0.3, 0.7]},
    "seed": 99,
    "ladder": {"betas": [0.25, 0.5, 1.0]},
    "schedule": {"sigma_min": 0.05, "sigma_max": 80.0, "rho": 7.0},
    "model": {"hidden_dims": [16, 16], "energy_precond_a": 1.0},
    "mcmc": {"n_steps": 220, "burn_in": 100, "n_chains": 8, "thin": 3,
             "step_size": 2.0, "init_scale": 4.0},
    "train": {"n_steps": 25, "batch_size": 32, "log_every": 10},
    "anneal": {"n_particles": 64, "n_steps": 40, "ess_floor": 1e-6},
}

_DET_FILES = ("buffer.bin", "score.ckpt", "energy.ckpt", "metrics.json")


def test_criterion_11_determinism_and_resume(tmp_path):
    cfg_path = tmp_path / "tiny.yaml"
    cfg_path.write_text(yaml.safe_dump(TINY))
    runner = CliRunner()
    for name in ("r1", "r2"):
        res = runner.invoke(cli_main, ["ladder", "--config", str(cfg_path),
                                       "--seed", "99", "--out", str(tmp_path / name)])
        assert res.exit_code == 0, res.output
    identical = all(
        (tmp_path / "r1" / f"rung_{i:02d}" / f).read_bytes()
        == (tmp_path / "r2" / f"rung_{i:02d}" / f).read_bytes()
        for i in range(3) for f in _DET_FILES
    )
    cfg = build_ladder_config(json.loads(json.dumps(TINY)), out_dir=tmp_path / "killed")
    run_ladder(cfg, stop_after="rung01_anneal")
    resumed = resume(tmp_path / "killed")
    resume_identical = all(
        (tmp_path / "r1" / f"rung_{i:02d}" / f).read_bytes()
        == (tmp_path / "killed" / f"rung_{i:02d}" / f).read_bytes()
        for i in range(3) for f in _DET_FILES
    ) and resumed.completed
    ok = identical and resume_identical
    _report(11, "bit-identical reruns and kill-resume", ok,
            f"rerun identical: {identical}, resume identical: {resume_identical}")
