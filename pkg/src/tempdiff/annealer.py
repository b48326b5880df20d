"""Inference-time annealing via a weighted SDE with sequential resampling.

Particles follow a drift built from a score field s and an energy field U
while per-particle log-weights integrate the reweighting rate that keeps
the weighted population on the annealed density q_t = exp(-gamma_t U_t)
(or its geometric-averaging variant).  Systematic resampling keeps the
effective sample size healthy; an optional end-point correction
re-weights against the true target before the final resampling so the
returned buffer is asymptotically unbiased for pi^beta_next.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .energies import DegenerateConfiguration
from .fields import ScaledScoreField
from .mcmc import SampleBuffer
from .metrics import log_ess
from .netkernel import divergence
from .schedule import GammaSchedule, NoiseSchedule

__all__ = [
    "ParticleEnsemble",
    "AnnealConfig",
    "AnnealDiagnostics",
    "fk_drift",
    "fk_log_weight_rate",
    "fk_log_weight_increment",
    "geometric_drift",
    "geometric_log_weight_rate",
    "snis_estimate",
    "resample",
    "annealed_inference",
    "geometric_inference",
    "reverse_sample",
]


@dataclass
class ParticleEnsemble:
    """K particle states with log-weights and resampling diagnostics."""

    states: np.ndarray
    log_weights: np.ndarray
    t: float = 0.0
    resample_count: int = 0
    ess_trace: list = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.states.shape[0]

    def normalized_ess(self) -> float:
        return float(np.exp(log_ess(self.log_weights)))


@dataclass(frozen=True)
class AnnealConfig:
    """Settings for one annealed-inference run."""

    n_particles: int = 1024
    n_steps: int = 500
    xi: float = 1.0
    gamma: GammaSchedule = field(default_factory=GammaSchedule)
    resample_policy: str = "ess"  # "ess" | "every" | "never"
    ess_threshold: float = 0.5
    divergence_method: str = "exact"  # "exact" | "hutchinson"
    hutchinson_probes: int = 8
    bridge_endpoint: bool = True
    ess_floor: float = 0.01
    score_scale: float = 1.0
    du_dt_method: str = "fd"  # "fd" | "forward"
    seed: int = 0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if self.resample_policy not in ("ess", "every", "never"):
            raise ValueError(f"unknown resample policy {self.resample_policy!r}")
        if not 0.0 < self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must be in (0, 1]")


@dataclass
class AnnealDiagnostics:
    """Per-run traces; the final ensemble is kept pre-final-resampling."""

    ess_trace: np.ndarray
    logw_mean_trace: np.ndarray
    logw_std_trace: np.ndarray
    resample_steps: list
    final_states: np.ndarray
    final_log_weights: np.ndarray
    final_log_ess: float
    energy_evals: int
    warnings: list


def fk_drift(score_field, energy_field, x, t, gamma_t, schedule, xi):
    """Drift and diffusion coefficient of the annealed weighted SDE.

    drift = -a_t x + (zeta^2/2) (s - gamma xi grad U); diffusion
    coefficient zeta sqrt(xi).
    """
    a_t, zeta = schedule.drift_coeffs(t)
    zeta_sq = zeta**2
    s = score_field.value(x, t)
    if gamma_t * xi != 0.0:
        gu = energy_field.grad(x, t)
        core = s - gamma_t * xi * gu
    else:
        core = s
    drift = -a_t * x + 0.5 * zeta_sq * core
    return drift, float(zeta * np.sqrt(xi))


def fk_log_weight_rate(score_field, energy_field, x, t, gamma_t, dgamma_dt,
                       schedule, divergence_method="exact", hutchinson_probes=8,
                       rng=None, du_dt_method="fd"):
    """Reweighting rate g(x, t) of the annealed weighted SDE.

    g = (zeta^2/2) div s - gamma <grad U, -a x + (zeta^2/2) s>
        - gamma dU/dt - U dgamma/dt,
    the last term active only for time-dependent annealing schedules.
    """
    a_t, zeta = schedule.drift_coeffs(t)
    zeta_sq = zeta**2
    s = score_field.value(x, t)
    gu = energy_field.grad(x, t)
    div_s = divergence(score_field, x, t, method=divergence_method,
                       n_probes=hutchinson_probes, rng=rng)
    transport = -a_t * x + 0.5 * zeta_sq * s
    du_dt = energy_field.dt(x, t, method=du_dt_method)
    g = 0.5 * zeta_sq * div_s - gamma_t * np.sum(gu * transport, axis=1) - gamma_t * du_dt
    if dgamma_dt != 0.0:
        g = g - energy_field.value(x, t) * dgamma_dt
    return g


def fk_log_weight_increment(score_field, energy_field, x, t, dt, gamma_t,
                            dgamma_dt, schedule, **kw):
    """One Euler step of the log-weight integral: rate(x, t) * dt."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    return dt * fk_log_weight_rate(score_field, energy_field, x, t, gamma_t,
                                   dgamma_dt, schedule, **kw)


def geometric_drift(score_field, energy_field, x, t, gamma_mix, schedule, xi):
    """Drift of the geometric-averaging SDE (mixing toward N(0, sigma_t^2))."""
    a_t, zeta = schedule.drift_coeffs(t)
    zeta_sq = zeta**2
    sigma = schedule.sigma_rev(t)
    one_m = 1.0 - gamma_mix
    drift = -a_t * x
    if one_m != 0.0:
        s = score_field.value(x, t)
        core = s - xi * energy_field.grad(x, t) if xi != 0.0 else s
        drift = drift + one_m * 0.5 * zeta_sq * core
    if gamma_mix != 0.0:
        drift = drift - gamma_mix / sigma**2 * (1.0 + xi * zeta_sq / 2.0) * x
    return drift, float(zeta * np.sqrt(xi))


def geometric_log_weight_rate(score_field, energy_field, x, t, gamma_mix,
                              schedule, divergence_method="exact",
                              hutchinson_probes=8, rng=None, du_dt_method="fd"):
    """Reweighting rate of the geometric-averaging SDE.

    g = <-(1-g) grad U - g x/sigma^2, -a x + (1-g)(zeta^2/2) s - g x/sigma^2>
        + (1-g)(zeta^2/2) div s - (1-g) dU/dt + g ||x||^2 sigma'/sigma^3
    with g = gamma_mix and sigma' the reverse-time derivative of sigma.
    """
    a_t, zeta = schedule.drift_coeffs(t)
    zeta_sq = zeta**2
    sigma = schedule.sigma_rev(t)
    dsigma = schedule.dsigma_dt_rev(t)
    one_m = 1.0 - gamma_mix
    transport = -a_t * x
    cotangent = np.zeros_like(x)
    out = np.zeros(x.shape[0])
    if one_m != 0.0:
        s = score_field.value(x, t)
        gu = energy_field.grad(x, t)
        transport = transport + one_m * 0.5 * zeta_sq * s
        cotangent = cotangent - one_m * gu
        div_s = divergence(score_field, x, t, method=divergence_method,
                           n_probes=hutchinson_probes, rng=rng)
        du_dt = energy_field.dt(x, t, method=du_dt_method)
        out = out + one_m * 0.5 * zeta_sq * div_s - one_m * du_dt
    if gamma_mix != 0.0:
        transport = transport - gamma_mix / sigma**2 * x
        cotangent = cotangent - gamma_mix / sigma**2 * x
        out = out + gamma_mix * np.sum(x * x, axis=1) * dsigma / sigma**3
    return out + np.sum(cotangent * transport, axis=1)


def snis_estimate(ensemble: ParticleEnsemble, phi) -> np.ndarray:
    """Self-normalized importance-sampling estimate of E[phi].

    phi maps states (K, d) to per-particle values (K,) or (K, m); the
    result is the softmax(log w)-weighted average, stabilized by
    max-log-weight subtraction.
    """
    lw = ensemble.log_weights
    finite = np.isfinite(lw)
    if not finite.any():
        raise RuntimeError("all particle weights vanished (-inf log-weights)")
    w = np.zeros_like(lw)
    m = lw[finite].max()
    w[finite] = np.exp(lw[finite] - m)
    w /= w.sum()
    vals = np.asarray(phi(ensemble.states), dtype=np.float64)
    if vals.ndim == 1:
        return float(np.sum(w * vals))
    return np.sum(w[:, None] * vals, axis=0)


def _systematic_indices(log_weights, rng) -> np.ndarray:
    """Stratified ancestor indices proportional to softmax(log_weights)."""
    lw = np.asarray(log_weights, dtype=np.float64)
    finite = np.isfinite(lw)
    if not finite.any():
        raise RuntimeError("cannot resample: all particle weights vanished")
    w = np.zeros_like(lw)
    m = lw[finite].max()
    w[finite] = np.exp(lw[finite] - m)
    w /= w.sum()
    k = lw.size
    positions = (np.arange(k) + rng.uniform()) / k
    return np.clip(np.searchsorted(np.cumsum(w), positions), 0, k - 1)


def resample(ensemble: ParticleEnsemble, rng) -> ParticleEnsemble:
    """Systematic (low-variance stratified) resampling, in place.

    Draws one uniform offset, selects particles at the K stratified
    positions of the cumulative weight profile, and resets all
    log-weights to zero (uniform).
    """
    idx = _systematic_indices(ensemble.log_weights, rng)
    ensemble.states = ensemble.states[idx]
    ensemble.log_weights = np.zeros(ensemble.n)
    ensemble.resample_count += 1
    return ensemble


def _should_resample(cfg: AnnealConfig, ensemble: ParticleEnsemble) -> bool:
    if cfg.resample_policy == "never":
        return False
    if cfg.resample_policy == "every":
        return True
    return ensemble.normalized_ess() < cfg.ess_threshold


def _integrate(drift_fn, rate_fn, schedule, cfg: AnnealConfig, dim, rng):
    """Euler-Maruyama on states, Euler on log-weights, resampling per policy."""
    k = cfg.n_particles
    x = schedule.sigma_max * rng.standard_normal((k, dim))
    logw = np.zeros(k)
    ens = ParticleEnsemble(states=x, log_weights=logw)
    dt = 1.0 / cfg.n_steps
    ess_trace, mean_trace, std_trace, resample_steps = [], [], [], []
    warns = []
    for step in range(cfg.n_steps):
        t = step * dt
        alive = np.isfinite(ens.log_weights)
        if not alive.any():
            raise RuntimeError("all particle weights vanished during annealing")
        g = rate_fn(ens.states, t)
        drift, dcoef = drift_fn(ens.states, t)
        bad = ~(np.isfinite(g) & np.isfinite(drift).all(axis=1))
        if bad.any():
            ens.log_weights[bad] = -np.inf
            alive &= ~bad
        ens.log_weights[alive] += g[alive] * dt
        move = drift * dt + dcoef * np.sqrt(dt) * rng.standard_normal(ens.states.shape)
        x_new = np.where(alive[:, None], ens.states + move, ens.states)
        still_bad = ~np.isfinite(x_new).all(axis=1)
        if still_bad.any():
            ens.log_weights[still_bad] = -np.inf
            x_new[still_bad] = ens.states[still_bad]
        ens.states = x_new
        ens.t = t + dt
        fin = ens.log_weights[np.isfinite(ens.log_weights)]
        ess_trace.append(ens.normalized_ess())
        mean_trace.append(float(fin.mean()) if fin.size else float("nan"))
        std_trace.append(float(fin.std()) if fin.size else float("nan"))
        last = step == cfg.n_steps - 1
        if not last and _should_resample(cfg, ens):
            resample(ens, rng)
            resample_steps.append(step)
    ens.ess_trace = ess_trace
    return (ens, np.asarray(ess_trace), np.asarray(mean_trace),
            np.asarray(std_trace), resample_steps, warns)


def _batched_energy(target, x, warns):
    """Target energies with per-row fallback on degenerate configurations."""
    try:
        return target.energy(x), x.shape[0]
    except DegenerateConfiguration:
        e = np.full(x.shape[0], np.inf)
        n_ok = 0
        for i in range(x.shape[0]):
            try:
                e[i] = target.energy(x[i])
                n_ok += 1
            except DegenerateConfiguration:
                pass
        warns.append("degenerate configurations at bridging were dropped")
        return e, n_ok


def annealed_inference(score_field, energy_field, target_next, beta_next,
                       schedule: NoiseSchedule, cfg: AnnealConfig,
                       rng=None):
    """Generate a buffer at the next inverse temperature from trained fields.

    Particles start at the wide-Gaussian prior N(0, sigma_max^2 I) with
    zero log-weights, follow the annealed weighted SDE with the
    configured gamma schedule, and resample per policy.  At t = 1, if
    ``cfg.bridge_endpoint``, weights are multiplied by the density ratio
    pi^beta_next / exp(-gamma(1) U_1) (one target energy evaluation per
    surviving particle), and one final resampling produces the unweighted
    buffer tagged beta_next.

    Returns:
        (SampleBuffer, AnnealDiagnostics); the diagnostics keep the
        pre-resampling ensemble for SNIS estimates and weight statistics.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    sf = score_field if cfg.score_scale == 1.0 else ScaledScoreField(score_field, cfg.score_scale)
    gamma = cfg.gamma

    def drift_fn(x, t):
        return fk_drift(sf, energy_field, x, t, float(gamma.gamma(t)), schedule, cfg.xi)

    def rate_fn(x, t):
        return fk_log_weight_rate(
            sf, energy_field, x, t, float(gamma.gamma(t)), float(gamma.dgamma_dt(t)),
            schedule, divergence_method=cfg.divergence_method,
            hutchinson_probes=cfg.hutchinson_probes, rng=rng,
            du_dt_method=cfg.du_dt_method,
        )

    ens, ess_trace, mean_trace, std_trace, resample_steps, warns = _integrate(
        drift_fn, rate_fn, schedule, cfg, sf.dim, rng
    )

    energy_evals = 0
    cached_e = None
    if cfg.bridge_endpoint:
        alive = np.isfinite(ens.log_weights)
        e_target = np.full(ens.n, np.inf)
        e_vals, n_ok = _batched_energy(target_next, ens.states[alive], warns)
        e_target[alive] = e_vals
        energy_evals += n_ok
        u1 = energy_field.value(ens.states, 1.0)
        gamma_end = float(gamma.gamma(1.0))
        bridge = -beta_next * e_target + gamma_end * u1
        ens.log_weights = np.where(
            np.isfinite(bridge) & alive, ens.log_weights + bridge, -np.inf
        )
        cached_e = e_target

    final_log_ess = log_ess(ens.log_weights)
    diag_states = ens.states.copy()
    diag_logw = ens.log_weights.copy()

    flags = []
    if np.exp(final_log_ess) < cfg.ess_floor:
        flags.append(f"low_ess:{np.exp(final_log_ess):.3g}")
        warnings.warn(
            f"final normalized ESS {np.exp(final_log_ess):.3g} below floor {cfg.ess_floor}"
        )
        warns.append(flags[-1])

    # final resampling, tracked so bridged energies carry into the buffer
    idx = _systematic_indices(ens.log_weights, rng)
    ens.states = ens.states[idx]
    ens.log_weights = np.zeros(ens.n)
    ens.resample_count += 1

    buffer = SampleBuffer(
        beta=float(beta_next),
        samples=ens.states.copy(),
        cached_energies=cached_e[idx].copy() if cached_e is not None else None,
        cached_scores=None,
        provenance="annealed_inference",
        energy_evals_spent=energy_evals,
        flags=flags,
    )
    diagnostics = AnnealDiagnostics(
        ess_trace=ess_trace,
        logw_mean_trace=mean_trace,
        logw_std_trace=std_trace,
        resample_steps=resample_steps,
        final_states=diag_states,
        final_log_weights=diag_logw,
        final_log_ess=float(final_log_ess),
        energy_evals=energy_evals,
        warnings=warns,
    )
    return buffer, diagnostics


def geometric_inference(score_field, energy_field, schedule: NoiseSchedule,
                        cfg: AnnealConfig, gamma_mix: float,
                        beta_tag: float = 1.0, rng=None):
    """Weighted sampling from the geometric average of the energy model.

    ``gamma_mix`` interpolates between the annealed model (0) and the pure
    Gaussian N(0, sigma_t^2) (1).  No end-point bridging applies: the end
    point of the path is the mixed density itself.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    sf = score_field if cfg.score_scale == 1.0 else ScaledScoreField(score_field, cfg.score_scale)

    def drift_fn(x, t):
        return geometric_drift(sf, energy_field, x, t, gamma_mix, schedule, cfg.xi)

    def rate_fn(x, t):
        return geometric_log_weight_rate(
            sf, energy_field, x, t, gamma_mix, schedule,
            divergence_method=cfg.divergence_method,
            hutchinson_probes=cfg.hutchinson_probes, rng=rng,
            du_dt_method=cfg.du_dt_method,
        )

    ens, ess_trace, mean_trace, std_trace, resample_steps, warns = _integrate(
        drift_fn, rate_fn, schedule, cfg, sf.dim, rng
    )
    final_log_ess = log_ess(ens.log_weights)
    diag_states = ens.states.copy()
    diag_logw = ens.log_weights.copy()
    flags = []
    if np.exp(final_log_ess) < cfg.ess_floor:
        flags.append(f"low_ess:{np.exp(final_log_ess):.3g}")
        warns.append(flags[-1])
    resample(ens, rng)
    buffer = SampleBuffer(
        beta=float(beta_tag),
        samples=ens.states.copy(),
        provenance="annealed_inference",
        energy_evals_spent=0,
        flags=flags,
    )
    diagnostics = AnnealDiagnostics(
        ess_trace=ess_trace,
        logw_mean_trace=mean_trace,
        logw_std_trace=std_trace,
        resample_steps=resample_steps,
        final_states=diag_states,
        final_log_weights=diag_logw,
        final_log_ess=float(final_log_ess),
        energy_evals=0,
        warnings=warns,
    )
    return buffer, diagnostics


def reverse_sample(score_field, schedule: NoiseSchedule, n_samples: int,
                   n_steps: int = 500, xi: float = 1.0, rng=None) -> np.ndarray:
    """Plain reverse-SDE generation (no weights); xi = 0 gives the ODE."""
    rng = rng if rng is not None else np.random.default_rng(0)
    x = schedule.sigma_max * rng.standard_normal((n_samples, score_field.dim))
    dt = 1.0 / n_steps
    for step in range(n_steps):
        t = step * dt
        a_t, zeta = schedule.drift_coeffs(t)
        s = score_field.value(x, t)
        x = x + (-a_t * x + 0.5 * zeta**2 * (1.0 + xi) * s) * dt
        if xi > 0:
            x = x + zeta * np.sqrt(xi * dt) * rng.standard_normal(x.shape)
    return x
