"""Training loop for the score and energy heads at one temperature.

Per iteration the loop draws a buffer batch, samples a noise level,
perturbs, and takes one optimizer step on each head:

* score head: denoising regression onto the clean samples, plus a
  target-score regression active at low noise that injects the analytic
  score of the annealed target;
* energy head: distillation of the (frozen) score head into -grad U,
  plus end-point pinning of -U onto beta log pi to fix the additive
  gauge.

EMA copies of both parameter vectors are maintained and returned.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass

import numpy as np

from .energies import TargetDensity
from .mcmc import SampleBuffer
from .netkernel import DenoiserModel, EnergyModel, grad_params
from .netkernel import tape
from .netkernel.mlp import ParamVector
from .schedule import NoiseSchedule, TimeSampler

__all__ = [
    "TrainingConfig",
    "LossReport",
    "TrainingDiverged",
    "Adam",
    "dsm_loss",
    "tsm_loss",
    "distill_loss",
    "pinning_loss",
    "ensure_buffer_cache",
    "train_at_temperature",
]


class TrainingDiverged(RuntimeError):
    """Raised when too many optimizer steps hit non-finite losses."""


@dataclass(frozen=True)
class TrainingConfig:
    """Hyperparameters of one per-temperature training run."""

    batch_size: int = 256
    n_steps: int = 4000
    learning_rate: float = 1e-3
    ema_decay: float = 0.999
    w_dsm: float = 1.0
    w_tsm: float = 0.01
    w_distill: float = 1.0
    w_pin: float = 1.0
    t_thresh: float = 0.8
    lambda_kind: str = "precond"  # "precond" | "one"
    p_mean: float = -1.2
    p_std: float = 1.2
    rotation_augment: bool = False
    use_cache: bool = True
    seed: int = 0
    log_every: int = 100
    checkpoint_every: int = 0  # 0 disables periodic checkpoints
    max_bad_fraction: float = 0.01
    bad_window: int = 200

    def __post_init__(self):
        for name in ("w_dsm", "w_tsm", "w_distill", "w_pin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.t_thresh <= 1.0:
            raise ValueError("t_thresh must be in [0, 1]")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must be in [0, 1)")
        if self.lambda_kind not in ("precond", "one"):
            raise ValueError(f"unknown lambda_kind {self.lambda_kind!r}")


@dataclass
class LossReport:
    """One training-step record; serialized as a JSON line."""

    step: int
    dsm: float
    tsm: float
    distill: float
    pin: float
    grad_norm_theta: float
    grad_norm_eta: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


class Adam:
    """Adam on a flat parameter array, bias-corrected, no weight decay."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(values)
            self.v = np.zeros_like(values)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad**2
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return values - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _lambda_weight(kind: str, sigma, sigma_data: float):
    if kind == "one":
        return np.ones_like(np.asarray(sigma, dtype=np.float64))
    return (sigma**2 + sigma_data**2) / (sigma * sigma_data) ** 2


def dsm_loss(model: DenoiserModel, tensors, batch, lambda_kind="precond"):
    """Per-sample weighted denoising regression lambda(t) ||x - D(x_t)||^2."""
    d = model.denoise_tape(tensors, batch["x_t"], batch["t"], beta=batch["beta"])
    diff = d - tape.const(batch["x"])
    lam = _lambda_weight(lambda_kind, batch["sigma"], model.precond.sigma_data)
    return tape.const(lam) * (diff * diff).sum(axis=1)


def tsm_loss(model: DenoiserModel, tensors, batch, t_thresh: float):
    """Target-score regression, active only at low noise (t >= t_thresh).

    The regression target is sigma^2 * beta * score(x) + x built from the
    analytic score of the annealed target at the clean sample.
    """
    mask = (batch["t"] >= t_thresh).astype(np.float64)
    if not mask.any():
        return tape.const(np.zeros(batch["x"].shape[0])) * tensors["b0"].sum()
    beta = np.broadcast_to(batch["beta"], (batch["x"].shape[0],))
    target = batch["sigma"][:, None] ** 2 * beta[:, None] * batch["score_x"] + batch["x"]
    d = model.denoise_tape(tensors, batch["x_t"], batch["t"], beta=batch["beta"])
    diff = d - tape.const(target)
    return tape.const(mask) * (diff * diff).sum(axis=1)


def distill_loss(model: EnergyModel, tensors, batch, denoised_frozen,
                 lambda_kind="precond"):
    """Score distillation onto the energy head.

    Regresses sigma^2 (-grad U) + x_t onto the frozen denoiser output;
    the frozen values are plain arrays evaluated outside the tape, so no
    gradient can flow into the score head by construction.
    """
    gx = model.grad_x_tape(tensors, batch["x_t"], batch["t"], beta=batch["beta"])
    sig2 = batch["sigma"][:, None] ** 2
    pred = tape.const(batch["x_t"]) - tape.const(sig2) * gx
    diff = pred - tape.const(denoised_frozen)
    lam = _lambda_weight(lambda_kind, batch["sigma"], model.precond.sigma_data)
    return tape.const(lam) * (diff * diff).sum(axis=1)


def pinning_loss(model: EnergyModel, tensors, batch):
    """End-point gauge fix: ||(-U(x, t=1)) - beta log pi(x)||^2.

    beta log pi(x) = -beta E(x), read from the batch's cached energies.
    """
    n = batch["x"].shape[0]
    beta = np.broadcast_to(batch["beta"], (n,))
    u = model.energy_tape(tensors, batch["x"], np.ones(n), beta=batch["beta"])
    target = tape.const(-beta * batch["energy_x"])
    diff = (-1.0) * u - target
    return diff * diff


def loss_values(score_model: DenoiserModel, energy_model: EnergyModel, batch,
                cfg: "TrainingConfig") -> dict:
    """Plain numpy evaluation of the four per-batch mean losses (for logs)."""
    n = batch["x"].shape[0]
    beta = np.broadcast_to(batch["beta"], (n,))
    d = score_model.denoise(batch["x_t"], batch["t"], beta=batch["beta"])
    lam = _lambda_weight(cfg.lambda_kind, batch["sigma"], score_model.precond.sigma_data)
    dsm = float(np.mean(lam * np.sum((batch["x"] - d) ** 2, axis=1)))
    tsm = 0.0
    if batch.get("score_x") is not None:
        mask = (batch["t"] >= cfg.t_thresh).astype(np.float64)
        target = batch["sigma"][:, None] ** 2 * beta[:, None] * batch["score_x"] + batch["x"]
        tsm = float(np.mean(mask * np.sum((target - d) ** 2, axis=1)))
    gx = energy_model.grad_x(batch["x_t"], batch["t"], beta=batch["beta"])
    pred = batch["x_t"] - batch["sigma"][:, None] ** 2 * gx
    lam_e = _lambda_weight(cfg.lambda_kind, batch["sigma"], energy_model.precond.sigma_data)
    distill = float(np.mean(lam_e * np.sum((pred - d) ** 2, axis=1)))
    pin = 0.0
    if cfg.w_pin > 0:
        u = energy_model.energy(batch["x"], np.ones(n), beta=batch["beta"])
        pin = float(np.mean((beta * batch["energy_x"] - u) ** 2))
    return {"dsm": dsm, "tsm": tsm, "distill": distill, "pin": pin}


def ensure_buffer_cache(buffer: SampleBuffer, target: TargetDensity) -> int:
    """Fill missing cached energies/scores with one call per buffer point.

    Returns the number of target evaluations spent (0 when already cached).
    """
    spent = 0
    if buffer.cached_energies is None:
        buffer.cached_energies = target.energy(buffer.samples)
        spent += buffer.n
    if buffer.cached_scores is None:
        buffer.cached_scores = target.score(buffer.samples)
        spent += buffer.n
    buffer.energy_evals_spent += spent
    return spent


def _random_rotations(n, rng):
    """Uniform random rotation matrices (QR sign-fixed), shape (n, 3, 3)."""
    a = rng.standard_normal((n, 3, 3))
    out = np.empty_like(a)
    for i in range(n):
        q, r = np.linalg.qr(a[i])
        q = q * np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        out[i] = q
    return out


def _rotate_batch(x, scores, rng):
    n = x.shape[0]
    rots = _random_rotations(n, rng)
    pts = x.reshape(n, -1, 3)
    x_rot = np.einsum("nij,npj->npi", rots, pts).reshape(x.shape)
    s_rot = None
    if scores is not None:
        s_pts = scores.reshape(n, -1, 3)
        s_rot = np.einsum("nij,npj->npi", rots, s_pts).reshape(scores.shape)
    return x_rot, s_rot


def train_at_temperature(score_model: DenoiserModel, energy_model: EnergyModel,
                         buffer: SampleBuffer, target: TargetDensity, beta: float,
                         schedule: NoiseSchedule, cfg: TrainingConfig,
                         report_sink=None, extra_pool=None, checkpoint_sink=None):
    """Run the per-temperature training loop; returns EMA models.

    The buffer must be tagged with inverse temperature ``beta``.  Target
    evaluations happen only through :func:`ensure_buffer_cache` (one
    energy and one score call per buffer point when uncached); the loop
    itself touches no target.  ``report_sink`` receives one LossReport
    per ``cfg.log_every`` steps.

    ``extra_pool`` is a list of additional SampleBuffers from earlier
    (higher-temperature) rungs; when given, batches mix all buffers and
    every loss is conditioned on the per-sample inverse temperature (the
    single beta-conditioned model mode).  Plain sequential fine-tuning
    passes none.

    ``checkpoint_sink`` is called every ``cfg.checkpoint_every`` steps
    (when > 0) with (step, score_ema_model, energy_ema_model) so callers
    can persist mid-run snapshots in the checkpoint format.

    Returns:
        (score_ema, energy_ema, reports): trained EMA copies (plain
        parameters when ``ema_decay`` is 0) and the list of reports.

    Raises:
        TrainingDiverged: if more than ``max_bad_fraction`` of the steps
            in a sliding window produce non-finite losses.
    """
    if buffer.n == 0:
        raise ValueError("buffer is empty")
    if abs(buffer.beta - beta) > 1e-12:
        raise ValueError(f"buffer beta {buffer.beta} does not match {beta}")
    pool = [buffer] + list(extra_pool or [])
    rng = np.random.default_rng(cfg.seed)
    sampler = TimeSampler(p_mean=cfg.p_mean, p_std=cfg.p_std)
    use_tsm = cfg.w_tsm > 0
    use_pin = cfg.w_pin > 0

    if cfg.use_cache:
        for buf in pool:
            ensure_buffer_cache(buf, target)
        all_x = np.concatenate([b.samples for b in pool], axis=0)
        all_s = np.concatenate([b.cached_scores for b in pool], axis=0)
        all_e = np.concatenate([b.cached_energies for b in pool], axis=0)
    else:
        all_x = np.concatenate([b.samples for b in pool], axis=0)
        all_s = all_e = None
    all_beta = np.concatenate([np.full(b.n, b.beta) for b in pool])
    n_pool = all_x.shape[0]

    theta = score_model.params.copy()
    eta = energy_model.params.copy()
    ema_theta = theta.copy()
    ema_eta = eta.copy()
    opt_theta = Adam(lr=cfg.learning_rate)
    opt_eta = Adam(lr=cfg.learning_rate)

    reports = []
    bad_steps = []
    t_start = time.monotonic()

    for step in range(cfg.n_steps):
        idx = rng.integers(0, n_pool, size=cfg.batch_size)
        x = all_x[idx]
        beta_b = all_beta[idx]
        if cfg.use_cache:
            score_x = all_s[idx] if use_tsm else None
            energy_x = all_e[idx]
            if cfg.rotation_augment:
                x, score_x = _rotate_batch(x, score_x, rng)
        else:
            if cfg.rotation_augment:
                x, _ = _rotate_batch(x, None, rng)
            score_x = target.score(x) if use_tsm else None
            energy_x = target.energy(x) if use_pin else np.zeros(cfg.batch_size)
        t, sigma = sampler.sample(schedule, rng, cfg.batch_size)
        x_t, _ = schedule.perturb(x, 1.0 - t, rng)
        batch = {"x": x, "x_t": x_t, "t": t, "sigma": sigma, "beta": beta_b,
                 "score_x": score_x, "energy_x": energy_x}

        cur_score = score_model.clone_with(params=theta)
        cur_energy = energy_model.clone_with(params=eta)

        def theta_loss(tensors, b):
            total = cfg.w_dsm * dsm_loss(cur_score, tensors, b, cfg.lambda_kind)
            if use_tsm:
                total = total + cfg.w_tsm * tsm_loss(cur_score, tensors, b, cfg.t_thresh)
            return total

        def eta_loss(tensors, b):
            frozen = cur_score.denoise(b["x_t"], b["t"], beta=b["beta"])
            total = cfg.w_distill * distill_loss(cur_energy, tensors, b, frozen, cfg.lambda_kind)
            if use_pin:
                total = total + cfg.w_pin * pinning_loss(cur_energy, tensors, b)
            return total

        try:
            loss_th, grad_th = grad_params(theta_loss, score_model.backbone, theta, batch)
            loss_et, grad_et = grad_params(eta_loss, energy_model.backbone, eta, batch)
        except FloatingPointError:
            bad_steps.append(step)
            recent = [s for s in bad_steps if s > step - cfg.bad_window]
            if len(recent) > cfg.max_bad_fraction * cfg.bad_window:
                raise TrainingDiverged(
                    f"{len(recent)} non-finite steps in the last {cfg.bad_window}"
                ) from None
            continue

        theta = ParamVector(opt_theta.step(theta.values, grad_th.values), theta.layout)
        eta = ParamVector(opt_eta.step(eta.values, grad_et.values), eta.layout)
        d = cfg.ema_decay
        ema_theta.values = d * ema_theta.values + (1 - d) * theta.values
        ema_eta.values = d * ema_eta.values + (1 - d) * eta.values

        if checkpoint_sink is not None and cfg.checkpoint_every > 0 \
                and (step + 1) % cfg.checkpoint_every == 0:
            checkpoint_sink(
                step,
                score_model.clone_with(params=ema_theta.copy(), beta=beta,
                                       train_step=score_model.train_step + step + 1),
                energy_model.clone_with(params=ema_eta.copy(), beta=beta,
                                        train_step=energy_model.train_step + step + 1),
            )

        if report_sink is not None and (step % cfg.log_every == 0 or step == cfg.n_steps - 1):
            vals = loss_values(cur_score, cur_energy, batch, cfg)
            rep = LossReport(
                step=step,
                dsm=vals["dsm"],
                tsm=vals["tsm"],
                distill=vals["distill"],
                pin=vals["pin"],
                grad_norm_theta=float(np.linalg.norm(grad_th.values)),
                grad_norm_eta=float(np.linalg.norm(grad_et.values)),
                wall_time=time.monotonic() - t_start,
            )
            reports.append(rep)
            report_sink(rep)

    new_step = score_model.train_step + cfg.n_steps
    score_out = score_model.clone_with(params=ema_theta, beta=beta, train_step=new_step)
    energy_out = energy_model.clone_with(params=ema_eta, beta=beta, train_step=new_step)
    return score_out, energy_out, reports
