"""Progressive temperature-ladder runs: configuration, phases, persistence.

A run walks an ascending inverse-temperature ladder.  Rung 0 collects an
MCMC buffer at the highest temperature and trains the first model pair;
every subsequent rung generates the next buffer by annealed inference
(gamma = beta_next / beta_prev) and fine-tunes the models on it.  Every
phase persists its artifacts and a manifest entry atomically, so a
killed run resumes from the last completed phase and reproduces the
straight-through outputs bit for bit (all randomness is derived from
(seed, rung, phase) seed sequences).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .annealer import AnnealConfig, annealed_inference
from .energies import EnergyCallCounter, make_target
from .mcmc import ChainConfig, SampleBuffer, collect_buffer
from .metrics import MetricReport
from .netkernel import (
    DenoiserModel,
    EnergyModel,
    MLPBackbone,
    Preconditioner,
    load_checkpoint,
    save_checkpoint,
)
from .schedule import GammaSchedule, NoiseSchedule
from .training import TrainingConfig, train_at_temperature

__all__ = ["LadderConfig", "RunResult", "load_config", "build_ladder_config",
           "run_ladder", "resume"]

_PHASE_MCMC, _PHASE_TRAIN, _PHASE_ANNEAL, _PHASE_INIT = 0, 1, 2, 9


class ConfigError(ValueError):
    """Raised for invalid or inconsistent run configuration."""


@dataclass
class LadderConfig:
    """Resolved configuration of one ladder run."""

    raw: dict
    target_spec: dict
    betas: list
    schedule: NoiseSchedule
    model: dict
    mcmc: ChainConfig
    train_base: dict
    train_per_rung: list
    anneal_base: dict
    seed: int
    out_dir: Path


@dataclass
class RunResult:
    final_buffer: SampleBuffer
    reports: list
    meter: dict
    run_dir: Path
    completed: bool


def load_config(path) -> dict:
    with open(path) as fh:
        return yaml.safe_load(fh)


_MODEL_DEFAULTS = {
    "hidden_dims": [64, 64],
    "activation": "silu",
    "center": "none",
    "n_cond": 2,
    "sigma_data": "auto",
    "energy_precond_a": 1.0,
    "energy_precond_xi": 1.0,
    "warm_start": True,
    "beta_conditioned": False,
    "final_scale": 0.0,
}

_ANNEAL_DEFAULTS = {
    "n_particles": 2048,
    "n_steps": 500,
    "xi": 1.0,
    "gamma_kind": "linear",
    "gamma_sharpness": 10.0,
    "resample_policy": "ess",
    "ess_threshold": 0.5,
    "divergence_method": "exact",
    "hutchinson_probes": 8,
    "bridge_endpoint": True,
    "ess_floor": 0.01,
    "score_scale": 1.0,
    "du_dt_method": "fd",
    "low_ess_policy": "accept",  # accept | retry | halt
    "retry_factor": 2,
}


def build_ladder_config(raw: dict, out_dir=None, seed=None) -> LadderConfig:
    """Validate a parsed config mapping and fill defaults."""
    raw = dict(raw)
    if "target" not in raw or "kind" not in raw["target"]:
        raise ConfigError("config needs a target section with a kind")
    ladder = raw.get("ladder", {})
    betas = [float(b) for b in ladder.get("betas", [])]
    if not betas and {"beta_start", "beta_end", "n_rungs"} <= set(ladder):
        # geometric ladder: equal annealing factor per rung
        betas = list(np.geomspace(float(ladder["beta_start"]),
                                  float(ladder["beta_end"]),
                                  int(ladder["n_rungs"]) + 1))
        raw["ladder"] = dict(ladder, betas=[float(b) for b in betas])
    if not betas:
        raise ConfigError("config needs ladder.betas (or beta_start/beta_end/n_rungs)")
    if any(b2 <= b1 for b1, b2 in zip(betas, betas[1:])) or betas[0] <= 0:
        raise ConfigError("ladder.betas must be positive and strictly increasing")
    sched_kw = raw.get("schedule", {})
    schedule = NoiseSchedule(
        sigma_min=float(sched_kw.get("sigma_min", 0.05)),
        sigma_max=float(sched_kw.get("sigma_max", 80.0)),
        rho=float(sched_kw.get("rho", 7.0)),
    )
    model = {**_MODEL_DEFAULTS, **raw.get("model", {})}
    mcmc_kw = dict(raw.get("mcmc", {}))
    mcmc_kw.pop("seed", None)
    mcmc = ChainConfig(**mcmc_kw)
    train_base = dict(raw.get("train", {}))
    per_rung = raw.get("train_per_rung") or []
    train_per_rung = [dict(train_base) for _ in betas]
    for i, override in enumerate(per_rung[: len(betas)]):
        train_per_rung[i].update(override or {})
    anneal_base = {**_ANNEAL_DEFAULTS, **raw.get("anneal", {})}
    if anneal_base["low_ess_policy"] not in ("accept", "retry", "halt"):
        raise ConfigError(f"unknown low_ess_policy {anneal_base['low_ess_policy']!r}")
    seed = int(raw.get("seed", 0) if seed is None else seed)
    out = Path(out_dir if out_dir is not None else raw.get("out_dir", "run"))
    raw["seed"] = seed
    raw["out_dir"] = str(out)
    return LadderConfig(
        raw=raw,
        target_spec=dict(raw["target"]),
        betas=betas,
        schedule=schedule,
        model=model,
        mcmc=mcmc,
        train_base=train_base,
        train_per_rung=train_per_rung,
        anneal_base=anneal_base,
        seed=seed,
        out_dir=out,
    )


def _phase_rng(seed, rung, code, extra=None):
    key = [seed, rung, code] + ([extra] if extra is not None else [])
    return np.random.default_rng(np.random.SeedSequence(key))


def _phase_seed(seed, rung, code) -> int:
    return int(np.random.SeedSequence([seed, rung, code]).generate_state(1)[0])


def _atomic_json(path: Path, payload: dict):
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


class _Manifest:
    def __init__(self, run_dir: Path):
        self.path = run_dir / "manifest.json"
        self.data = {"status": "running", "config": None, "phases": {}}

    @classmethod
    def load(cls, run_dir: Path) -> "_Manifest":
        m = cls(run_dir)
        try:
            with open(m.path) as fh:
                m.data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"no manifest at {m.path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"corrupt manifest at {m.path}: {exc}") from None
        if "phases" not in m.data or "config" not in m.data:
            raise ConfigError(f"corrupt manifest at {m.path}: missing keys")
        return m

    def done(self, phase: str) -> bool:
        return self.data["phases"].get(phase, {}).get("status") == "done"

    def mark_done(self, phase: str, meter_snapshot: dict):
        self.data["phases"][phase] = {"status": "done", "meter": meter_snapshot}
        self.save()

    def save(self):
        _atomic_json(self.path, self.data)


class _Lock:
    """One live run per directory; stale locks of dead processes are replaced."""

    def __init__(self, run_dir: Path):
        self.path = run_dir / ".lock"

    def acquire(self):
        if self.path.exists():
            try:
                pid = int(self.path.read_text().strip())
            except ValueError:
                pid = -1
            if pid > 0 and _pid_alive(pid):
                raise RuntimeError(f"run directory is locked by live process {pid}")
            self.path.unlink()
        self.path.write_text(str(os.getpid()))

    def release(self):
        try:
            self.path.unlink()
        except FileNotFoundError:
            pass


def _pid_alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


def _rung_dir(out: Path, i: int) -> Path:
    return out / f"rung_{i:02d}"


def _buffer_report(buffer: SampleBuffer, extra=None, meter=None) -> MetricReport:
    metrics = {
        "beta": buffer.beta,
        "mean_sample_norm": float(np.linalg.norm(buffer.samples, axis=1).mean()),
    }
    if buffer.cached_energies is not None:
        metrics["mean_energy"] = float(buffer.cached_energies.mean())
        metrics["std_energy"] = float(buffer.cached_energies.std())
    metrics.update(extra or {})
    return MetricReport(
        metrics=metrics,
        sample_counts={"buffer": buffer.n},
        seed=None,
        energy_evals_spent=meter,
    )


def _write_anneal_diagnostics(path: Path, diag, n_steps: int):
    with open(path, "w") as fh:
        for k in range(len(diag.ess_trace)):
            rec = {
                "step": k,
                "t": (k + 1) / n_steps,
                "ess": float(diag.ess_trace[k]),
                "logw_mean": float(diag.logw_mean_trace[k]),
                "logw_std": float(diag.logw_std_trace[k]),
                "resampled": k in set(diag.resample_steps),
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        fh.write(json.dumps({"final_log_ess": diag.final_log_ess,
                             "warnings": diag.warnings}, sort_keys=True) + "\n")


def _build_models(cfg: LadderConfig, target, buffer: SampleBuffer):
    """Fresh model pair; sigma_data estimated from the first buffer."""
    sd = cfg.model["sigma_data"]
    if sd == "auto":
        sd = float(max(np.sqrt(buffer.samples.var(axis=0).mean()), 1e-3))
    precond = Preconditioner(sigma_data=float(sd))
    common = dict(
        dim=target.dim,
        hidden_dims=tuple(cfg.model["hidden_dims"]),
        n_cond=int(cfg.model["n_cond"]),
        activation=cfg.model["activation"],
        center=cfg.model["center"],
    )
    rng = _phase_rng(cfg.seed, 0, _PHASE_INIT)
    net_s = MLPBackbone(**common)
    net_e = MLPBackbone(**common)
    fs = float(cfg.model["final_scale"])
    ps = net_s.init_params(rng, final_scale=fs)
    pe = net_e.init_params(rng, final_scale=fs)
    beta0 = cfg.betas[0]
    a_const = cfg.model["energy_precond_a"]
    a_const = None if a_const == "schedule" else float(a_const)
    score = DenoiserModel(net_s, ps, precond, cfg.schedule, beta=beta0, beta_ref=beta0)
    energy = EnergyModel(net_e, pe, precond, cfg.schedule, beta=beta0, beta_ref=beta0,
                         a_const=a_const, xi_const=float(cfg.model["energy_precond_xi"]))
    return score, energy


def _train_config(cfg: LadderConfig, rung: int) -> TrainingConfig:
    kw = dict(cfg.train_per_rung[rung])
    kw["seed"] = _phase_seed(cfg.seed, rung, _PHASE_TRAIN)
    return TrainingConfig(**kw)


def _anneal_config(cfg: LadderConfig, rung: int, n_particles=None) -> AnnealConfig:
    a = cfg.anneal_base
    gamma_end = cfg.betas[rung] / cfg.betas[rung - 1]
    if a["gamma_kind"] == "constant":
        gamma = GammaSchedule("constant", 1.0, gamma_end)
    else:
        gamma = GammaSchedule(a["gamma_kind"], 1.0, gamma_end,
                              sharpness=float(a["gamma_sharpness"]))
    return AnnealConfig(
        n_particles=int(n_particles or a["n_particles"]),
        n_steps=int(a["n_steps"]),
        xi=float(a["xi"]),
        gamma=gamma,
        resample_policy=a["resample_policy"],
        ess_threshold=float(a["ess_threshold"]),
        divergence_method=a["divergence_method"],
        hutchinson_probes=int(a["hutchinson_probes"]),
        bridge_endpoint=bool(a["bridge_endpoint"]),
        ess_floor=float(a["ess_floor"]),
        score_scale=float(a["score_scale"]),
        du_dt_method=a["du_dt_method"],
        seed=_phase_seed(cfg.seed, rung, _PHASE_ANNEAL),
    )


def run_ladder(cfg: LadderConfig, stop_after: str | None = None) -> RunResult:
    """Execute (or continue) the full ladder in cfg.out_dir.

    Completed phases found in the manifest are loaded from their
    artifacts rather than re-run, which makes kill-and-resume equivalent
    to a straight-through run.  ``stop_after`` names a phase (for example
    ``"rung01_anneal"``) after which execution halts with a partial
    result, exercising exactly the kill path.
    """
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    lock = _Lock(out)
    lock.acquire()
    try:
        manifest_path = out / "manifest.json"
        if manifest_path.exists():
            manifest = _Manifest.load(out)
        else:
            manifest = _Manifest(out)
            manifest.data["config"] = cfg.raw
            manifest.save()

        target = make_target(cfg.target_spec)
        counter = EnergyCallCounter()
        target.counter = counter
        # counters resume from the last snapshot so totals stay monotone
        for rec in manifest.data["phases"].values():
            snap = rec.get("meter") or {}
            for phase_name, calls in snap.get("energy_calls", {}).items():
                counter.energy_calls[phase_name] = max(
                    counter.energy_calls[phase_name], calls)
            for phase_name, calls in snap.get("score_calls", {}).items():
                counter.score_calls[phase_name] = max(
                    counter.score_calls[phase_name], calls)

        reports = []
        buffers = {}
        n = len(cfg.betas)

        def finish(i_last):
            final = buffers[i_last]
            return RunResult(final_buffer=final, reports=reports,
                             meter=counter.snapshot(), run_dir=out,
                             completed=False)

        for i, beta in enumerate(cfg.betas):
            rdir = _rung_dir(out, i)
            rdir.mkdir(exist_ok=True)
            buf_path = rdir / "buffer.bin"
            metrics_path = rdir / "metrics.json"

            if i == 0:
                phase = f"rung{i:02d}_mcmc"
                if manifest.done(phase):
                    buffers[i] = SampleBuffer.load(buf_path)
                else:
                    counter.phase = "mcmc"
                    buffers[i] = collect_buffer(
                        target, beta, cfg.mcmc,
                        rng=_phase_rng(cfg.seed, i, _PHASE_MCMC),
                    )
                    buffers[i].save(buf_path)
                    rep = _buffer_report(buffers[i], meter=counter.snapshot())
                    rep.save(metrics_path)
                    manifest.mark_done(phase, counter.snapshot())
                reports.append(MetricReport.load(metrics_path))
                if stop_after == phase:
                    return finish(i)
            else:
                phase = f"rung{i:02d}_anneal"
                prev_dir = _rung_dir(out, i - 1)
                if manifest.done(phase):
                    buffers[i] = SampleBuffer.load(buf_path)
                else:
                    score = load_checkpoint(prev_dir / "score.ckpt")
                    energy = load_checkpoint(prev_dir / "energy.ckpt")
                    counter.phase = "bridging"
                    acfg = _anneal_config(cfg, i)
                    buf, diag = annealed_inference(
                        score, energy, target, beta, cfg.schedule, acfg,
                        rng=_phase_rng(cfg.seed, i, _PHASE_ANNEAL),
                    )
                    attempt = 0
                    policy = cfg.anneal_base["low_ess_policy"]
                    while (any(f.startswith("low_ess") for f in buf.flags)
                           and policy == "retry" and attempt < 2):
                        attempt += 1
                        acfg = _anneal_config(
                            cfg, i,
                            n_particles=acfg.n_particles * int(cfg.anneal_base["retry_factor"]),
                        )
                        buf, diag = annealed_inference(
                            score, energy, target, beta, cfg.schedule, acfg,
                            rng=_phase_rng(cfg.seed, i, _PHASE_ANNEAL, extra=attempt),
                        )
                    if any(f.startswith("low_ess") for f in buf.flags) and policy == "halt":
                        raise RuntimeError(
                            f"annealing to beta={beta} ended with ESS below floor"
                        )
                    buffers[i] = buf
                    buf.save(buf_path)
                    _write_anneal_diagnostics(rdir / "diagnostics.jsonl", diag, acfg.n_steps)
                    rep = _buffer_report(
                        buf,
                        extra={"final_log_ess": diag.final_log_ess,
                               "resample_events": len(diag.resample_steps)},
                        meter=counter.snapshot(),
                    )
                    rep.save(metrics_path)
                    manifest.mark_done(phase, counter.snapshot())
                reports.append(MetricReport.load(metrics_path))
                if stop_after == phase:
                    return finish(i)

            phase = f"rung{i:02d}_train"
            score_path = rdir / "score.ckpt"
            energy_path = rdir / "energy.ckpt"
            if not manifest.done(phase):
                counter.phase = "training"
                if i == 0:
                    score, energy = _build_models(cfg, target, buffers[0])
                elif cfg.model["warm_start"]:
                    prev_dir = _rung_dir(out, i - 1)
                    score = load_checkpoint(prev_dir / "score.ckpt").clone_with(beta=beta)
                    energy = load_checkpoint(prev_dir / "energy.ckpt").clone_with(beta=beta)
                else:
                    score, energy = _build_models(cfg, target, buffers[0])
                    score = score.clone_with(beta=beta)
                    energy = energy.clone_with(beta=beta)
                extra_pool = None
                if cfg.model["beta_conditioned"] and i > 0:
                    extra_pool = [buffers[j] for j in range(i)]
                tcfg = _train_config(cfg, i)
                sink_path = rdir / "train.jsonl"
                with open(sink_path, "w") as fh:
                    score, energy, _ = train_at_temperature(
                        score, energy, buffers[i], target, beta, cfg.schedule, tcfg,
                        report_sink=lambda r: fh.write(r.to_json() + "\n"),
                        extra_pool=extra_pool,
                    )
                save_checkpoint(score_path, score)
                save_checkpoint(energy_path, energy)
                manifest.mark_done(phase, counter.snapshot())
            if stop_after == phase:
                return finish(i)

        manifest.data["status"] = "complete"
        manifest.save()
        return RunResult(final_buffer=buffers[n - 1], reports=reports,
                         meter=counter.snapshot(), run_dir=out, completed=True)
    finally:
        lock.release()


def resume(run_dir, stop_after: str | None = None) -> RunResult:
    """Continue a run from its last completed phase.

    Reads the resolved configuration from the manifest; a finished run is
    revalidated and returned without recomputation.
    """
    run_dir = Path(run_dir)
    manifest = _Manifest.load(run_dir)
    cfg = build_ladder_config(manifest.data["config"], out_dir=run_dir)
    return run_ladder(cfg, stop_after=stop_after)
