"""Command-line entry points.

Every subcommand takes ``--config``, ``--seed`` and ``--out``; failures
exit nonzero after printing a machine-readable error JSON to stderr.
``TEMPDIFF_THREADS`` caps the BLAS thread pools (set before numpy loads).
"""

import os

if os.environ.get("TEMPDIFF_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, os.environ["TEMPDIFF_THREADS"])

import json
import sys

import click
import numpy as np

from .annealer import annealed_inference
from .energies import EnergyCallCounter, make_target
from .mcmc import SampleBuffer, collect_buffer
from .metrics import (
    MetricReport,
    energy_histogram_report,
    geometric_w2,
    interatomic_distances,
    wasserstein_1d,
)
from .netkernel import load_checkpoint, save_checkpoint
from .orchestrator import (
    _anneal_config,
    _phase_rng,
    _train_config,
    build_ladder_config,
    load_config,
    resume as resume_run,
    run_ladder,
)
from .training import train_at_temperature


def _fail(exc: BaseException):
    payload = {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    sys.exit(1)


def _common(config, seed, out):
    raw = load_config(config)
    return build_ladder_config(raw, out_dir=out, seed=seed)


@click.group()
def main():
    """Temperature-annealed diffusion sampling toolkit."""


def _opts(fn):
    fn = click.option("--config", required=True, type=click.Path(exists=True))(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--out", required=True, type=click.Path())(fn)
    return fn


@main.command()
@_opts
def mcmc(config, seed, out):
    """Collect the rung-0 buffer with MALA at the highest temperature."""
    try:
        cfg = _common(config, seed, out)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        target = make_target(cfg.target_spec)
        target.counter = EnergyCallCounter()
        target.counter.phase = "mcmc"
        buf = collect_buffer(target, cfg.betas[0], cfg.mcmc,
                             rng=_phase_rng(cfg.seed, 0, 0))
        buf.save(cfg.out_dir / "buffer.bin")
        MetricReport(
            metrics={"beta": buf.beta, "mean_energy": float(buf.cached_energies.mean())},
            sample_counts={"buffer": buf.n},
            seed=cfg.seed,
            energy_evals_spent=target.counter.snapshot(),
        ).save(cfg.out_dir / "metrics.json")
        click.echo(str(cfg.out_dir / "buffer.bin"))
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        _fail(exc)


@main.command()
@_opts
@click.option("--buffer", "buffer_path", required=True, type=click.Path(exists=True))
@click.option("--rung", type=int, default=0, help="ladder index of the buffer")
def train(config, seed, out, buffer_path, rung):
    """Train score and energy heads on an existing buffer."""
    try:
        cfg = _common(config, seed, out)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        from .orchestrator import _build_models

        target = make_target(cfg.target_spec)
        target.counter = EnergyCallCounter()
        target.counter.phase = "training"
        buf = SampleBuffer.load(buffer_path)
        score, energy = _build_models(cfg, target, buf)
        beta = buf.beta
        score = score.clone_with(beta=beta)
        energy = energy.clone_with(beta=beta)
        tcfg = _train_config(cfg, min(rung, len(cfg.betas) - 1))
        with open(cfg.out_dir / "train.jsonl", "w") as fh:
            score, energy, _ = train_at_temperature(
                score, energy, buf, target, beta, cfg.schedule, tcfg,
                report_sink=lambda r: fh.write(r.to_json() + "\n"))
        save_checkpoint(cfg.out_dir / "score.ckpt", score)
        save_checkpoint(cfg.out_dir / "energy.ckpt", energy)
        click.echo(str(cfg.out_dir / "score.ckpt"))
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command()
@_opts
@click.option("--score-ckpt", required=True, type=click.Path(exists=True))
@click.option("--energy-ckpt", required=True, type=click.Path(exists=True))
@click.option("--beta-next", type=float, required=True)
@click.option("--rung", type=int, default=1)
def anneal(config, seed, out, score_ckpt, energy_ckpt, beta_next, rung):
    """Anneal trained heads to a lower temperature buffer."""
    try:
        cfg = _common(config, seed, out)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        target = make_target(cfg.target_spec)
        target.counter = EnergyCallCounter()
        target.counter.phase = "bridging"
        score = load_checkpoint(score_ckpt)
        energy = load_checkpoint(energy_ckpt)
        betas = [score.beta, beta_next]
        cfg.betas[:] = betas  # gamma_end derives from the checkpoint tag
        acfg = _anneal_config(cfg, 1)
        buf, diag = annealed_inference(score, energy, target, beta_next,
                                       cfg.schedule, acfg,
                                       rng=_phase_rng(cfg.seed, rung, 2))
        buf.save(cfg.out_dir / "buffer.bin")
        MetricReport(
            metrics={"beta": buf.beta, "final_log_ess": diag.final_log_ess},
            sample_counts={"buffer": buf.n},
            seed=cfg.seed,
            energy_evals_spent=target.counter.snapshot(),
        ).save(cfg.out_dir / "metrics.json")
        click.echo(str(cfg.out_dir / "buffer.bin"))
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command(name="eval")
@_opts
@click.option("--generated", required=True, type=click.Path(exists=True))
@click.option("--reference", required=True, type=click.Path(exists=True))
def eval_cmd(config, seed, out, generated, reference):
    """Compare a generated buffer against a reference buffer."""
    try:
        cfg = _common(config, seed, out)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        ev = cfg.raw.get("eval", {})
        target = make_target(cfg.target_spec)
        target.counter = EnergyCallCounter()
        target.counter.phase = "evaluation"
        gen = SampleBuffer.load(generated)
        ref = SampleBuffer.load(reference)
        metrics = {}
        e_gen = gen.cached_energies
        e_ref = ref.cached_energies
        if e_gen is None:
            e_gen = target.energy(gen.samples)
        if e_ref is None:
            e_ref = target.energy(ref.samples)
        metrics.update(energy_histogram_report(
            e_gen, e_ref, cap=float(ev.get("energy_cap", 1000.0))))
        if cfg.target_spec["kind"] == "lennard_jones":
            d_gen = interatomic_distances(gen.samples)
            d_ref = interatomic_distances(ref.samples)
            metrics["distance_w2"] = wasserstein_1d(d_gen, d_ref, order=2)
            metrics["distance_w1"] = wasserstein_1d(d_gen, d_ref, order=1)
            cap = int(ev.get("assignment_cap", 2048))
            n = min(gen.n, ref.n, cap)
            rng = _phase_rng(cfg.seed, 0, 3)
            gi = rng.choice(gen.n, size=n, replace=False)
            ri = rng.choice(ref.n, size=n, replace=False)
            metrics["geometric_w2"] = geometric_w2(gen.samples[gi], ref.samples[ri])
        if cfg.target_spec["kind"] == "gmm2d":
            metrics["mode_mass_right_generated"] = float(np.mean(gen.samples[:, 0] > 0))
            metrics["mode_mass_right_reference"] = float(np.mean(ref.samples[:, 0] > 0))
        rep = MetricReport(
            metrics=metrics,
            sample_counts={"generated": gen.n, "reference": ref.n},
            seed=cfg.seed,
            energy_evals_spent=target.counter.snapshot(),
        )
        rep.save(cfg.out_dir / "metrics.json")
        click.echo(rep.to_json())
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command()
@_opts
def ladder(config, seed, out):
    """Run the full progressive ladder."""
    try:
        cfg = _common(config, seed, out)
        result = run_ladder(cfg)
        click.echo(json.dumps({
            "run_dir": str(result.run_dir),
            "completed": result.completed,
            "final_buffer": str(result.run_dir / f"rung_{len(cfg.betas) - 1:02d}" / "buffer.bin"),
            "energy_evals": result.meter,
        }, sort_keys=True))
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command(name="resume")
@click.option("--out", required=True, type=click.Path(exists=True))
def resume_cmd(out):
    """Continue an interrupted run from its manifest."""
    try:
        result = resume_run(out)
        click.echo(json.dumps({
            "run_dir": str(result.run_dir),
            "completed": result.completed,
            "energy_evals": result.meter,
        }, sort_keys=True))
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


if __name__ == "__main__":
    main()
