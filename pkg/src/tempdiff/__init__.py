"""Temperature-annealed diffusion samplers for unnormalized densities."""

__version__ = "0.1.0"

from . import annealer, energies, fields, mcmc, metrics, netkernel, orchestrator, schedule, training

__all__ = [
    "annealer",
    "energies",
    "fields",
    "mcmc",
    "metrics",
    "netkernel",
    "orchestrator",
    "schedule",
    "training",
    "__version__",
]
