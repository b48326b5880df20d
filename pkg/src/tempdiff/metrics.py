"""Evaluation metrics: Wasserstein distances, ESS diagnostics, baselines."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .schedule import NoiseSchedule

__all__ = [
    "wasserstein_1d",
    "geometric_w2",
    "interatomic_distances",
    "log_ess",
    "direct_temperature_is",
    "score_scaling_sample",
    "energy_histogram_report",
    "export_histogram_csv",
    "MetricReport",
]


def wasserstein_1d(a, b, order: int = 1) -> float:
    """Exact 1-D W_p between empirical distributions, p in {1, 2}.

    Equal sizes reduce to the sorted coupling; unequal sizes integrate
    |F_a^{-1}(q) - F_b^{-1}(q)|^p over the merged quantile breakpoints,
    which is exact for piecewise-constant empirical quantile functions.
    """
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ValueError("empty sample set")
    n, m = a.size, b.size
    if n == m:
        cost = np.mean(np.abs(a - b) ** order)
        return float(cost ** (1.0 / order))
    qs = np.union1d(np.arange(1, n + 1) / n, np.arange(1, m + 1) / m)
    edges = np.concatenate([[0.0], qs])
    widths = np.diff(edges)
    mids = 0.5 * (edges[:-1] + edges[1:])
    ia = np.minimum((mids * n).astype(int), n - 1)
    ib = np.minimum((mids * m).astype(int), m - 1)
    cost = np.sum(widths * np.abs(a[ia] - b[ib]) ** order)
    return float(cost ** (1.0 / order))


def geometric_w2(a, b, cap: int = 2048) -> float:
    """Exact 2-Wasserstein between equal-size point clouds via assignment.

    Returns sqrt(min-cost perfect matching of squared Euclidean costs / n).
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape != b.shape:
        raise ValueError("point clouds must have equal shapes")
    n = a.shape[0]
    if n > cap:
        raise ValueError(
            f"assignment capped at n={cap}; subsample the clouds before calling"
        )
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
    rows, cols = linear_sum_assignment(cost)
    return float(np.sqrt(cost[rows, cols].sum() / n))


def interatomic_distances(configs, n_particles: int | None = None) -> np.ndarray:
    """All pairwise particle distances of 3-D configurations, flattened."""
    x = np.atleast_2d(np.asarray(configs, dtype=np.float64))
    if n_particles is None:
        if x.shape[1] % 3:
            raise ValueError("flattened dimension must be a multiple of 3")
        n_particles = x.shape[1] // 3
    pts = x.reshape(x.shape[0], n_particles, 3)
    iu, ju = np.triu_indices(n_particles, k=1)
    return np.sqrt(np.sum((pts[:, iu, :] - pts[:, ju, :]) ** 2, axis=2)).ravel()


def log_ess(log_weights) -> float:
    """Kish effective sample size, normalized and in log domain.

    log[(sum w)^2 / (N sum w^2)], always <= 0, equal to 0 iff the finite
    weights are uniform.  All-(-inf) input returns -inf with a warning.
    """
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.size == 0:
        raise ValueError("empty weight vector")
    n = lw.size
    finite = np.isfinite(lw)
    if not finite.any():
        warnings.warn("all log-weights are -inf; log ESS is -inf")
        return float("-inf")
    m = lw[finite].max()
    lse1 = m + np.log(np.sum(np.exp(lw[finite] - m)))
    lse2 = 2 * m + np.log(np.sum(np.exp(2.0 * (lw[finite] - m))))
    return float(2.0 * lse1 - lse2 - np.log(n))


def direct_temperature_is(buffer, beta_target: float) -> float:
    """log-ESS of single-shot importance weights pi^beta_target / pi^beta_i.

    Uses the buffer's cached energies: log w = -(beta_target - beta_i) E(x).
    """
    if buffer.cached_energies is None:
        raise ValueError("buffer has no cached energies")
    lw = -(beta_target - buffer.beta) * buffer.cached_energies
    return log_ess(lw)


def score_scaling_sample(score_field, schedule: NoiseSchedule, gamma: float,
                         n_samples: int, n_steps: int = 500, xi: float = 1.0,
                         rng=None) -> np.ndarray:
    """Baseline sampler that scales the score drift by gamma (biased).

    Integrates dx = (-a x + gamma zeta^2 (1+xi)/2 s) dt + zeta sqrt(xi) dW
    from the wide-Gaussian prior; no weights are carried.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    x = schedule.sigma_max * rng.standard_normal((n_samples, score_field.dim))
    dt = 1.0 / n_steps
    for k in range(n_steps):
        t = k * dt
        a_t, zeta = schedule.drift_coeffs(t)
        s = score_field.value(x, t)
        drift = -a_t * x + gamma * zeta**2 * (1.0 + xi) / 2.0 * s
        x = x + drift * dt
        if xi > 0:
            x = x + zeta * np.sqrt(xi * dt) * rng.standard_normal(x.shape)
    return x


def energy_histogram_report(energies_a, energies_b, cap: float = 1000.0) -> dict:
    """W1/W2 between energy histograms after capping outliers.

    Samples with energy above ``cap`` are excluded (the filtered fractions
    are reported alongside the distances).
    """
    ea = np.asarray(energies_a, dtype=np.float64).ravel()
    eb = np.asarray(energies_b, dtype=np.float64).ravel()
    keep_a, keep_b = ea <= cap, eb <= cap
    if not keep_a.any() or not keep_b.any():
        raise ValueError("energy cap filtered out every sample")
    return {
        "energy_w1": wasserstein_1d(ea[keep_a], eb[keep_b], order=1),
        "energy_w2": wasserstein_1d(ea[keep_a], eb[keep_b], order=2),
        "filtered_fraction_a": float(1.0 - keep_a.mean()),
        "filtered_fraction_b": float(1.0 - keep_b.mean()),
        "energy_cap": float(cap),
    }


def export_histogram_csv(values, path, bins: int = 80, value_range=None) -> None:
    """Write a `bin_left,bin_right,count,density` CSV for external plotting."""
    values = np.asarray(values, dtype=np.float64).ravel()
    counts, edges = np.histogram(values, bins=bins, range=value_range)
    widths = np.diff(edges)
    density = counts / max(counts.sum(), 1) / widths
    with open(path, "w") as fh:
        fh.write("bin_left,bin_right,count,density\n")
        for lo, hi, c, d in zip(edges[:-1], edges[1:], counts, density):
            fh.write(f"{float(lo)!r},{float(hi)!r},{int(c)},{float(d)!r}\n")


@dataclass
class MetricReport:
    """Named scalar metrics with provenance; serializes to stable JSON."""

    metrics: dict = field(default_factory=dict)
    sample_counts: dict = field(default_factory=dict)
    seed: int | None = None
    energy_evals_spent: dict | None = None

    def to_json(self) -> str:
        payload = {
            "metrics": {k: _jsonable(v) for k, v in sorted(self.metrics.items())},
            "sample_counts": {k: int(v) for k, v in sorted(self.sample_counts.items())},
            "seed": self.seed,
            "energy_evals_spent": self.energy_evals_spent,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "MetricReport":
        with open(path) as fh:
            payload = json.load(fh)
        return cls(
            metrics=payload["metrics"],
            sample_counts=payload["sample_counts"],
            seed=payload["seed"],
            energy_evals_spent=payload["energy_evals_spent"],
        )


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v
