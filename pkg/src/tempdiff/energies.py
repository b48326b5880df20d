"""Analytic target densities with exact energies and scores.

Every target is an unnormalized density pi(x) = exp(-E(x)) known only
through its energy E and score -grad E.  Inverse-temperature scaling
pi^beta has energy beta * E(x); the normalizer is never computed.

All operations accept a single configuration of shape (dim,) or a batch
of shape (n, dim) and are pure; an optional :class:`EnergyCallCounter`
can be attached to meter how many configuration evaluations the rest of
the pipeline spends.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "DegenerateConfiguration",
    "InvalidTemperature",
    "EnergyCallCounter",
    "TargetDensity",
    "GaussianDiag",
    "GMM2D",
    "DoubleWell1D",
    "LJParams",
    "LennardJones",
    "harmonic_com_energy",
    "annealed_energy",
    "annealed_score",
    "make_target",
]


class DegenerateConfiguration(ValueError):
    """Raised when a pairwise distance falls below the configured floor."""


class InvalidTemperature(ValueError):
    """Raised for non-positive inverse temperatures."""


class EnergyCallCounter:
    """Counts per-configuration energy/score evaluations, bucketed by phase.

    The counter is an instrumentation sidecar: attach it to a target via
    ``target.counter = EnergyCallCounter()`` and set ``counter.phase``
    before each pipeline stage.  A batch call of n configurations counts n.
    """

    PHASES = ("mcmc", "training", "bridging", "evaluation")

    def __init__(self):
        self.phase = "evaluation"
        self.energy_calls = {p: 0 for p in self.PHASES}
        self.score_calls = {p: 0 for p in self.PHASES}

    def count_energy(self, n: int):
        self.energy_calls[self.phase] += int(n)

    def count_score(self, n: int):
        self.score_calls[self.phase] += int(n)

    def total(self) -> int:
        return sum(self.energy_calls.values()) + sum(self.score_calls.values())

    def snapshot(self) -> dict:
        return {
            "energy_calls": dict(self.energy_calls),
            "score_calls": dict(self.score_calls),
            "total": self.total(),
        }


class TargetDensity:
    """Base class: unnormalized density exp(-E(x)) on R^dim."""

    kind: str = "base"
    dim: int = 0

    def __init__(self):
        self.counter: EnergyCallCounter | None = None

    # -- subclass hooks (batched, shape (n, dim)) --------------------------
    def _energy(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _score(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    # -- public API ---------------------------------------------------------
    def energy(self, x) -> np.ndarray:
        """Unnormalized energy E(x); pi(x) is proportional to exp(-E(x))."""
        x, squeeze = _as_batch(x, self.dim)
        e = self._energy(x)
        # count only completed evaluations, so failed degenerate batches
        # leave the meter in agreement with the values actually produced
        if self.counter is not None:
            self.counter.count_energy(x.shape[0])
        return e[0] if squeeze else e

    def score(self, x) -> np.ndarray:
        """Score grad log pi(x) = -grad E(x), analytic."""
        x, squeeze = _as_batch(x, self.dim)
        s = self._score(x)
        if self.counter is not None:
            self.counter.count_score(x.shape[0])
        return s[0] if squeeze else s

    def params_dict(self) -> dict:
        """Construction parameters, for config echo and buffer headers."""
        raise NotImplementedError


def _as_batch(x, dim):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != dim:
            raise ValueError(f"expected dim {dim}, got {x.shape[0]}")
        return x[None, :], True
    if x.ndim != 2 or x.shape[1] != dim:
        raise ValueError(f"expected shape (n, {dim}), got {x.shape}")
    return x, False


def annealed_energy(target: TargetDensity, beta: float, x) -> np.ndarray:
    """Energy of pi^beta up to an additive constant: beta * E(x)."""
    if beta <= 0:
        raise InvalidTemperature(f"inverse temperature must be positive, got {beta}")
    return beta * target.energy(x)


def annealed_score(target: TargetDensity, beta: float, x) -> np.ndarray:
    """Score of pi^beta: beta * score(x)."""
    if beta <= 0:
        raise InvalidTemperature(f"inverse temperature must be positive, got {beta}")
    return beta * target.score(x)


class GaussianDiag(TargetDensity):
    """Diagonal Gaussian: E(x) = sum((x - mu)^2 / (2 sigma^2))."""

    kind = "gaussian_diag"

    def __init__(self, mu=0.0, sigma=1.0, dim: int | None = None):
        super().__init__()
        mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
        sigma = np.atleast_1d(np.asarray(sigma, dtype=np.float64))
        if dim is None:
            dim = max(mu.shape[0], sigma.shape[0])
        self.mu = np.broadcast_to(mu, (dim,)).copy()
        self.sigma = np.broadcast_to(sigma, (dim,)).copy()
        if np.any(self.sigma <= 0):
            raise ValueError("sigma must be positive")
        self.dim = dim

    def _energy(self, x):
        return 0.5 * np.sum(((x - self.mu) / self.sigma) ** 2, axis=1)

    def _score(self, x):
        return -(x - self.mu) / self.sigma**2

    def sample_exact(self, rng, n: int) -> np.ndarray:
        return self.mu + self.sigma * rng.standard_normal((n, self.dim))

    def params_dict(self):
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "dim": self.dim}


class GMM2D(TargetDensity):
    """Two-dimensional Gaussian mixture with isotropic components.

    Default: two components at (+-2.5, 0) with sigma 0.5, the smallest
    multimodal target where mode-mass recovery can be checked by
    quadrature.
    """

    kind = "gmm2d"
    dim = 2

    def __init__(self, weights=(0.5, 0.5), centers=((-2.5, 0.0), (2.5, 0.0)), sigma=0.5):
        super().__init__()
        self.weights = np.asarray(weights, dtype=np.float64)
        if np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive")
        self.weights = self.weights / self.weights.sum()
        self.centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
        sigma = np.asarray(sigma, dtype=np.float64)
        self.sigmas = np.broadcast_to(np.atleast_1d(sigma), (len(self.weights),)).copy()
        if self.centers.shape[0] != self.weights.shape[0]:
            raise ValueError("need one center per weight")

    def _log_comp(self, x):
        # log of each weighted component density, shape (n, k)
        d2 = np.sum((x[:, None, :] - self.centers[None, :, :]) ** 2, axis=2)
        return (
            np.log(self.weights)[None, :]
            - d2 / (2.0 * self.sigmas[None, :] ** 2)
            - np.log(2.0 * np.pi * self.sigmas[None, :] ** 2)
        )

    def _energy(self, x):
        lc = self._log_comp(x)
        m = lc.max(axis=1, keepdims=True)
        return -(m[:, 0] + np.log(np.sum(np.exp(lc - m), axis=1)))

    def _score(self, x):
        lc = self._log_comp(x)
        m = lc.max(axis=1, keepdims=True)
        r = np.exp(lc - m)
        r /= r.sum(axis=1, keepdims=True)
        comp_scores = -(x[:, None, :] - self.centers[None, :, :]) / self.sigmas[None, :, None] ** 2
        return np.sum(r[:, :, None] * comp_scores, axis=1)

    def sample_exact(self, rng, n: int) -> np.ndarray:
        """Exact i.i.d. samples from the beta = 1 mixture."""
        comp = rng.choice(len(self.weights), size=n, p=self.weights)
        eps = rng.standard_normal((n, 2))
        return self.centers[comp] + self.sigmas[comp][:, None] * eps

    def params_dict(self):
        return {
            "weights": self.weights.tolist(),
            "centers": self.centers.tolist(),
            "sigma": self.sigmas.tolist(),
        }


class DoubleWell1D(TargetDensity):
    """One-dimensional double well: E(x) = a4 x^4 - a2 x^2."""

    kind = "double_well_1d"
    dim = 1

    def __init__(self, a4: float = 1.0, a2: float = 2.0):
        super().__init__()
        if a4 <= 0:
            raise ValueError("a4 must be positive")
        self.a4 = float(a4)
        self.a2 = float(a2)

    def _energy(self, x):
        x0 = x[:, 0]
        return self.a4 * x0**4 - self.a2 * x0**2

    def _score(self, x):
        x0 = x[:, 0]
        return -(4.0 * self.a4 * x0**3 - 2.0 * self.a2 * x0)[:, None]

    def params_dict(self):
        return {"a4": self.a4, "a2": self.a2}


@dataclass(frozen=True)
class LJParams:
    """Constants of the pairwise-plus-harmonic particle system.

    ``tau_lj`` is the denominator in the eps/(2 tau) prefactor: it is only
    a global energy scale and is exposed so results can be matched against
    other conventions.
    """

    n_particles: int = 13
    r_m: float = 1.0
    eps: float = 2.0
    tau_lj: float = 1.0
    c_osc: float = 1.0

    def __post_init__(self):
        if self.n_particles < 2:
            raise ValueError("need at least two particles")
        if self.r_m <= 0 or self.eps <= 0 or self.tau_lj <= 0:
            raise ValueError("r_m, eps, tau_lj must be positive")
        if self.c_osc < 0:
            raise ValueError("c_osc must be non-negative")


class LennardJones(TargetDensity):
    """Pairwise 6/12 interaction plus a harmonic center-of-mass tether.

    The pairwise term over unordered pairs is
    ``eps/(2 tau_lj) * sum_{i<j} ((r_m/d_ij)^6 - (r_m/d_ij)^12)`` under the
    default ``sign_convention = "six_minus_twelve"``.  That form has an
    attractive singularity at contact (energy -> -inf as d -> 0), so the
    Boltzmann density is not normalizable; ``"twelve_minus_six"`` flips the
    pairwise sign to the conventional repulsive-core form with a well of
    depth eps/(8 tau_lj) at d = 2^(1/6) r_m.  The harmonic term is
    ``c_osc * 0.5 * sum_i ||x_i - x_com||^2``.

    Pairwise distances below ``dist_floor`` raise
    :class:`DegenerateConfiguration` instead of silently producing
    non-finite values.
    """

    kind = "lennard_jones"

    def __init__(
        self,
        params: LJParams | None = None,
        sign_convention: str = "six_minus_twelve",
        dist_floor: float = 1e-8,
    ):
        super().__init__()
        self.params = params or LJParams()
        if sign_convention not in ("six_minus_twelve", "twelve_minus_six"):
            raise ValueError(f"unknown sign convention {sign_convention!r}")
        self.sign_convention = sign_convention
        self.dist_floor = float(dist_floor)
        self.dim = 3 * self.params.n_particles
        self.n_particles = self.params.n_particles

    def _pair_geometry(self, x):
        n = self.n_particles
        pts = x.reshape(x.shape[0], n, 3)
        iu, ju = np.triu_indices(n, k=1)
        diff = pts[:, iu, :] - pts[:, ju, :]  # (b, n_pairs, 3)
        d = np.sqrt(np.sum(diff**2, axis=2))
        if np.any(d < self.dist_floor):
            raise DegenerateConfiguration(
                f"pairwise distance below floor {self.dist_floor:g}"
            )
        return pts, iu, ju, diff, d

    def _energy(self, x):
        p = self.params
        pts, _, _, _, d = self._pair_geometry(x)
        u6 = (p.r_m / d) ** 6
        pair = u6 - u6**2
        if self.sign_convention == "twelve_minus_six":
            pair = -pair
        e_lj = p.eps / (2.0 * p.tau_lj) * np.sum(pair, axis=1)
        com = pts.mean(axis=1, keepdims=True)
        e_osc = 0.5 * np.sum((pts - com) ** 2, axis=(1, 2))
        return e_lj + p.c_osc * e_osc

    def _score(self, x):
        p = self.params
        pts, iu, ju, diff, d = self._pair_geometry(x)
        u6 = (p.r_m / d) ** 6
        # d(pair)/dd for pair = u6 - u6^2 with u6 = (r_m/d)^6:
        # du6/dd = -6 u6 / d, so dpair/dd = (-6 u6 + 12 u6^2) / d
        dpair_dd = (-6.0 * u6 + 12.0 * u6**2) / d
        if self.sign_convention == "twelve_minus_six":
            dpair_dd = -dpair_dd
        coef = p.eps / (2.0 * p.tau_lj) * dpair_dd / d  # (b, n_pairs)
        grad = np.zeros_like(pts)
        contrib = coef[:, :, None] * diff
        np.add.at(grad, (slice(None), iu), contrib)
        np.add.at(grad, (slice(None), ju), -contrib)
        # harmonic term: grad of 0.5 sum ||x_i - com||^2 is (x_i - com)
        com = pts.mean(axis=1, keepdims=True)
        grad += p.c_osc * (pts - com)
        return -grad.reshape(x.shape[0], self.dim)

    def params_dict(self):
        p = self.params
        return {
            "n_particles": p.n_particles,
            "r_m": p.r_m,
            "eps": p.eps,
            "tau_lj": p.tau_lj,
            "c_osc": p.c_osc,
            "sign_convention": self.sign_convention,
            "dist_floor": self.dist_floor,
        }


def harmonic_com_energy(x, n_particles: int | None = None) -> np.ndarray:
    """0.5 * sum_i ||x_i - x_com||^2 for configurations of 3-D particles.

    Args:
        x: Flattened configuration(s), shape (3n,) or (b, 3n).
        n_particles: Particle count; inferred from the last axis if omitted.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if n_particles is None:
        if x.shape[1] % 3:
            raise ValueError("flattened dimension must be a multiple of 3")
        n_particles = x.shape[1] // 3
    pts = x.reshape(x.shape[0], n_particles, 3)
    com = pts.mean(axis=1, keepdims=True)
    e = 0.5 * np.sum((pts - com) ** 2, axis=(1, 2))
    return e[0] if squeeze else e


_KINDS = {
    "gaussian_diag": GaussianDiag,
    "gmm2d": GMM2D,
    "double_well_1d": DoubleWell1D,
}


def make_target(spec: dict) -> TargetDensity:
    """Construct a target from a config mapping with a ``kind`` key."""
    spec = dict(spec)
    kind = spec.pop("kind")
    if kind == "lennard_jones":
        sign = spec.pop("sign_convention", "six_minus_twelve")
        floor = spec.pop("dist_floor", 1e-8)
        return LennardJones(LJParams(**spec), sign_convention=sign, dist_floor=floor)
    try:
        cls = _KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown target kind {kind!r}") from None
    return cls(**spec)
