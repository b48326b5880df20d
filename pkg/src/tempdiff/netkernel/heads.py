"""Preconditioned denoiser, score and energy heads over MLP backbones.

The denoiser wraps a backbone F as

    D(x, t, b) = (1 + b (c_skip - 1)) x + b c_out F(c_in x, cond)

with cond = [c_noise(t), b] and b the relative inverse-temperature factor
(>= 1; equal to 1 when a model is queried at its own training
temperature).  The score is s = (D - x) / sigma^2.  The energy head is

    U(x, t, b) = b [ (1 - a c_skip) / (2 sigma^2) ||x||^2
                     - xi c_out / (c_in sigma^2) (x . F(c_in x, cond)) ]

where ``a`` defaults to the schedule's drift coefficient (zero under the
variance-exploding schedule) and ``xi`` defaults to 1; both are exposed
as named constants because their intended values are ambiguous, and no
further guess is made.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..schedule import NoiseSchedule
from . import tape
from .mlp import MLPBackbone, ParamVector

__all__ = [
    "NumericalError",
    "Preconditioner",
    "DenoiserModel",
    "EnergyModel",
    "grad_params",
    "divergence",
    "time_deriv_fd",
]


class NumericalError(FloatingPointError):
    """Raised when a loss or field evaluation goes non-finite."""

    def __init__(self, message, batch_index=None):
        super().__init__(message)
        self.batch_index = batch_index


@dataclass(frozen=True)
class Preconditioner:
    """Scaling functions keeping the backbone's inputs/outputs unit-scale."""

    sigma_data: float = 1.0

    def c_skip(self, sigma):
        return self.sigma_data**2 / (sigma**2 + self.sigma_data**2)

    def c_out(self, sigma):
        return sigma * self.sigma_data / np.sqrt(sigma**2 + self.sigma_data**2)

    def c_in(self, sigma):
        return 1.0 / np.sqrt(sigma**2 + self.sigma_data**2)

    def c_noise(self, sigma):
        return 0.25 * np.log(sigma)

    # derivatives w.r.t. sigma, for the exact time-derivative path
    def dc_skip(self, sigma):
        return -2.0 * sigma * self.sigma_data**2 / (sigma**2 + self.sigma_data**2) ** 2

    def dc_out(self, sigma):
        return self.sigma_data**3 / (sigma**2 + self.sigma_data**2) ** 1.5

    def dc_in(self, sigma):
        return -sigma / (sigma**2 + self.sigma_data**2) ** 1.5

    def dc_noise(self, sigma):
        return 0.25 / sigma


def _colify(v):
    """Promote per-sample coefficients to a broadcastable column."""
    v = np.asarray(v, dtype=np.float64)
    return v[:, None] if v.ndim == 1 else v


class _HeadBase:
    def __init__(self, backbone: MLPBackbone, params: ParamVector,
                 precond: Preconditioner, schedule: NoiseSchedule,
                 beta: float = 1.0, beta_ref: float = 1.0, train_step: int = 0):
        self.backbone = backbone
        self.params = params
        self.precond = precond
        self.schedule = schedule
        self.beta = float(beta)
        self.beta_ref = float(beta_ref)
        self.train_step = int(train_step)

    @property
    def dim(self) -> int:
        return self.backbone.dim

    def beta_rel(self, beta=None):
        """Relative inverse-temperature factor fed to the preconditioning."""
        b = self.beta if beta is None else beta
        return np.asarray(b, dtype=np.float64) / self.beta_ref

    def _coeffs(self, t, beta=None):
        sigma = self.schedule.sigma_rev(np.asarray(t, dtype=np.float64))
        b = self.beta_rel(beta)
        return sigma, b

    def _cond(self, sigma, b, n):
        cn = np.broadcast_to(self.precond.c_noise(sigma), (n,))
        bb = np.broadcast_to(b, (n,))
        return np.stack([cn, bb], axis=1)


class DenoiserModel(_HeadBase):
    """Denoiser / score head; doubles as the score field for inference."""

    head_kind = "denoiser"

    def denoise(self, x, t, beta=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma, b = self._coeffs(t, beta)
        cs, co, ci = self.precond.c_skip(sigma), self.precond.c_out(sigma), self.precond.c_in(sigma)
        cond = self._cond(sigma, b, x.shape[0])
        f = self.backbone.forward(self.params, _colify(ci) * x, cond)
        return _colify(1.0 + b * (cs - 1.0)) * x + _colify(b * co) * f

    def score(self, x, t, beta=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma, _ = self._coeffs(t, beta)
        return (self.denoise(x, t, beta) - x) / _colify(sigma**2)

    # field protocol ---------------------------------------------------------
    def value(self, x, t):
        return self.score(x, t)

    def vjp(self, x, t, v):
        """v^T d(score)/dx, shape (B, dim)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma, b = self._coeffs(t, None)
        cs, co, ci = self.precond.c_skip(sigma), self.precond.c_out(sigma), self.precond.c_in(sigma)
        cond = self._cond(sigma, b, x.shape[0])
        gv = self.backbone.vjp_x(self.params, _colify(ci) * x, cond, v)
        jd_v = _colify(1.0 + b * (cs - 1.0)) * v + _colify(b * co * ci) * gv
        return (jd_v - v) / _colify(sigma**2)

    def jacobian_trace(self, x, t):
        """trace d(score)/dx per sample, exact."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma, b = self._coeffs(t, None)
        cs, co, ci = self.precond.c_skip(sigma), self.precond.c_out(sigma), self.precond.c_in(sigma)
        cond = self._cond(sigma, b, x.shape[0])
        tr_f = self.backbone.jacobian_x_trace(self.params, _colify(ci) * x, cond)
        d = self.dim
        tr_jd = d * (1.0 + b * (cs - 1.0)) + b * co * ci * tr_f
        return (tr_jd - d) / sigma**2

    # tape path ----------------------------------------------------------------
    def denoise_tape(self, tensors, x, t, beta=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma, b = self._coeffs(t, beta)
        cs, co, ci = self.precond.c_skip(sigma), self.precond.c_out(sigma), self.precond.c_in(sigma)
        cond = self._cond(sigma, b, x.shape[0])
        f = self.backbone.forward_tape(tensors, _colify(ci) * x, cond)
        skip = tape.const(_colify(1.0 + b * (cs - 1.0)) * x)
        return skip + tape.const(_colify(b * co)) * f

    def clone_with(self, params=None, beta=None, beta_ref=None, train_step=None):
        return DenoiserModel(
            self.backbone,
            params if params is not None else self.params.copy(),
            self.precond,
            self.schedule,
            beta=self.beta if beta is None else beta,
            beta_ref=self.beta_ref if beta_ref is None else beta_ref,
            train_step=self.train_step if train_step is None else train_step,
        )


class EnergyModel(_HeadBase):
    """Preconditioned scalar energy head; field protocol for inference.

    ``a_const = None`` reads the drift coefficient from the schedule
    (zero under variance explosion); ``xi_const`` scales the interaction
    term.
    """

    head_kind = "energy"

    def __init__(self, backbone, params, precond, schedule, beta=1.0, beta_ref=1.0,
                 a_const=None, xi_const=1.0, train_step=0):
        super().__init__(backbone, params, precond, schedule, beta, beta_ref, train_step)
        self.a_const = a_const
        self.xi_const = float(xi_const)

    def _a(self, t):
        if self.a_const is not None:
            return float(self.a_const)
        a_t, _ = self.schedule.drift_coeffs(np.asarray(t, dtype=np.float64))
        return a_t

    def _k(self, t, beta=None):
        sigma, b = self._coeffs(t, beta)
        cs, co, ci = self.precond.c_skip(sigma), self.precond.c_out(sigma), self.precond.c_in(sigma)
        a = self._a(t)
        k1 = b * (1.0 - a * cs) / (2.0 * sigma**2)
        k2 = b * self.xi_const * co / (ci * sigma**2)
        return sigma, b, ci, k1, k2

    def energy(self, x, t, beta=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma, b, ci, k1, k2 = self._k(t, beta)
        cond = self._cond(sigma, b, x.shape[0])
        f = self.backbone.forward(self.params, _colify(ci) * x, cond)
        return k1 * np.sum(x * x, axis=1) - k2 * np.sum(x * f, axis=1)

    def grad_x(self, x, t, beta=None) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma, b, ci, k1, k2 = self._k(t, beta)
        cond = self._cond(sigma, b, x.shape[0])
        z = _colify(ci) * x
        f = self.backbone.forward(self.params, z, cond)
        jt_x = self.backbone.vjp_x(self.params, z, cond, x)
        return _colify(2.0 * k1) * x - _colify(k2) * (f + _colify(ci) * jt_x)

    def du_dt(self, x, t, beta=None, method="fd", h=1e-4) -> np.ndarray:
        """Partial time derivative of the energy at fixed x.

        ``method="fd"`` uses central differences with step h (default);
        ``method="forward"`` propagates the exact sigma(t) chain rule
        through the preconditioner and a directional derivative of the
        backbone.
        """
        if method == "fd":
            t = np.asarray(t, dtype=np.float64)
            return (self.energy(x, t + h, beta) - self.energy(x, t - h, beta)) / (2.0 * h)
        if method != "forward":
            raise ValueError(f"unknown method {method!r}")
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        p = self.precond
        sigma, b = self._coeffs(t, beta)
        ds = self.schedule.dsigma_dt_rev(np.asarray(t, dtype=np.float64))
        cs, co, ci = p.c_skip(sigma), p.c_out(sigma), p.c_in(sigma)
        dcs, dco, dci = p.dc_skip(sigma) * ds, p.dc_out(sigma) * ds, p.dc_in(sigma) * ds
        a = self._a(t)
        k1 = b * (1.0 - a * cs) / (2.0 * sigma**2)
        k2 = b * self.xi_const * co / (ci * sigma**2)
        dk1 = b * (-a * dcs / (2.0 * sigma**2) - (1.0 - a * cs) * ds / sigma**3)
        dk2 = b * self.xi_const * (
            dco / (ci * sigma**2)
            - co * (dci * sigma**2 + ci * 2.0 * sigma * ds) / (ci * sigma**2) ** 2
        )
        cond = self._cond(sigma, b, x.shape[0])
        z = _colify(ci) * x
        f = self.backbone.forward(self.params, z, cond)
        dz = _colify(dci) * x
        dcond = np.stack(
            [
                np.broadcast_to(p.dc_noise(sigma) * ds, (x.shape[0],)),
                np.zeros(x.shape[0]),
            ],
            axis=1,
        )
        df = self.backbone.jvp_x(self.params, z, cond, dz, dcond)
        xf = np.sum(x * f, axis=1)
        return dk1 * np.sum(x * x, axis=1) - dk2 * xf - k2 * np.sum(x * df, axis=1)

    # field protocol ---------------------------------------------------------
    def value(self, x, t):
        return self.energy(x, t)

    def grad(self, x, t):
        return self.grad_x(x, t)

    def dt(self, x, t, method="fd", h=1e-4):
        return self.du_dt(x, t, method=method, h=h)

    # tape path ----------------------------------------------------------------
    def energy_tape(self, tensors, x, t, beta=None):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma, b, ci, k1, k2 = self._k(t, beta)
        cond = self._cond(sigma, b, x.shape[0])
        f = self.backbone.forward_tape(tensors, _colify(ci) * x, cond)
        quad = tape.const(k1 * np.sum(x * x, axis=1))
        xf = (tape.const(x) * f).sum(axis=1)
        return quad - tape.const(np.broadcast_to(k2, xf.shape)) * xf

    def grad_x_tape(self, tensors, x, t, beta=None):
        """Tape node for grad_x U, differentiable w.r.t. parameters."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        sigma, b, ci, k1, k2 = self._k(t, beta)
        cond = self._cond(sigma, b, x.shape[0])
        f, jt_x = self.backbone.forward_with_input_grad_tape(
            tensors, _colify(ci) * x, cond, v=x
        )
        lead = tape.const(_colify(2.0 * k1) * x)
        return lead - tape.const(_colify(np.broadcast_to(k2, (x.shape[0],)))) * (
            f + tape.const(_colify(np.broadcast_to(ci, (x.shape[0],)))) * jt_x
        )

    def clone_with(self, params=None, beta=None, beta_ref=None, train_step=None):
        return EnergyModel(
            self.backbone,
            params if params is not None else self.params.copy(),
            self.precond,
            self.schedule,
            beta=self.beta if beta is None else beta,
            beta_ref=self.beta_ref if beta_ref is None else beta_ref,
            a_const=self.a_const,
            xi_const=self.xi_const,
            train_step=self.train_step if train_step is None else train_step,
        )


def grad_params(loss_fn, backbone: MLPBackbone, pv: ParamVector, batch):
    """Mean loss and its parameter gradient via reverse mode.

    Args:
        loss_fn: Callable (param_tensors, batch) -> per-sample loss Tensor
            of shape (B,).
        backbone: The network owning the parameter layout.
        pv: Current parameters.
        batch: Opaque batch object handed to loss_fn.

    Returns:
        (loss value, ParamVector of gradients).

    Raises:
        NumericalError: if any per-sample loss is non-finite; carries the
            first offending batch index.
    """
    tensors = backbone.param_tensors(pv)
    per_sample = loss_fn(tensors, batch)
    vals = per_sample.data
    if not np.all(np.isfinite(vals)):
        idx = int(np.flatnonzero(~np.isfinite(np.atleast_1d(vals)))[0])
        raise NumericalError(f"non-finite loss at batch index {idx}", batch_index=idx)
    loss = per_sample.mean() if vals.ndim else per_sample
    loss.backward()
    return float(loss.data), ParamVector(backbone.collect_grads(tensors), pv.layout)


def divergence(field, x, t, method="exact", n_probes=None, rng=None, exact_dim_cap=64):
    """Divergence of a vector field at (x, t), per sample.

    ``method="exact"`` sums the d diagonal Jacobian entries through the
    field's exact ``jacobian_trace`` (dimension capped);
    ``method="hutchinson"`` averages Rademacher-probe estimates
    v^T (dF/dx) v over ``n_probes`` draws.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if method == "exact":
        if x.shape[1] > exact_dim_cap:
            raise ValueError(
                f"exact divergence capped at dim {exact_dim_cap}; use hutchinson"
            )
        return field.jacobian_trace(x, t)
    if method != "hutchinson":
        raise ValueError(f"unknown divergence method {method!r}")
    if not n_probes or n_probes < 1:
        raise ValueError("hutchinson needs n_probes >= 1")
    if rng is None:
        raise ValueError("hutchinson needs an rng")
    acc = np.zeros(x.shape[0])
    for _ in range(n_probes):
        v = rng.integers(0, 2, size=x.shape).astype(np.float64) * 2.0 - 1.0
        acc += np.sum(field.vjp(x, t, v) * v, axis=1)
    return acc / n_probes


def time_deriv_fd(f, x, t, h=1e-4):
    """Central-difference time derivative of a scalar field f(x, t)."""
    return (f(x, t + h) - f(x, t - h)) / (2.0 * h)
