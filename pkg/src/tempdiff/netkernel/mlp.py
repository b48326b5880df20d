"""MLP backbones with flat parameter vectors and analytic input derivatives.

The backbone maps (coordinates, conditioning features) -> R^out through a
stack of dense layers.  Coordinates are optionally mean-centered per
sample ("com3d" removes the per-axis center of mass of 3-D particle
configurations) before entering the first layer; conditioning features
(noise embedding, inverse-temperature factor) are concatenated raw.

Two evaluation paths exist and must agree exactly:

* a fast numpy path (``forward``, ``jacobian_x``, ``vjp_x``, ``jvp_x``)
  used in the inference hot loop, and
* a tape path (``forward_tape``, ``forward_with_input_grad_tape``) used
  during training, where input gradients must themselves be
  differentiable w.r.t. parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .tape import Tensor

__all__ = ["ParamVector", "MLPBackbone"]


@dataclass
class ParamVector:
    """Flat float64 parameter array plus per-layer shape descriptors."""

    values: np.ndarray
    layout: tuple  # tuple of (name, shape) pairs

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        total = sum(int(np.prod(s)) for _, s in self.layout)
        if self.values.shape != (total,):
            raise ValueError(f"expected {total} parameters, got {self.values.shape}")

    def view(self, name: str) -> np.ndarray:
        """Writable view of one layer's block."""
        off = 0
        for n, shape in self.layout:
            size = int(np.prod(shape))
            if n == name:
                return self.values[off : off + size].reshape(shape)
            off += size
        raise KeyError(name)

    def views(self):
        off = 0
        out = {}
        for n, shape in self.layout:
            size = int(np.prod(shape))
            out[n] = self.values[off : off + size].reshape(shape)
            off += size
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    @property
    def size(self) -> int:
        return self.values.size


_ACT = {
    "silu": (
        lambda z: z / (1.0 + np.exp(-z)),
        lambda z: (lambda s: s * (1.0 + z * (1.0 - s)))(1.0 / (1.0 + np.exp(-z))),
    ),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


class MLPBackbone:
    """Dense network F(coords, cond) -> R^out.

    Attributes:
        dim: Coordinate input dimension.
        n_cond: Number of conditioning features appended to the input.
        hidden_dims: Widths of the hidden layers.
        output_dim: Output dimension (defaults to ``dim``).
        activation: "silu" or "tanh".
        center: "none" or "com3d" (per-sample center-of-mass removal on
            the coordinate block; requires dim divisible by 3).
    """

    def __init__(self, dim, hidden_dims=(64, 64), n_cond=2, output_dim=None,
                 activation="silu", center="none"):
        if activation not in _ACT:
            raise ValueError(f"unknown activation {activation!r}")
        if center not in ("none", "com3d"):
            raise ValueError(f"unknown centering {center!r}")
        if center == "com3d" and dim % 3:
            raise ValueError("com3d centering needs dim divisible by 3")
        self.dim = int(dim)
        self.n_cond = int(n_cond)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.output_dim = int(output_dim) if output_dim is not None else self.dim
        self.activation = activation
        self.center = center
        widths = [self.dim + self.n_cond, *self.hidden_dims, self.output_dim]
        self.layout = tuple(
            item
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
            for item in ((f"w{i}", (a, b)), (f"b{i}", (b,)))
        )
        self.n_layers = len(widths) - 1

    def describe(self) -> dict:
        return {
            "dim": self.dim,
            "hidden_dims": list(self.hidden_dims),
            "n_cond": self.n_cond,
            "output_dim": self.output_dim,
            "activation": self.activation,
            "center": self.center,
        }

    def init_params(self, rng, final_scale: float = 1.0) -> ParamVector:
        """Fan-in scaled Gaussian weights, zero biases.

        ``final_scale`` rescales the output layer's weights; 0 starts the
        network as the zero map, which leaves preconditioned heads at
        their skip-connection baseline.
        """
        last = f"w{self.n_layers - 1}"
        chunks = []
        for name, shape in self.layout:
            if name.startswith("w"):
                fan_in = shape[0]
                w = rng.standard_normal(shape).ravel() / np.sqrt(fan_in)
                if name == last:
                    w = w * final_scale
                chunks.append(w)
            else:
                chunks.append(np.zeros(int(np.prod(shape))))
        return ParamVector(np.concatenate(chunks), self.layout)

    # -- centering -----------------------------------------------------------
    def _center_np(self, x):
        if self.center == "none":
            return x
        pts = x.reshape(x.shape[0], -1, 3)
        return (pts - pts.mean(axis=1, keepdims=True)).reshape(x.shape)

    def _center_tape(self, x: Tensor) -> Tensor:
        if self.center == "none":
            return x
        b = x.shape[0]
        pts = x.reshape(b, self.dim // 3, 3)
        return (pts - pts.mean(axis=1, keepdims=True)).reshape(b, self.dim)

    # -- fast numpy paths ----------------------------------------------------
    def _forward_cached(self, pv: ParamVector, x, cond):
        p = pv.views()
        act, _ = _ACT[self.activation]
        h = np.concatenate([self._center_np(x), cond], axis=1)
        pre = []
        for i in range(self.n_layers - 1):
            z = h @ p[f"w{i}"] + p[f"b{i}"]
            pre.append(z)
            h = act(z)
        i = self.n_layers - 1
        out = h @ p[f"w{i}"] + p[f"b{i}"]
        return out, pre

    def forward(self, pv: ParamVector, x, cond) -> np.ndarray:
        """Evaluate F; x is (B, dim), cond is (B, n_cond)."""
        return self._forward_cached(pv, x, cond)[0]

    def vjp_x(self, pv: ParamVector, x, cond, v) -> np.ndarray:
        """v^T dF/dx for v of shape (B, output_dim); returns (B, dim)."""
        p = pv.views()
        _, dact = _ACT[self.activation]
        _, pre = self._forward_cached(pv, x, cond)
        g = np.asarray(v, dtype=np.float64)
        for i in range(self.n_layers - 1, 0, -1):
            g = g @ p[f"w{i}"].T
            g = g * dact(pre[i - 1])
        g = g @ p["w0"].T
        return self._center_np(g[:, : self.dim])

    def jvp_x(self, pv: ParamVector, x, cond, dx, dcond=None) -> np.ndarray:
        """Directional derivative dF along (dx, dcond); returns (B, output_dim)."""
        p = pv.views()
        _, dact = _ACT[self.activation]
        _, pre = self._forward_cached(pv, x, cond)
        if dcond is None:
            dcond = np.zeros_like(cond)
        u = np.concatenate([self._center_np(np.asarray(dx, dtype=np.float64)), dcond], axis=1)
        for i in range(self.n_layers - 1):
            u = u @ p[f"w{i}"]
            u = u * dact(pre[i])
        return u @ p[f"w{self.n_layers - 1}"]

    def jacobian_x(self, pv: ParamVector, x, cond) -> np.ndarray:
        """Full dF/dx as (B, output_dim, dim), centering included."""
        p = pv.views()
        _, dact = _ACT[self.activation]
        _, pre = self._forward_cached(pv, x, cond)
        b = x.shape[0]
        # carry d h_layer / d centered-x as (B, dim, width)
        j = np.broadcast_to(p["w0"][: self.dim, :], (b, self.dim, p["w0"].shape[1])).copy()
        for i in range(self.n_layers - 1):
            j = j * dact(pre[i])[:, None, :]
            w_next = p[f"w{i + 1}"]
            j = np.einsum("bdh,hk->bdk", j, w_next, optimize=True)
        j = np.transpose(j, (0, 2, 1))  # (B, out, dim) w.r.t. centered coords
        if self.center == "com3d":
            blk = j.reshape(b, self.output_dim, self.dim // 3, 3)
            j = (blk - blk.mean(axis=2, keepdims=True)).reshape(j.shape)
        return j

    def jacobian_x_trace(self, pv: ParamVector, x, cond) -> np.ndarray:
        """trace(dF/dx) per sample; requires output_dim == dim."""
        if self.output_dim != self.dim:
            raise ValueError("trace needs square input/output dimensions")
        j = self.jacobian_x(pv, x, cond)
        return np.trace(j, axis1=1, axis2=2)

    # -- tape paths ------------------------------------------------------------
    def param_tensors(self, pv: ParamVector) -> dict:
        return {name: tape.leaf(arr) for name, arr in pv.views().items()}

    def collect_grads(self, tensors: dict) -> np.ndarray:
        """Flatten leaf gradients in layout order (zeros where untouched)."""
        chunks = []
        for name, shape in self.layout:
            g = tensors[name].grad
            chunks.append(np.zeros(int(np.prod(shape))) if g is None else g.ravel())
        return np.concatenate(chunks)

    def forward_tape(self, tensors: dict, x, cond) -> Tensor:
        h = tape.concat([self._center_tape(tape.const(x)), tape.const(cond)], axis=1)
        return self._forward_from(tensors, h)[0]

    def _forward_from(self, tensors, h: Tensor):
        pre = []
        for i in range(self.n_layers - 1):
            z = h @ tensors[f"w{i}"] + tensors[f"b{i}"]
            pre.append(z)
            h = self._act_tape(z)
        i = self.n_layers - 1
        return h @ tensors[f"w{i}"] + tensors[f"b{i}"], pre

    def _act_tape(self, z: Tensor) -> Tensor:
        if self.activation == "tanh":
            return tape.tanh(z)
        return z * tape.sigmoid(z)

    def _dact_tape(self, z: Tensor) -> Tensor:
        if self.activation == "tanh":
            th = tape.tanh(z)
            return 1.0 - th * th
        s = tape.sigmoid(z)
        return s * (1.0 + z * (1.0 - s))

    def forward_with_input_grad_tape(self, tensors: dict, x, cond, v):
        """Tape nodes for (F(x, cond), v^T dF/dx), both parameter-differentiable.

        The input-gradient chain is unrolled into the forward graph through
        the activation derivatives, so reverse mode through the result
        yields exact parameter gradients of losses built on dF/dx.

        Args:
            v: Constant cotangent of shape (B, output_dim).

        Returns:
            (out, grad_x) tape tensors of shapes (B, output_dim), (B, dim).
        """
        h = tape.concat([self._center_tape(tape.const(x)), tape.const(cond)], axis=1)
        out, pre = self._forward_from(tensors, h)
        g = tape.const(np.asarray(v, dtype=np.float64))
        for i in range(self.n_layers - 1, 0, -1):
            g = g @ tensors[f"w{i}"].T
            g = g * self._dact_tape(pre[i - 1])
        g = g @ tensors["w0"].T
        return out, self._center_tape(g.cols(0, self.dim))
