"""Self-describing binary checkpoints for denoiser and energy heads.

Layout: magic ``TDCK``, format version u32, header length u32, UTF-8 JSON
header, then the raw little-endian float64 parameter block.  Round trips
are bit-exact (tested), so checkpoints double as determinism artifacts.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..schedule import NoiseSchedule
from .heads import DenoiserModel, EnergyModel, Preconditioner
from .mlp import MLPBackbone, ParamVector

__all__ = ["save_checkpoint", "load_checkpoint"]

_MAGIC = b"TDCK"
_VERSION = 1


def save_checkpoint(path, model) -> None:
    """Serialize a DenoiserModel or EnergyModel to ``path``."""
    header = {
        "head_kind": model.head_kind,
        "backbone": model.backbone.describe(),
        "layout": [[name, list(shape)] for name, shape in model.params.layout],
        "n_params": int(model.params.size),
        "precond": {"sigma_data": model.precond.sigma_data},
        "schedule": {
            "sigma_min": model.schedule.sigma_min,
            "sigma_max": model.schedule.sigma_max,
            "rho": model.schedule.rho,
        },
        "beta": model.beta,
        "beta_ref": model.beta_ref,
        "train_step": model.train_step,
    }
    if model.head_kind == "energy":
        header["a_const"] = model.a_const
        header["xi_const"] = model.xi_const
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    params = np.ascontiguousarray(model.params.values, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        fh.write(params.tobytes())


def load_checkpoint(path):
    """Reconstruct the model saved by :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[12 : 12 + hlen].decode("utf-8"))
    values = np.frombuffer(raw[12 + hlen :], dtype="<f8").astype(np.float64)
    if values.size != header["n_params"]:
        raise ValueError(f"{path}: parameter block size mismatch")
    backbone = MLPBackbone(**header["backbone"])
    layout = tuple((name, tuple(shape)) for name, shape in header["layout"])
    if layout != backbone.layout:
        raise ValueError(f"{path}: layout does not match backbone description")
    params = ParamVector(values, layout)
    precond = Preconditioner(sigma_data=header["precond"]["sigma_data"])
    sched = NoiseSchedule(**header["schedule"])
    common = dict(beta=header["beta"], beta_ref=header["beta_ref"],
                  train_step=header["train_step"])
    if header["head_kind"] == "denoiser":
        return DenoiserModel(backbone, params, precond, sched, **common)
    if header["head_kind"] == "energy":
        return EnergyModel(backbone, params, precond, sched,
                           a_const=header["a_const"], xi_const=header["xi_const"],
                           **common)
    raise ValueError(f"{path}: unknown head kind {header['head_kind']!r}")
