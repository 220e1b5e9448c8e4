"""SARW checkpoint container.

Layout (little-endian)::

    0   4   magic b"SARW"
    4   2   version (u16, currently 1)
    6   4   header length L (u32)
    10  L   UTF-8 JSON header: arch, optimizer config, seed, epoch,
            step_count and a tensor table [{name, dtype, shape}, ...]
    ..      tensor payloads, in table order, row-major, dtype "<f4" or "<f8"

The tensor table lists network parameters first (``param/<name>``), then
optimizer state (``opt/velocity/<name>`` or ``opt/m/<name>``, ``opt/v/<name>``).
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamConfig, SgdConfig, config_to_dict
from .unet import UNetConfig, check_params

MAGIC = b"SARW"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


class CheckpointFormatError(ValueError):
    pass


class IncompatibleCheckpointError(ValueError):
    def __init__(self, problems):
        super().__init__("checkpoint does not match architecture:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class Checkpoint:
    arch: UNetConfig
    params: OrderedDict
    optimizer: SgdConfig | AdamConfig | None = None
    optimizer_state: dict = field(default_factory=dict)
    step_count: int = 0
    seed: int = 0
    epoch: int = 0


def _optimizer_from_dict(d):
    if d is None:
        return None
    d = dict(d)
    kind = d.pop("optimizer")
    return {"sgd": SgdConfig, "adam": AdamConfig}[kind](**d)


def save_checkpoint(ckpt, path):
    tensors = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    tensors += [(f"opt/{k}", v) for k, v in ckpt.optimizer_state.items()]
    header = {
        "arch": asdict(ckpt.arch),
        "optimizer": None if ckpt.optimizer is None else config_to_dict(ckpt.optimizer),
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "step_count": ckpt.step_count,
        "tensors": [
            {"name": name, "dtype": np.dtype(a.dtype).newbyteorder("<").str, "shape": list(a.shape)}
            for name, a in tensors
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, len(blob)))
        fh.write(blob)
        for entry, (_, a) in zip(header["tensors"], tensors):
            fh.write(np.ascontiguousarray(a, dtype=entry["dtype"]).tobytes())
    return Path(path)


def load_checkpoint(path, expected_arch=None):
    """Read a checkpoint; with ``expected_arch`` reject mismatched tensors."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise CheckpointFormatError(f"{path}: truncated prefix")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")
    pos = _PREFIX.size
    if pos + hlen > len(data):
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(data[pos : pos + hlen])
    except ValueError as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    params, opt_state = OrderedDict(), {}
    for entry in header["tensors"]:
        dt = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        if pos + nbytes > len(data):
            raise CheckpointFormatError(f"{path}: truncated tensor {entry['name']} at byte {pos}")
        a = np.frombuffer(data, dt, count, pos).reshape(entry["shape"]).astype(dt.newbyteorder("="))
        pos += nbytes
        kind, _, name = entry["name"].partition("/")
        (params if kind == "param" else opt_state)[name] = a
    if pos != len(data):
        raise CheckpointFormatError(f"{path}: {len(data) - pos} trailing bytes")
    arch = UNetConfig(**header["arch"])
    problems = check_params(params, arch)
    if expected_arch is not None and arch != expected_arch:
        problems = check_params(params, expected_arch) or [f"arch {arch} != {expected_arch}"]
    if problems:
        raise IncompatibleCheckpointError(problems)
    return Checkpoint(
        arch, params, _optimizer_from_dict(header["optimizer"]), opt_state,
        header["step_count"], header["seed"], header["epoch"],
    )
