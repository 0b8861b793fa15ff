"""Binary checkpoint format.

Layout::

    b"PSFP1" | uint32-LE header length | UTF-8 JSON header
    | float64-LE parameters | float64-LE adam.m | float64-LE adam.v

The Adam arrays are present only when the header says ``"adam": {...}``.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import AdamState, ArchitectureDescriptor, ParamVector

MAGIC = b"PSFP1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ParamVector, *, seed: int, round: int, component: str,
                    adam: AdamState | None = None, extra: dict | None = None) -> Path:
    header = {
        "arch": params.arch.to_dict(),
        "seed": int(seed),
        "round": int(round),
        "component": component,
        "num_params": len(params),
    }
    if adam is not None:
        header["adam"] = {"t": adam.t, "lr": adam.lr, "beta1": adam.beta1,
                          "beta2": adam.beta2, "eps": adam.eps}
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.values.astype("<f8").tobytes())
        if adam is not None:
            fh.write(adam.m.astype("<f8").tobytes())
            fh.write(adam.v.astype("<f8").tobytes())
    return path


def load_checkpoint(path):
    """Return (params, adam_or_None, header)."""
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    pos = len(MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
    pos += hlen
    arch = ArchitectureDescriptor.from_dict(header["arch"])
    n = arch.num_params()
    if header.get("num_params") != n:
        raise CheckpointError(f"{path}: header parameter count does not match architecture")
    n_arrays = 3 if "adam" in header else 1
    if len(data) - pos != 8 * n * n_arrays:
        raise CheckpointError(f"{path}: payload size {len(data) - pos} does not match header")

    def take(i):
        return np.frombuffer(data, dtype="<f8", count=n, offset=pos + 8 * n * i).astype(np.float64)

    params = ParamVector(arch, take(0))
    adam = None
    if "adam" in header:
        a = header["adam"]
        adam = AdamState(take(1), take(2), a["t"], a["lr"], a["beta1"], a["beta2"], a["eps"])
    return params, adam, header
