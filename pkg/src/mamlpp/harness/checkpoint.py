"""Binary checkpoints of the full meta-training state.

Layout::

    b"MAMLPPCK"           8-byte magic
    u32 version
    u64 header length     little endian
    header                UTF-8 JSON: metadata, rng states, array table
    payload               raw little-endian arrays, back to back
    sha256                32-byte digest of everything before it

Loading validates every region before building any state, so a truncated or
corrupt file raises :class:`CheckpointError` naming the byte offset where
reading failed and nothing is returned.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import ParamSet, Tensor
from ..errors import CheckpointError
from ..meta import AdamState, MetaState
from ..network import BatchNormState

MAGIC = b"MAMLPPCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


class DigestMismatchWarning(UserWarning):
    """The checkpoint was written under a different configuration."""


@dataclass
class Checkpoint:
    state: MetaState
    epoch: int
    iteration: int
    config: dict = field(default_factory=dict)
    config_digest: str = ""
    rng_states: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    status: str = "ok"


def _state_arrays(state: MetaState):
    arrays = {}
    for name, t in state.theta0.items():
        arrays[f"theta/{name}"] = t.data
    for name, t in state.inner_lrs.items():
        arrays[f"rates/{name}"] = t.data
    for name, a in state.bn.arrays().items():
        arrays[f"bn/{name}"] = a
    for name in state.adam.m:
        arrays[f"adam/m/{name}"] = state.adam.m[name]
        arrays[f"adam/v/{name}"] = state.adam.v[name]
    return arrays


def save_checkpoint(path, ckpt: Checkpoint):
    """Write ``ckpt`` atomically (temp file then rename)."""
    path = Path(path)
    arrays = _state_arrays(ckpt.state)
    table, chunks, offset = [], [], 0
    for name, a in arrays.items():
        a = np.asarray(a, order="C")  # ascontiguousarray would promote 0-d to 1-d
        data = a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes()
        table.append({"name": name, "dtype": a.dtype.str.lstrip("<>|="), "shape": list(a.shape),
                      "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    bn = ckpt.state.bn
    header = {
        "epoch": ckpt.epoch,
        "iteration": ckpt.iteration,
        "config": ckpt.config,
        "config_digest": ckpt.config_digest,
        "rng_states": ckpt.rng_states,
        "extra": ckpt.extra,
        "theta": list(ckpt.state.theta0),
        "rates": list(ckpt.state.inner_lrs),
        "bn": {"mode": bn.mode, "max_steps": bn.max_steps, "eps": bn.eps,
               "momentum": bn.momentum, "layers": list(bn.mean)},
        "adam": {"t": ckpt.state.adam.t, "beta1": ckpt.state.adam.beta1,
                 "beta2": ckpt.state.adam.beta2, "eps": ckpt.state.adam.eps,
                 "names": list(ckpt.state.adam.m)},
        "arrays": table,
    }
    head = json.dumps(header).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(chunks)
    blob = body + hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return path


def _read_header(blob):
    if len(blob) < _PREFIX.size:
        raise CheckpointError("file too short for checkpoint prefix", len(blob))
    magic, version, head_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)", 0)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 8)
    head_end = _PREFIX.size + head_len
    if head_end + _DIGEST > len(blob):
        raise CheckpointError(
            f"header of {head_len} bytes runs past end of file ({len(blob)} bytes)", len(blob))
    try:
        header = json.loads(blob[_PREFIX.size:head_end].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"malformed header: {exc}", _PREFIX.size) from None
    return header, head_end


def load_checkpoint(path, expected_digest: str | None = None) -> Checkpoint:
    """Read a checkpoint written by :func:`save_checkpoint`.

    When ``expected_digest`` is given and differs from the stored config
    digest, a :class:`DigestMismatchWarning` is issued and the returned
    checkpoint has ``status == "digest-mismatch"``.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint '{path}': {exc}") from exc
    header, payload_start = _read_header(blob)
    payload_end = len(blob) - _DIGEST
    arrays = {}
    for entry in header["arrays"]:
        start = payload_start + entry["offset"]
        end = start + entry["nbytes"]
        if end > payload_end:
            raise CheckpointError(
                f"array '{entry['name']}' ({entry['nbytes']} bytes) runs past the payload", start)
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        a = np.frombuffer(blob, dtype=dtype, count=entry["nbytes"] // dtype.itemsize, offset=start)
        arrays[entry["name"]] = a.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    expected_end = payload_start + sum(e["nbytes"] for e in header["arrays"])
    if expected_end != payload_end:
        raise CheckpointError(
            f"payload size mismatch: header describes {expected_end - payload_start} bytes, "
            f"file holds {payload_end - payload_start}", min(expected_end, payload_end))
    if hashlib.sha256(blob[:payload_end]).digest() != blob[payload_end:]:
        raise CheckpointError("checksum mismatch, file is corrupt", payload_end)

    theta = ParamSet((n, Tensor(arrays[f"theta/{n}"], requires_grad=True)) for n in header["theta"])
    rates = ParamSet((n, Tensor(arrays[f"rates/{n}"], requires_grad=True)) for n in header["rates"])
    b = header["bn"]
    bn = BatchNormState(b["mode"], b["max_steps"], b["eps"], b["momentum"])
    for layer in b["layers"]:
        bn.mean[layer] = arrays[f"bn/{layer}/mean"]
        bn.var[layer] = arrays[f"bn/{layer}/var"]
        bn.count[layer] = arrays[f"bn/{layer}/count"]
    a = header["adam"]
    adam = AdamState(
        {n: arrays[f"adam/m/{n}"] for n in a["names"]},
        {n: arrays[f"adam/v/{n}"] for n in a["names"]},
        a["t"], a["beta1"], a["beta2"], a["eps"],
    )
    ckpt = Checkpoint(
        MetaState(theta, rates, bn, adam), header["epoch"], header["iteration"],
        header["config"], header["config_digest"], header["rng_states"], header["extra"],
    )
    if expected_digest is not None and expected_digest != ckpt.config_digest:
        ckpt.status = "digest-mismatch"
        warnings.warn(
            f"checkpoint '{path}' was written under config {ckpt.config_digest}, "
            f"current config is {expected_digest}",
            DigestMismatchWarning, stacklevel=2,
        )
    return ckpt
