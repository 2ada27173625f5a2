"""Binary checkpoint container.

Layout::

    b"SETVECCK" | u32 version | u64 header length | JSON header | raw array bytes | sha256 of everything before

The JSON header names every array with its section, dtype, shape and byte
offset, and carries the architecture, training config, its hash and the seed.
Arrays are stored as raw little-endian bytes, so a round trip is bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, IncompatibilityError
from .model import ArchConfig, ModelParams

MAGIC = b"SETVECCK"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST = 32


@dataclass
class OptimizerState:
    """Adam moments mirroring the parameter arrays, plus the step count."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: ModelParams) -> "OptimizerState":
        return cls(0, {k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()})

    def copy(self) -> "OptimizerState":
        return OptimizerState(self.step, {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()})


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class Checkpoint:
    params: ModelParams
    opt_state: OptimizerState
    config: dict = field(default_factory=dict)
    seed: int = 0
    epoch: int = 0

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def _sections(ck: Checkpoint):
    yield from (("param", k, a) for k, a in ck.params.arrays.items())
    yield from (("bn", k, a) for k, a in ck.params.bn_state.items())
    yield from (("adam_m", k, a) for k, a in ck.opt_state.m.items())
    yield from (("adam_v", k, a) for k, a in ck.opt_state.v.items())


def to_bytes(ck: Checkpoint) -> bytes:
    entries, blobs, offset = [], [], 0
    for section, name, arr in _sections(ck):
        raw = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
        entries.append({"section": section, "name": name, "dtype": arr.dtype.newbyteorder("<").str,
                        "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "arch": ck.params.arch.to_dict(),
        "config": ck.config,
        "config_hash": ck.config_hash,
        "seed": int(ck.seed),
        "epoch": int(ck.epoch),
        "opt_step": int(ck.opt_state.step),
        "target_shift": float(ck.params.target_shift),
        "target_scale": float(ck.params.target_scale),
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, VERSION, len(head)) + head + b"".join(blobs)
    return body + hashlib.sha256(body).digest()


def from_bytes(raw: bytes, expect_arch: Optional[ArchConfig] = None) -> Checkpoint:
    if len(raw) < _PREFIX.size + _DIGEST:
        raise FormatError(f"checkpoint too short: {len(raw)} bytes")
    body, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    magic, version, head_len = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    if hashlib.sha256(body).digest() != digest:
        raise FormatError("checkpoint checksum mismatch: file is corrupt or was modified")
    if version != VERSION:
        raise IncompatibilityError(f"checkpoint version {version} is not supported (expected {VERSION})")
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + head_len])
        arch = ArchConfig(**header["arch"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed checkpoint header: {exc}") from exc
    if expect_arch is not None and arch != expect_arch:
        raise IncompatibilityError(f"checkpoint architecture {arch.to_dict()} does not match {expect_arch.to_dict()}")
    blob_start = _PREFIX.size + head_len
    sections = {"param": {}, "bn": {}, "adam_m": {}, "adam_v": {}}
    for e in header["tensors"]:
        start = blob_start + e["offset"]
        chunk = body[start:start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise FormatError(f"tensor {e['name']} truncated")
        arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        sections[e["section"]][e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    params = ModelParams(arch, sections["param"], sections["bn"], header["target_shift"], header["target_scale"])
    state = OptimizerState(header["opt_step"], sections["adam_m"], sections["adam_v"])
    return Checkpoint(params, state, header["config"], header["seed"], header["epoch"])


def save_checkpoint(ck: Checkpoint, path) -> Path:
    """Write atomically: a crash mid-write leaves the previous file intact."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ck))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect_arch: Optional[ArchConfig] = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), expect_arch)
