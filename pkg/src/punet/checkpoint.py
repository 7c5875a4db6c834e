"""Binary checkpoint format.

Layout::

    b"PUNETCKP"                 8-byte format tag
    uint32 LE                   format version
    uint64 LE                   header length in bytes
    header                      UTF-8 JSON: architecture, dtype, manifest, meta, sha256
    payload                     raw little-endian buffers in manifest order

The manifest lists ``name``, ``shape`` and ``kind`` (param or buffer) for
every tensor.  The SHA-256 digest covers the payload only.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architectures import ArchitectureSpec, build_network
from .errors import CheckpointError

MAGIC = b"PUNETCKP"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


@dataclass
class Checkpoint:
    arch: ArchitectureSpec
    state: "OrderedDict[str, np.ndarray]"
    dtype: str
    meta: dict = field(default_factory=dict)
    kinds: dict = field(default_factory=dict)

    def build(self):
        model = build_network(self.arch, dtype=np.dtype(self.dtype))
        model.load_state_dict(self.state)
        return model


def save_checkpoint(path, model, meta: dict | None = None, state=None) -> Path:
    """Write ``model`` (or an explicit ``state`` for it) to ``path``."""
    arch = model.arch
    params = {k for k, _ in model.named_parameters()}
    state = model.state_dict() if state is None else state
    dtypes = {a.dtype for a in state.values()}
    if len(dtypes) != 1:
        raise CheckpointError(f"mixed dtypes in state: {dtypes}")
    dtype = np.dtype(dtypes.pop()).newbyteorder("<")
    manifest = []
    chunks = []
    for name, arr in state.items():
        manifest.append({"name": name, "shape": list(arr.shape), "kind": "param" if name in params else "buffer"})
        chunks.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    payload = b"".join(chunks)
    header = {
        "format": "punet-checkpoint",
        "version": VERSION,
        "arch": arch.to_dict(),
        "dtype": dtype.name,
        "manifest": manifest,
        "meta": meta or {},
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, VERSION, len(hbytes)))
        f.write(hbytes)
        f.write(payload)
    return path


def read_header(raw: bytes) -> tuple[dict, int]:
    if len(raw) < _PREFIX.size:
        raise CheckpointError("file too short for a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("not a punet checkpoint (bad format tag)")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _PREFIX.size
    try:
        header = json.loads(raw[start : start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    return header, start + hlen


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    header, offset = read_header(raw)
    payload = raw[offset:]
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError("checkpoint checksum mismatch")
    dtype = np.dtype(header["dtype"]).newbyteorder("<")
    state = OrderedDict()
    kinds = {}
    pos = 0
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if pos + nbytes > len(payload):
            raise CheckpointError(f"payload too short for {entry['name']}")
        state[entry["name"]] = np.frombuffer(payload, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).astype(dtype.newbyteorder("="))
        kinds[entry["name"]] = entry["kind"]
        pos += nbytes
    if pos != len(payload):
        raise CheckpointError(f"{len(payload) - pos} trailing bytes after manifest")
    arch = ArchitectureSpec.from_dict(header["arch"])
    return Checkpoint(arch, state, np.dtype(header["dtype"]).name, header.get("meta", {}), kinds)


def load_into(model, ckpt: Checkpoint):
    """Load ``ckpt`` into an existing model, refusing architecture mismatches."""
    if ckpt.arch.to_dict() != model.arch.to_dict():
        raise CheckpointError(f"checkpoint is for {ckpt.arch.name or ckpt.arch.family}, model is {model.arch.name or model.arch.family}")
    try:
        model.load_state_dict(ckpt.state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(str(e)) from e
    return model
