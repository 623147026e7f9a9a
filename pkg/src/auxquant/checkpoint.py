"""Versioned checkpoint container.

Byte layout (documented so other implementations can interoperate):

    bytes 0..8    magic b"AUXQCKPT"
    bytes 8..16   unsigned 64-bit little-endian header length H
    bytes 16..16+H UTF-8 JSON header
    bytes 16+H..  payload: raw IEEE-754 arrays, little-endian, back to back

The header declares ``format_version``, ``endianness`` ("little"),
``dtype``, the network / auxiliary spec documents, optimizer metadata, RNG
stream states, and one entry per payload array: name, shape, byte offset
into the payload, and group ("param", "buffer", or "opt.<slot>"). A
round-trip through disk reproduces the next training step bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .auxiliary import AuxiliarySpec
from .errors import DataFormatError
from .network import NetworkSpec

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"AUXQCKPT"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    network_spec: NetworkSpec
    params: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    aux_spec: AuxiliarySpec | None = None
    optimizer: dict | None = None      # optimizer state_dict, slots hold arrays
    rng_state: dict | None = None      # named stream -> bit-generator state
    dtype: str = "float32"
    format_version: int = FORMAT_VERSION
    meta: dict = field(default_factory=dict)

    def clone(self) -> "Checkpoint":
        opt = None
        if self.optimizer is not None:
            opt = json.loads(json.dumps({k: v for k, v in self.optimizer.items() if k != "slots"}))
            opt["slots"] = {s: {n: a.copy() for n, a in d.items()}
                            for s, d in self.optimizer["slots"].items()}
        return Checkpoint(
            network_spec=self.network_spec,
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            aux_spec=self.aux_spec,
            optimizer=opt,
            rng_state=json.loads(json.dumps(self.rng_state)) if self.rng_state else None,
            dtype=self.dtype,
            format_version=self.format_version,
            meta=dict(self.meta),
        )

    def save(self, path) -> None:
        save_checkpoint(self, path)

    @staticmethod
    def load(path) -> "Checkpoint":
        return load_checkpoint(path)


def _collect_blobs(ck: Checkpoint):
    blobs = []
    for name in sorted(ck.params):
        blobs.append((name, "param", ck.params[name]))
    for name in sorted(ck.buffers):
        blobs.append((name, "buffer", ck.buffers[name]))
    if ck.optimizer is not None:
        for slot in sorted(ck.optimizer.get("slots", {})):
            for name in sorted(ck.optimizer["slots"][slot]):
                blobs.append((name, f"opt.{slot}", ck.optimizer["slots"][slot][name]))
    return blobs


def save_checkpoint(ck: Checkpoint, path) -> None:
    np_dtype = _DTYPES[ck.dtype]
    blobs = _collect_blobs(ck)
    entries = []
    offset = 0
    payload = []
    for name, group, arr in blobs:
        raw = np.ascontiguousarray(arr).astype(np_dtype).tobytes()
        entries.append({"name": name, "group": group,
                        "shape": list(arr.shape), "offset": offset})
        payload.append(raw)
        offset += len(raw)
    opt_meta = None
    if ck.optimizer is not None:
        opt_meta = {k: v for k, v in ck.optimizer.items() if k != "slots"}
    header = {
        "format_version": ck.format_version,
        "endianness": "little",
        "dtype": ck.dtype,
        "network_spec": ck.network_spec.to_dict(),
        "auxiliary_spec": ck.aux_spec.to_dict() if ck.aux_spec else None,
        "optimizer": opt_meta,
        "rng": ck.rng_state,
        "meta": ck.meta,
        "arrays": entries,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(hbytes).to_bytes(8, "little"))
        f.write(hbytes)
        for raw in payload:
            f.write(raw)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        hlen = int.from_bytes(f.read(8), "little")
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported format version {version}")
    np_dtype = _DTYPES[header["dtype"]]
    itemsize = np.dtype(np_dtype).itemsize

    params, buffers = {}, {}
    slots: dict[str, dict[str, np.ndarray]] = {}
    for e in header["arrays"]:
        shape = tuple(e["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = e["offset"]
        arr = np.frombuffer(payload, dtype=np_dtype, count=count, offset=start)
        arr = arr.astype(header["dtype"]).reshape(shape)
        if e["group"] == "param":
            params[e["name"]] = arr
        elif e["group"] == "buffer":
            buffers[e["name"]] = arr
        elif e["group"].startswith("opt."):
            slots.setdefault(e["group"][4:], {})[e["name"]] = arr
        else:
            raise DataFormatError(f"{path}: unknown array group {e['group']!r}")
    optimizer = None
    if header.get("optimizer") is not None:
        optimizer = dict(header["optimizer"])
        optimizer["slots"] = slots
    return Checkpoint(
        network_spec=NetworkSpec.from_dict(header["network_spec"]),
        params=params,
        buffers=buffers,
        aux_spec=AuxiliarySpec.from_dict(header["auxiliary_spec"])
        if header.get("auxiliary_spec") else None,
        optimizer=optimizer,
        rng_state=header.get("rng"),
        dtype=header["dtype"],
        format_version=version,
        meta=header.get("meta", {}),
    )
