"""Checkpoint container: JSON header plus raw float32 tensor payload.

The file layout is an 8-byte magic, a uint32 little-endian header length,
the UTF-8 canonical-JSON header, then every tensor's data concatenated as
little-endian float32 in exactly the order the header lists them.  Canonical
JSON (sorted keys, no whitespace) makes save(load(path)) byte-identical.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .networks import (
    NetStructure,
    net_from_description,
    structure_description,
    structure_hash,
)
from .tensor import Tensor

MAGIC = b"DLNTCKPT"
FORMAT_VERSION = 1

_MAX_HEADER_BYTES = 1 << 24


class CheckpointError(Exception):
    """Raised for malformed, truncated or mismatched checkpoint files."""


@dataclass
class Checkpoint:
    kind: str
    variant: str
    structure: dict
    tensors: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "variant": self.variant,
            "structure": self.structure,
            "structure_hash": structure_hash(self.structure),
            "tensors": [{"name": name, "shape": list(arr.shape)}
                        for name, arr in self.tensors.items()],
            "provenance": self.provenance,
        }

    def save(self, path) -> None:
        header = json.dumps(self.header(), sort_keys=True,
                            separators=(",", ":")).encode()
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for arr in self.tensors.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        blob = path.read_bytes()
        if blob[:len(MAGIC)] != MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
        if len(blob) < len(MAGIC) + 4:
            raise CheckpointError(f"{path} is truncated before the header")
        (header_len,) = struct.unpack_from("<I", blob, len(MAGIC))
        if header_len > _MAX_HEADER_BYTES:
            raise CheckpointError(f"{path}: implausible header length {header_len}")
        start = len(MAGIC) + 4
        if len(blob) < start + header_len:
            raise CheckpointError(f"{path} is truncated inside the header")
        try:
            header = json.loads(blob[start:start + header_len].decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable header ({exc})") from exc
        if header.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {header.get('format_version')}")
        if structure_hash(header["structure"]) != header["structure_hash"]:
            raise CheckpointError(f"{path}: structure hash mismatch")

        payload = blob[start + header_len:]
        expected = sum(int(np.prod(e["shape"])) for e in header["tensors"]) * 4
        if len(payload) != expected:
            raise CheckpointError(f"{path}: payload holds {len(payload)} bytes, "
                                  f"header promises {expected}")
        tensors: dict[str, np.ndarray] = {}
        offset = 0
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            arr = np.frombuffer(payload, dtype="<f4", count=count,
                                offset=offset).reshape(shape)
            tensors[entry["name"]] = arr.astype(np.float32)
            offset += count * 4
        return cls(kind=header["kind"], variant=header["variant"],
                   structure=header["structure"], tensors=tensors,
                   provenance=header["provenance"])


def _net_entries(net: NetStructure) -> list[tuple[str, np.ndarray]]:
    """Parameters in registry order, then BN running moments per unit."""
    entries = [(name, t.data) for name, t in net.params.items()]
    for name, state in net.bn_states.items():
        entries.append((f"{name}.running_mean", state.running_mean))
        entries.append((f"{name}.running_var", state.running_var))
    return entries


def checkpoint_from_net(net: NetStructure, kind: str = "dilation-net",
                        provenance: dict | None = None) -> Checkpoint:
    tensors = {name: np.ascontiguousarray(arr, dtype=np.float32)
               for name, arr in _net_entries(net)}
    return Checkpoint(kind=kind, variant=net.tag,
                      structure=structure_description(net),
                      tensors=tensors, provenance=provenance or {})


def net_from_checkpoint(ckpt: Checkpoint) -> NetStructure:
    if ckpt.kind != "dilation-net":
        raise CheckpointError(f"cannot rebuild a network from a {ckpt.kind!r} "
                              "checkpoint")
    net = net_from_description(ckpt.structure)
    expected = _net_entries(net)
    if [name for name, _ in expected] != list(ckpt.tensors):
        raise CheckpointError("checkpoint tensor names do not match the "
                              "declared structure")
    for name, current in expected:
        arr = ckpt.tensors[name]
        if arr.shape != current.shape:
            raise CheckpointError(f"tensor {name}: checkpoint shape {arr.shape} "
                                  f"does not match structure {current.shape}")
    for name in net.params:
        net.params[name] = Tensor(ckpt.tensors[name].copy())
    for name, state in net.bn_states.items():
        state.running_mean = ckpt.tensors[f"{name}.running_mean"].copy()
        state.running_var = ckpt.tensors[f"{name}.running_var"].copy()
    return net
