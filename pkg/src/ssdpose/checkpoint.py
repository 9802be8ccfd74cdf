"""Binary checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic b"SSDPOSE\\0"
    1 byte    format version
    4 bytes   header length L (uint32)
    L bytes   UTF-8 JSON header
    ...       blobs, back to back, little-endian
    32 bytes  SHA-256 of everything above

The header holds the network spec, head config, anchor layer specs, the
training step, the run config, and a blob table ``[{name, dtype, shape,
offset, nbytes}]`` with offsets relative to the start of the blob area.
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

from .anchors import LayerSpec
from .model import Detector, HeadConfig, NetworkSpec, build

MAGIC = b"SSDPOSE\0"
VERSION = 1
_DTYPES = {"f4": np.dtype("<f4"), "f8": np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    network: NetworkSpec
    head: HeadConfig
    layer_specs: tuple
    step: int
    params: dict                                   # name -> ndarray
    velocity: dict = field(default_factory=dict)   # optimizer momentum buffers
    config: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def n_bins(self) -> int:
        return self.head.n_pose_bins

    @property
    def pose_sharing(self) -> str:
        return self.head.pose_sharing

    def detector(self) -> Detector:
        dtype = next(iter(self.params.values())).dtype
        net = build(self.network, self.head, self.layer_specs, self.seed, dtype=dtype)
        net.load_state_dict(self.params)
        return net

    @classmethod
    def from_detector(cls, net: Detector, step: int = 0, velocity=None, config=None) -> "Checkpoint":
        return cls(net.spec, net.head, tuple(net.layer_specs), step, dict(net.state_dict()),
                   dict(velocity or {}), dict(config or {}), net.seed)


def _code(dtype: np.dtype) -> str:
    if dtype == np.float32:
        return "f4"
    if dtype == np.float64:
        return "f8"
    raise CheckpointError(f"unsupported parameter dtype {dtype}")


def save(ckpt: Checkpoint, path) -> None:
    """Write atomically (temp file + rename)."""
    blobs, table, offset = [], [], 0
    for prefix, group in (("param/", ckpt.params), ("velocity/", ckpt.velocity)):
        for name, arr in group.items():
            arr = np.asarray(arr)
            code = _code(arr.dtype)
            raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
            table.append({"name": prefix + name, "dtype": code, "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(raw)})
            blobs.append(raw)
            offset += len(raw)
    header = {
        "network": ckpt.network.to_dict(),
        "head": ckpt.head.to_dict(),
        "layer_specs": [ls.to_dict() for ls in ckpt.layer_specs],
        "n_bins": ckpt.head.n_pose_bins,
        "pose_sharing": ckpt.head.pose_sharing,
        "step": int(ckpt.step),
        "seed": int(ckpt.seed),
        "config": ckpt.config,
        "blobs": table,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + struct.pack("<BI", VERSION, len(hdr)) + hdr + b"".join(blobs)
    body += hashlib.sha256(body).digest()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(body)
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 5 + 32 or raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<BI", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version} is not supported (this build reads {VERSION})")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")
    start = len(MAGIC) + 5
    header = json.loads(body[start:start + hlen].decode("utf-8"))
    data = body[start + hlen:]
    params, velocity = {}, {}
    for b in header["blobs"]:
        chunk = data[b["offset"]:b["offset"] + b["nbytes"]]
        arr = np.frombuffer(chunk, dtype=_DTYPES[b["dtype"]]).reshape(b["shape"]).astype(_DTYPES[b["dtype"]].newbyteorder("="))
        kind, name = b["name"].split("/", 1)
        (params if kind == "param" else velocity)[name] = arr
    return Checkpoint(
        NetworkSpec.from_dict(header["network"]),
        HeadConfig.from_dict(header["head"]),
        tuple(LayerSpec.from_dict(d) for d in header["layer_specs"]),
        int(header["step"]),
        params,
        velocity,
        header.get("config", {}),
        int(header.get("seed", 0)),
    )


def peek_header(path) -> Optional[dict]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        return None
    _, hlen = struct.unpack_from("<BI", raw, len(MAGIC))
    start = len(MAGIC) + 5
    return json.loads(raw[start:start + hlen].decode("utf-8"))
