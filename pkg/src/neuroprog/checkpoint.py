"""Binary checkpoint container shared by networks and the hypernetwork.

Layout::

    NPCKPT 1\\n
    <header byte count>\\n
    <header>            text lines, one per entry:
                          tensor <name> <d0,d1,...> <dtype> <offset> <nbytes>
                          meta <key> <json value>
    <payload>           raw little-endian tensor bytes, offsets relative to here

Entries are written in sorted order so equal contents give equal files.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

MAGIC = b"NPCKPT 1\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: Dict[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    path = Path(path)
    lines = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name {name!r} contains whitespace")
        arr = np.asarray(tensors[name], order="C")
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"tensor {name} {shape} {arr.dtype.name} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    for key in sorted(meta or {}):
        lines.append(f"meta {key} {json.dumps(meta[key], sort_keys=True)}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(f"{len(header)}\n".encode("ascii"))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    return path


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)
    nl = blob.find(b"\n", pos)
    try:
        hlen = int(blob[pos:nl])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header length") from exc
    start = nl + 1
    header = blob[start:start + hlen].decode("utf-8")
    payload = memoryview(blob)[start + hlen:]
    tensors: Dict[str, np.ndarray] = {}
    meta: dict = {}
    for line in header.splitlines():
        kind, rest = line.split(" ", 1)
        if kind == "tensor":
            name, shape, dtype, off, nbytes = rest.split(" ")
            off, nbytes = int(off), int(nbytes)
            if off + nbytes > len(payload):
                raise CheckpointError(f"{path}: truncated payload for {name}")
            dims = () if shape == "-" else tuple(int(d) for d in shape.split(","))
            arr = np.frombuffer(payload[off:off + nbytes], dtype=np.dtype(dtype).newbyteorder("<"))
            tensors[name] = arr.reshape(dims).astype(np.dtype(dtype), copy=True)
        elif kind == "meta":
            key, value = rest.split(" ", 1)
            meta[key] = json.loads(value)
        else:
            raise CheckpointError(f"{path}: unknown header entry {kind!r}")
    return tensors, meta


def save_network(path, net, meta: Optional[dict] = None) -> Path:
    from .genome import encode

    info = {
        "kind": "network",
        "genome": encode(net.genome),
        "base_channels": net.base_channels,
        "in_channels": net.in_channels,
        "dtype": net.dtype.name,
    }
    info.update(meta or {})
    return save_checkpoint(path, net.state_dict(), info)


def load_network(path, genome=None):
    """Rebuild a network from a checkpoint; ``genome`` (if given) must match the stored one."""
    from .genome import decode, encode
    from .netbuilder import build

    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "network":
        raise CheckpointError(f"{path}: not a network checkpoint")
    stored = decode(meta["genome"])
    if genome is not None and encode(genome) != meta["genome"]:
        raise CheckpointError(f"{path}: checkpoint genome does not match the requested genome")
    net = build(stored, meta["base_channels"], meta["in_channels"], rng=0, dtype=meta["dtype"])
    net.load_state_dict(tensors)
    return net, meta
