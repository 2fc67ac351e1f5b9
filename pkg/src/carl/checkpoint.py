"""Versioned binary checkpoints: magic, JSON header, then raw named tensors.

Layout::

    b"CARLCKPT" | u32 version | u32 header_len | header (UTF-8 JSON) | tensor bytes

The header holds the caller's metadata plus a ``tensors`` table of
``{name, dtype, shape, offset, nbytes}``; offsets are relative to the end of
the header. Output bytes depend only on the inputs.
"""

import hashlib
import json
import struct

import numpy as np
import torch

MAGIC = b"CARLCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _to_numpy(t):
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.asarray(t, order="C")
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def dumps(meta, tensors):
    table, blobs, offset = [], [], 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = arr.tobytes()
        table.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(meta)
    header["tensors"] = table
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def loads(data):
    if data[:8] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(data[16:16 + hlen].decode())
    base = 16 + hlen
    tensors = {}
    for entry in header.pop("tensors"):
        start = base + entry["offset"]
        arr = np.frombuffer(data[start:start + entry["nbytes"]], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    return header, tensors


def save(path, meta, tensors):
    data = dumps(meta, tensors)
    with open(path, "wb") as fh:
        fh.write(data)
    return hashlib.sha256(data).hexdigest()[:16]


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())


def file_hash(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:16]


def prefixed(state, prefix):
    return {f"{prefix}{k}": v for k, v in state.items()}


def strip_prefix(tensors, prefix):
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}
