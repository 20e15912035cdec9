"""Self-describing binary checkpoint container.

Layout: the magic string ``M3SCKPT1``, a little-endian uint64 header
length, a UTF-8 text header, then the raw tensor payloads back to back.
The header has a ``[config]`` section of sorted key=value lines and a
``[tensors]`` manifest of ``name dtype d0,d1,...`` lines; payloads are
little-endian and appear in manifest order. Writing is deterministic, so
load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"M3SCKPT1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


class CheckpointError(ValueError):
    pass


def save(path, config, tensors):
    """Write scalars ``config`` (str -> str) and named arrays to ``path``."""
    lines = ["[config]"]
    for key in sorted(config):
        value = str(config[key])
        if "\n" in key or "\n" in value or "=" in key:
            raise CheckpointError(f"config entry {key!r} is not header-safe")
        lines.append(f"{key}={value}")
    lines.append("[tensors]")
    payloads = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"tensor {name}: unsupported dtype {arr.dtype}")
        if " " in name or "\n" in name:
            raise CheckpointError(f"tensor name {name!r} is not header-safe")
        shape = ",".join(map(str, arr.shape)) if arr.shape else ""
        lines.append(f"{name} {arr.dtype.name} {shape}")
        payloads.append(np.ascontiguousarray(arr, dtype=_DTYPES[arr.dtype.name]).tobytes())
    header = ("\n".join(lines) + "\n").encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)


def load(path):
    """Read a checkpoint; returns (config dict, name -> array map)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = fh.read(hlen).decode("utf-8")
        config = {}
        manifest = []
        section = None
        for line in header.splitlines():
            if not line:
                continue
            if line in ("[config]", "[tensors]"):
                section = line
                continue
            if section == "[config]":
                key, _, value = line.partition("=")
                config[key] = value
            elif section == "[tensors]":
                parts = line.split(" ", 2)
                if len(parts) != 3:
                    raise CheckpointError(f"{path}: malformed manifest line {line!r}")
                manifest.append(tuple(parts))
            else:
                raise CheckpointError(f"{path}: header line outside any section: {line!r}")
        tensors = OrderedDict()
        for name, dtype, shape in manifest:
            if dtype not in _DTYPES:
                raise CheckpointError(f"{path}: tensor {name} has unknown dtype {dtype}")
            dims = tuple(int(d) for d in shape.split(",")) if shape else ()
            count = int(np.prod(dims)) if dims else 1
            raw = fh.read(count * np.dtype(_DTYPES[dtype]).itemsize)
            arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).reshape(dims)
            tensors[name] = arr.astype(dtype)
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError(f"{path}: trailing bytes after tensor payloads")
    return config, tensors
