"""Parameter checkpoint files.

Layout: an ASCII manifest terminated by a line ``end``, then every tensor's
values as little-endian float64 in manifest order::

    oilca-checkpoint v1
    kind cvae
    seed 3
    step 1200
    meta d_u=2
    tensor encoder.0.W 10 64
    ...
    end
"""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..errors import DimensionError, FormatError

MAGIC = "oilca-checkpoint v1"


def save_checkpoint(path, kind, params, seed=0, step=0, meta=None):
    lines = [MAGIC, f"kind {kind}", f"seed {int(seed)}", f"step {int(step)}"]
    for key, value in sorted((meta or {}).items()):
        lines.append(f"meta {key}={value}")
    for name, p in params.items():
        value = p.value if hasattr(p, "value") else np.asarray(p)
        rows, cols = value.shape
        lines.append(f"tensor {name} {rows} {cols}")
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for p in params.values():
            value = p.value if hasattr(p, "value") else np.asarray(p)
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def read_checkpoint(path):
    """Return ``(header, OrderedDict name -> array)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header = {"kind": None, "seed": 0, "step": 0, "meta": {}}
    shapes = OrderedDict()
    offset = 0
    first = True
    while True:
        nl = blob.find(b"\n", offset)
        if nl < 0:
            raise FormatError(f"{path}: manifest not terminated (offset {offset})")
        line = blob[offset:nl].decode("ascii", errors="replace")
        offset = nl + 1
        if first:
            if line != MAGIC:
                raise FormatError(f"{path}: bad magic line at offset 0: {line!r}")
            first = False
            continue
        if line == "end":
            break
        key, _, rest = line.partition(" ")
        if key == "kind":
            header["kind"] = rest
        elif key in ("seed", "step"):
            header[key] = int(rest)
        elif key == "meta":
            k, _, v = rest.partition("=")
            header["meta"][k] = v
        elif key == "tensor":
            name, rows, cols = rest.split()
            shapes[name] = (int(rows), int(cols))
        else:
            raise FormatError(f"{path}: unknown manifest line at offset {offset}: {line!r}")
    arrays = OrderedDict()
    for name, (rows, cols) in shapes.items():
        nbytes = rows * cols * 8
        if offset + nbytes > len(blob):
            raise FormatError(f"{path}: truncated payload for {name} at offset {offset}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=offset).reshape(rows, cols).copy()
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes at offset {offset}")
    return header, arrays


def load_into(path, kind, params):
    """Copy checkpoint values into ``params`` (name -> Tensor); rejects any mismatch."""
    header, arrays = read_checkpoint(path)
    if header["kind"] != kind:
        raise FormatError(f"{path}: checkpoint kind {header['kind']!r}, expected {kind!r}")
    if list(arrays) != list(params):
        raise DimensionError(f"{path}: tensor names differ from model ({list(arrays)} vs {list(params)})")
    for name, p in params.items():
        if arrays[name].shape != p.value.shape:
            raise DimensionError(f"{path}: {name} has shape {arrays[name].shape}, model expects {p.value.shape}")
    for name, p in params.items():
        p.value = arrays[name]
    return header
