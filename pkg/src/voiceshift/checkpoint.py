"""Versioned binary checkpoint container.

Layout: 4-byte magic, little-endian uint32 version, little-endian uint64
header length, UTF-8 JSON header, then the raw tensor payload. Every tensor
is stored as C-order little-endian float32 at the offset recorded in the
header. The header carries three documents:

* ``model_config``   - the architecture dictionary (ModelConfig.to_dict()).
* ``metadata``       - training-stage state: stage name, epoch, step, RNG
                       states, optimizer scalars, feature/mel parameters.
* ``tensors``        - list of {name, shape, offset} records.

Loaders reject unknown magic or version numbers.
"""

import json
import os
import struct
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .errors import CheckpointError

MAGIC = b"VSCP"
VERSION = 1


@dataclass
class CheckpointData:
    model_config: dict
    tensors: Dict[str, np.ndarray]
    metadata: dict


def save_checkpoint(path, model_config: dict, tensors: Dict[str, np.ndarray],
                    metadata: dict) -> None:
    """Write atomically (temp file + rename)."""
    entries = []
    buffers = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d shapes
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        buffers.append(arr.tobytes())
        offset += len(buffers[-1])
    header = json.dumps(
        {"model_config": model_config, "metadata": metadata, "tensors": entries},
        sort_keys=True,
    ).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in buffers:
            fh.write(buf)
    os.replace(tmp, path)


def load_checkpoint(path) -> CheckpointData:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != MAGIC:
                raise CheckpointError(f"{path}: bad magic {magic!r}")
            (version,) = struct.unpack("<I", fh.read(4))
            if version != VERSION:
                raise CheckpointError(
                    f"{path}: unsupported checkpoint version {version}"
                )
            (hlen,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            payload = fh.read()
    except (OSError, struct.error, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    tensors: Dict[str, np.ndarray] = {}
    for ent in header["tensors"]:
        shape = tuple(ent["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = ent["offset"]
        end = start + 4 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: truncated tensor {ent['name']!r}")
        arr = np.frombuffer(payload[start:end], dtype="<f4").reshape(shape)
        tensors[ent["name"]] = arr.copy()
    return CheckpointData(model_config=header["model_config"],
                          tensors=tensors, metadata=header["metadata"])
