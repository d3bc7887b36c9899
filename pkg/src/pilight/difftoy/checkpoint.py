"""Versioned checkpoint blobs.

Layout: ``b"PILT"``, a little-endian u32 header length, a UTF-8 JSON header
``{schema, kind, config, tensors: [{name, shape, offset, nbytes}]}`` and the
concatenated little-endian float32 payloads.  No timestamps, so identical
parameters give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np
import torch

MAGIC = b"PILT"
SCHEMA = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, kind: str, config: dict, state: Dict[str, torch.Tensor]):
    entries, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().numpy().astype("<f4")
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"schema": SCHEMA, "kind": kind, "config": config, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for c in chunks:
            f.write(c)


def load_checkpoint(path) -> Tuple[str, dict, Dict[str, torch.Tensor]]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a pilight checkpoint")
    (hlen,) = struct.unpack("<I", blob[4:8])
    header = json.loads(blob[8:8 + hlen].decode("utf-8"))
    if header.get("schema") != SCHEMA:
        raise CheckpointError(f"{path}: unsupported schema {header.get('schema')!r}")
    base = 8 + hlen
    state = {}
    for e in header["tensors"]:
        raw = blob[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).copy()
        state[e["name"]] = torch.from_numpy(arr)
    return header["kind"], header["config"], state
