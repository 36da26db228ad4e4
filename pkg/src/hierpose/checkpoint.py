"""Parameter checkpoints: a JSON header followed by named little-endian float32 arrays.

Layout::

    b"HPCKPT\\0\\0"            8-byte magic
    uint64 LE                  header length in bytes
    header (UTF-8 JSON)        {"format_version", "config", "topology", "arrays": [...], "extra"}
    payload                    concatenated float32 arrays, offsets relative to payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .model import DenoiserConfig, HSTDenoiser
from .skeleton import SkeletonTopology, build_topology

MAGIC = b"HPCKPT\0\0"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: HSTDenoiser, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        a = np.ascontiguousarray(tensor.detach().cpu().numpy().astype("<f4"))
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.cfg.to_json(),
        "topology": model.topo.to_json(),
        "arrays": entries,
        "extra": extra or {},
    }
    hbytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    base = 16 + hlen
    arrays = {}
    for e in header["arrays"]:
        start = base + e["offset"]
        if start + e["nbytes"] > len(data):
            raise CheckpointError(f"{path}: truncated array {e['name']}")
        arrays[e["name"]] = np.frombuffer(data, dtype="<f4", count=int(np.prod(e["shape"], dtype=np.int64)),
                                          offset=start).reshape(e["shape"])
    return header, arrays


def load_checkpoint(path) -> tuple[HSTDenoiser, SkeletonTopology, dict]:
    header, arrays = read_checkpoint(path)
    t = header["topology"]
    topo = build_topology(t["parents"], t.get("joint_names"))
    model = HSTDenoiser(DenoiserConfig(**header["config"]), topo)
    state = {k: torch.from_numpy(v.copy()) for k, v in arrays.items()}
    model.load_state_dict(state)
    model.eval()
    return model, topo, header.get("extra", {})
