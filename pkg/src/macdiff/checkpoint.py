"""Checkpoint directories: ``manifest.json`` plus a CRC-protected binary tensor blob.

Blob record layout (little-endian): u32 name length, UTF-8 name, u32 rank,
u32 dims[rank], float32 payload, u32 CRC32 of the payload bytes.
"""
from __future__ import annotations

import json
import os
import shutil
import struct
import tempfile
import zlib
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .model import MacDiffNet, ModelConfig

FORMAT_VERSION = 1
MANIFEST = "manifest.json"
_U32 = struct.Struct("<I")


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def encode_tensors(tensors: dict[str, torch.Tensor]) -> tuple[bytes, dict]:
    chunks, index, offset = [], {}, 0
    for name, t in tensors.items():
        arr = np.array(t.detach().cpu().numpy(), dtype="<f4", order="C")
        raw_name = name.encode("utf-8")
        payload = arr.tobytes()
        rec = b"".join([
            _U32.pack(len(raw_name)), raw_name, _U32.pack(arr.ndim),
            b"".join(_U32.pack(d) for d in arr.shape), payload, _U32.pack(zlib.crc32(payload)),
        ])
        index[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(rec)
        offset += len(rec)
    return b"".join(chunks), index


def decode_tensors(blob: bytes) -> dict[str, torch.Tensor]:
    out, pos, n = {}, 0, len(blob)

    def take(size, what):
        nonlocal pos
        if pos + size > n:
            raise TruncatedCheckpointError(f"tensor blob truncated while reading {what}")
        piece = blob[pos:pos + size]
        pos += size
        return piece

    while pos < n:
        (name_len,) = _U32.unpack(take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (rank,) = _U32.unpack(take(4, f"rank of {name}"))
        dims = [_U32.unpack(take(4, f"shape of {name}"))[0] for _ in range(rank)]
        count = int(np.prod(dims)) if dims else 1
        payload = take(4 * count, f"payload of {name}")
        (crc,) = _U32.unpack(take(4, f"checksum of {name}"))
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"checksum mismatch for tensor {name}")
        arr = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
        out[name] = torch.from_numpy(arr.copy())
    return out


def save_checkpoint(path, tensors: dict[str, torch.Tensor], manifest: dict) -> Path:
    """Atomically write ``path/`` (built in a sibling temp dir, then swapped in)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob, index = encode_tensors(tensors)
    manifest = dict(manifest, format_version=FORMAT_VERSION, blob="tensors.bin", tensors=index)
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        with open(tmp / "tensors.bin", "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        (tmp / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_checkpoint(path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    mpath = path / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"{mpath} not found")
    manifest = json.loads(mpath.read_text())
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} != supported {FORMAT_VERSION}")
    tensors = decode_tensors((path / manifest["blob"]).read_bytes())
    missing = set(manifest["tensors"]) - set(tensors)
    if missing:
        raise TruncatedCheckpointError(f"tensor blob is missing {sorted(missing)}")
    return tensors, manifest


def model_tensors(model: MacDiffNet) -> dict[str, torch.Tensor]:
    return {f"model/{k}": v for k, v in model.state_dict().items()}


def load_model(path, config: Optional[ModelConfig] = None) -> tuple[MacDiffNet, dict]:
    tensors, manifest = read_checkpoint(path)
    config = config or ModelConfig(**manifest["model_config"])
    model = MacDiffNet(config)
    assign_model(model, tensors)
    model.eval()
    return model, manifest


def assign_model(model: MacDiffNet, tensors: dict[str, torch.Tensor]) -> None:
    state = model.state_dict()
    new = {}
    for name, ref in state.items():
        key = f"model/{name}"
        if key not in tensors:
            raise CheckpointShapeError(f"checkpoint lacks tensor {name}")
        if tuple(tensors[key].shape) != tuple(ref.shape):
            raise CheckpointShapeError(
                f"tensor {name} has shape {tuple(tensors[key].shape)}, config expects {tuple(ref.shape)}")
        new[name] = tensors[key].to(ref.dtype)
    model.load_state_dict(new)
