"""Binary checkpoint format.

Layout::

    b"MLIP1\\0"
    u64 manifest length, then the manifest as UTF-8 JSON (sorted keys):
        {"config": {...}, "params": [{"name", "shape", "offset"}, ...]}
    payload: every parameter as little-endian float32, in manifest order
    u64 checksum of the payload (blake2b, 8-byte digest, little-endian)

Offsets count bytes from the start of the payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig, model_config_from_dict, model_config_to_dict
from .tensor import Tensor

MAGIC = b"MLIP1\0"


class CheckpointError(ValueError):
    pass


class MagicMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class NameCollisionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _checksum(payload: bytes) -> int:
    return struct.unpack("<Q", hashlib.blake2b(payload, digest_size=8).digest())[0]


def encode(params: dict, config: ModelConfig) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, t in params.items():
        data = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4", order="C")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes
    manifest = json.dumps({"config": model_config_to_dict(config), "params": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(chunks)
    return b"".join([MAGIC, struct.pack("<Q", len(manifest)), manifest, payload,
                     struct.pack("<Q", _checksum(payload))])


def save_checkpoint(state, path):
    """Write ``state`` atomically (temporary file, then rename)."""
    path = Path(path)
    blob = encode(state.params, state.config)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def decode(blob: bytes):
    """Parse a checkpoint into ``(ModelConfig, {name: float32 array})``."""
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise MagicMismatchError("not an MLIP checkpoint (bad magic bytes)")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise TruncatedCheckpointError("file ends inside the manifest length")
    (mlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) < pos + mlen:
        raise TruncatedCheckpointError("file ends inside the manifest")
    try:
        manifest = json.loads(blob[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt manifest: {exc}") from None
    pos += mlen
    entries = manifest["params"]
    payload_len = sum(4 * int(np.prod(e["shape"], dtype=np.int64)) for e in entries)
    if len(blob) < pos + payload_len + 8:
        raise TruncatedCheckpointError(
            f"payload needs {payload_len + 8} bytes, only {len(blob) - pos} present")
    if len(blob) > pos + payload_len + 8:
        raise CheckpointError("trailing bytes after the checksum")
    payload = blob[pos:pos + payload_len]
    (stored,) = struct.unpack_from("<Q", blob, pos + payload_len)
    if stored != _checksum(payload):
        raise ChecksumError("payload checksum mismatch")
    arrays = {}
    for e in entries:
        name = e["name"]
        if name in arrays:
            raise NameCollisionError(f"parameter {name!r} appears twice in the manifest")
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        arrays[name] = arr.reshape(e["shape"]).astype(np.float32)
    return model_config_from_dict(manifest["config"]), arrays


def load_arrays(path):
    return decode(Path(path).read_bytes())


def load_checkpoint(path, expected: ModelConfig = None):
    """Load a ModelState; with ``expected`` the shapes must match that config."""
    from .model import ModelState, init_model

    config, arrays = load_arrays(path)
    template = init_model(expected if expected is not None else config, seed=0)
    for name, t in template.params.items():
        if name not in arrays:
            raise ShapeMismatchError(f"parameter {name!r} missing from checkpoint")
        if arrays[name].shape != t.shape:
            raise ShapeMismatchError(
                f"parameter {name!r}: checkpoint shape {arrays[name].shape}, model expects {t.shape}")
    extra = sorted(set(arrays) - set(template.params))
    if extra:
        raise ShapeMismatchError(f"parameter {extra[0]!r} is not part of the model")
    params = {name: Tensor(arrays[name], requires_grad=True, name=name) for name in template.params}
    return ModelState(template.config, params)
