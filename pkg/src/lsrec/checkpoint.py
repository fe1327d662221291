"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"LSRECKPT"            8-byte magic
    u32 version            currently 1
    u32 header_len
    header                 UTF-8 JSON: {"config", "vocab_hash", "state", "tensors"}
    tensor data            float32 LE, row-major, in header "tensors" order
    sha256 digest          32 bytes over everything above

``header["tensors"]`` is a list of ``{"name", "shape"}``. ``state`` holds
scalar training metadata (epoch, best validation loss, step).
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .model import ModelConfig
from .tensor import Tensor

MAGIC = b"LSRECKPT"
VERSION = 1

__all__ = [
    "CheckpointError",
    "CorruptCheckpointError",
    "CheckpointVersionError",
    "VocabularyMismatchError",
    "ConfigMismatchError",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
]


class CheckpointError(Exception):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class VocabularyMismatchError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def checkpoint_bytes(
    params: dict[str, Tensor], config: ModelConfig, vocab_hash: str, state: dict | None = None
) -> bytes:
    names = list(params)
    header = {
        "config": config.to_dict(),
        "vocab_hash": vocab_hash,
        "state": state or {},
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in names],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(hb)), hb]
    for n in names:
        parts.append(np.ascontiguousarray(params[n].data, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(
    params: dict[str, Tensor],
    config: ModelConfig,
    path: str | Path,
    vocab_hash: str,
    state: dict | None = None,
) -> None:
    """Write atomically (temp file then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params, config, vocab_hash, state))
    os.replace(tmp, path)


def load_checkpoint(
    path: str | Path,
    vocab_hash: str | None = None,
    config: ModelConfig | None = None,
) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    """Read a checkpoint; returns ``(params, config, meta)``.

    ``meta`` has ``vocab_hash`` and ``state``. When ``vocab_hash`` or
    ``config`` are given they must match the file.
    """
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 8 + 32 or raw[: len(MAGIC)] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint or header truncated")
    version, hlen = struct.unpack_from("<II", raw, len(MAGIC))
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {VERSION}")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    off = len(MAGIC) + 8
    try:
        header = json.loads(body[off : off + hlen].decode("utf-8"))
        file_config = ModelConfig.from_dict(header["config"])
        specs = header["tensors"]
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"{path}: bad header ({exc})") from None
    if vocab_hash is not None and header["vocab_hash"] != vocab_hash:
        raise VocabularyMismatchError(
            f"{path}: vocabulary hash {header['vocab_hash'][:12]}... does not match "
            f"{vocab_hash[:12]}..."
        )
    if config is not None and config != file_config:
        raise ConfigMismatchError(f"{path}: checkpoint config {file_config} != expected {config}")
    off += hlen
    params = {}
    for spec in specs:
        shape = tuple(spec["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if off + n > len(body):
            raise CorruptCheckpointError(f"{path}: tensor data truncated at {spec['name']}")
        arr = np.frombuffer(body, dtype="<f4", count=n // 4, offset=off).reshape(shape)
        params[spec["name"]] = Tensor(arr.astype(np.float32), requires_grad=True)
        off += n
    if off != len(body):
        raise CorruptCheckpointError(f"{path}: trailing bytes after tensor data")
    return params, file_config, {"vocab_hash": header["vocab_hash"], "state": header["state"]}
