"""Versioned checkpoint container.

Layout (all integers little-endian)::

    b"WTCK"                      4-byte magic
    uint32 version               currently 1
    uint32 header_length         bytes of UTF-8 JSON that follow
    header JSON                  model config, parameter names/shapes in
                                 order, metadata, payload size and CRC32
    payload                      float64 little-endian, parameters
                                 concatenated in header order

The header is serialised with sorted keys, so equal parameters and
metadata always produce identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from wavetune.model import Denoiser

MAGIC = b"WTCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def to_bytes(model: Denoiser, meta: dict | None = None) -> bytes:
    names, arrays = [], []
    for name, p in model.named_parameters():
        names.append([name, list(p.shape)])
        arrays.append(p.detach().numpy().astype("<f8").ravel())
    payload = np.concatenate(arrays).tobytes() if arrays else b""
    header = {"format": "wavetune-checkpoint", "model": model.config(), "params": names,
              "meta": meta or {}, "nbytes": len(payload), "crc32": zlib.crc32(payload)}
    head = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<II", VERSION, len(head)) + head + payload


def save_checkpoint(model: Denoiser, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(to_bytes(model, meta))


def from_bytes(blob: bytes, expected_meta: dict | None = None) -> Denoiser:
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CorruptCheckpointError("not a wavetune checkpoint (bad magic or truncated header)")
    version, head_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version} unsupported (expected {VERSION})")
    try:
        header = json.loads(blob[12:12 + head_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorruptCheckpointError(f"unreadable checkpoint header: {err}") from None
    payload = blob[12 + head_len:]
    if len(payload) != header["nbytes"]:
        raise CorruptCheckpointError(f"payload has {len(payload)} bytes, header says {header['nbytes']}")
    if zlib.crc32(payload) != header["crc32"]:
        raise CorruptCheckpointError("payload checksum mismatch")
    cfg = header["model"]
    model = Denoiser(cfg["length"], cfg["vocab_size"], cfg["hidden"], cfg["time_dim"], cfg["cond_dim"], cfg["skip"])
    flat = np.frombuffer(payload, dtype="<f8")
    i = 0
    params = dict(model.named_parameters())
    if [n for n, _ in header["params"]] != list(params):
        raise CheckpointError("parameter layout does not match the model architecture")
    with torch.no_grad():
        for name, shape in header["params"]:
            n = int(np.prod(shape)) if shape else 1
            params[name].copy_(torch.as_tensor(flat[i:i + n].copy()).view(*shape))
            i += n
    meta = dict(header["meta"])
    warnings = []
    for key, want in (expected_meta or {}).items():
        if key in meta and meta[key] != want:
            warnings.append(f"{key}: checkpoint has {meta[key]!r}, run uses {want!r}")
    meta["warnings"] = warnings
    model.checkpoint_meta = meta
    model.version = int(meta.get("version", 0))
    return model


def load_checkpoint(path, expected_meta: dict | None = None) -> Denoiser:
    """Load parameters bit-exactly; metadata lands in ``model.checkpoint_meta``.

    Mismatches against ``expected_meta`` do not fail the load; they are
    listed under ``checkpoint_meta["warnings"]``.
    """
    return from_bytes(Path(path).read_bytes(), expected_meta)
