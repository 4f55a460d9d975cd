"""Binary checkpoint format for the flat parameter vector.

Layout: 5 magic bytes "CPAT1", a 4-byte little-endian length, a UTF-8
JSON header (dimensions, dropout rate, segment map, caller metadata),
the little-endian float64 payload in canonical flat order, and a trailing
8-byte checksum (truncated SHA-256 of the payload). Loading verifies the
magic, the checksum, and the dimensions; any mismatch is a hard error.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .models import FlatSchema, ModelDims, ModelParams

MAGIC = b"CPAT1"


class CheckpointError(RuntimeError):
    pass


def _payload_checksum(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()[:8]


def save_checkpoint(path: str | Path, gamma: ModelParams, meta: dict | None = None) -> None:
    """Write gamma to `path`; byte-identical for identical (gamma, meta)."""
    dims = gamma.dims()
    schema = FlatSchema(dims)
    flat = schema.pack(gamma)
    header = {
        "dims": {
            "vocab_size": dims.vocab_size,
            "embed_dim": dims.embed_dim,
            "latent_dim": dims.latent_dim,
            "hidden_dim": dims.hidden_dim,
            "gen_hidden_dim": dims.gen_hidden_dim,
        },
        "dropout_rate": dims.dropout_rate,
        "segments": [
            {"name": name, "shape": list(shape), "offset": offset}
            for name, shape, offset in schema.entries
        ],
        "meta": meta or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = flat.astype("<f8").tobytes()
    blob = MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload + _payload_checksum(payload)
    Path(path).write_bytes(blob)


def load_checkpoint(path: str | Path, expect_dims: ModelDims | None = None) -> tuple[ModelParams, dict]:
    """Read a checkpoint; returns (params, header). `expect_dims`, when
    given, must match the stored dimensions exactly."""
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 4 or blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: unknown checkpoint magic")
    pos = len(MAGIC)
    (header_len,) = struct.unpack("<I", blob[pos : pos + 4])
    pos += 4
    if len(blob) < pos + header_len:
        raise CheckpointError(f"{path}: truncated header")
    header = json.loads(blob[pos : pos + header_len].decode("utf-8"))
    pos += header_len
    d = header["dims"]
    dims = ModelDims(
        vocab_size=d["vocab_size"], embed_dim=d["embed_dim"], latent_dim=d["latent_dim"],
        hidden_dim=d["hidden_dim"], gen_hidden_dim=d["gen_hidden_dim"],
        dropout_rate=header["dropout_rate"],
    )
    if expect_dims is not None and dims != expect_dims:
        raise CheckpointError(f"{path}: checkpoint dims {dims} do not match expected {expect_dims}")
    schema = FlatSchema(dims)
    payload_len = schema.total_size * 8
    if len(blob) != pos + payload_len + 8:
        raise CheckpointError(f"{path}: truncated or oversized payload")
    payload = blob[pos : pos + payload_len]
    if _payload_checksum(payload) != blob[pos + payload_len :]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return schema.unpack(flat), header
