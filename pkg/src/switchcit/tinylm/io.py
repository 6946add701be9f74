"""Binary tensor formats (little-endian, row-major f32 payloads).

Model file layout::

    b"SCLM" | u16 version | u32 vocab_size, dim, n_layers, n_heads, max_seq | i64 seed
    | u32 tensor count | tensor records

A tensor record is ``u16 name length, name bytes (utf-8), u8 rank, u32 dims..., f32 payload``.
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np
import torch

from switchcit.tinylm.model import ModelConfig, ModelParams

MODEL_MAGIC = b"SCLM"
MODEL_VERSION = 1


class CorruptFileError(ValueError):
    pass


def write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def read_exact(fh: BinaryIO, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise CorruptFileError(f"unexpected end of file (wanted {n} bytes, got {len(raw)})")
    return raw


def read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<H", read_exact(fh, 2))
    try:
        return read_exact(fh, n).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptFileError(f"bad string: {exc}") from None


def write_dims_and_payload(fh: BinaryIO, t: torch.Tensor) -> None:
    fh.write(struct.pack("<B", t.dim()))
    fh.write(struct.pack(f"<{t.dim()}I", *t.shape))
    fh.write(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())


def read_dims_and_payload(fh: BinaryIO) -> torch.Tensor:
    (rank,) = struct.unpack("<B", read_exact(fh, 1))
    dims = struct.unpack(f"<{rank}I", read_exact(fh, 4 * rank))
    count = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(read_exact(fh, 4 * count), dtype="<f4").astype(np.float32)
    return torch.from_numpy(arr.reshape(dims).copy())


def write_tensor(fh: BinaryIO, name: str, t: torch.Tensor) -> None:
    write_str(fh, name)
    write_dims_and_payload(fh, t)


def read_tensor(fh: BinaryIO) -> tuple[str, torch.Tensor]:
    name = read_str(fh)
    return name, read_dims_and_payload(fh)


def write_tensors(fh: BinaryIO, tensors: dict[str, torch.Tensor]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        write_tensor(fh, name, t)


def read_tensors(fh: BinaryIO) -> dict[str, torch.Tensor]:
    (n,) = struct.unpack("<I", read_exact(fh, 4))
    return dict(read_tensor(fh) for _ in range(n))


def check_magic(fh: BinaryIO, magic: bytes, version: int) -> None:
    got = fh.read(4)
    if got != magic:
        raise CorruptFileError(f"bad magic {got!r}, expected {magic!r}")
    (v,) = struct.unpack("<H", read_exact(fh, 2))
    if v != version:
        raise CorruptFileError(f"unsupported version {v}")


def model_to_bytes(params: ModelParams) -> bytes:
    cfg = params.config
    fh = io.BytesIO()
    fh.write(MODEL_MAGIC)
    fh.write(struct.pack("<H", MODEL_VERSION))
    fh.write(struct.pack("<5Iq", cfg.vocab_size, cfg.dim, cfg.n_layers, cfg.n_heads, cfg.max_seq, cfg.seed))
    write_tensors(fh, params.tensors)
    return fh.getvalue()


def model_from_bytes(raw: bytes) -> ModelParams:
    fh = io.BytesIO(raw)
    check_magic(fh, MODEL_MAGIC, MODEL_VERSION)
    vocab, dim, n_layers, n_heads, max_seq, seed = struct.unpack("<5Iq", read_exact(fh, 28))
    try:
        cfg = ModelConfig(vocab, dim, n_layers, n_heads, max_seq, seed)
    except ValueError as exc:
        raise CorruptFileError(f"bad model header: {exc}") from None
    tensors = read_tensors(fh)
    if fh.read(1):
        raise CorruptFileError("trailing bytes after last tensor")
    params = ModelParams(cfg, tensors)
    try:
        params.validate()
    except ValueError as exc:
        raise CorruptFileError(str(exc)) from None
    return params


def save_model(params: ModelParams, path: str | Path) -> bytes:
    """Write the model file; returns its sha256 content hash."""
    raw = model_to_bytes(params)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).digest()


def load_model(path: str | Path) -> ModelParams:
    return model_from_bytes(Path(path).read_bytes())
