"""Low-rank adapters over a frozen base model.

Adapter file layout (little-endian)::

    b"SCIT" | u16 version | str task_id | 32-byte base hash | u32 rank | f32 alpha | u32 target count
    | per target: str name, A dims + f32 payload, B dims + f32 payload
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from switchcit.tinylm.io import (
    CorruptFileError,
    check_magic,
    read_dims_and_payload,
    read_exact,
    read_str,
    write_dims_and_payload,
    write_str,
)
from switchcit.tinylm.model import ModelParams, forward, lm_loss, tensor_generator
from switchcit.tinylm.train import TrainConfig, fit

ADAPTER_MAGIC = b"SCIT"
ADAPTER_VERSION = 1
A_INIT_STD = 0.02


class AdapterHashMismatch(ValueError):
    pass


class UnknownTargetError(KeyError):
    pass


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 4
    alpha: float = 16.0
    dropout: float = 0.0
    # suffixes matched against every layer, e.g. "attn.wq" -> "layers.{i}.attn.wq"
    targets: tuple[str, ...] = ("attn.wq", "attn.wv")
    bias: str = "none"

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.bias != "none":
            raise ValueError("only bias='none' is supported")
        object.__setattr__(self, "targets", tuple(self.targets))


@dataclass
class Adapter:
    task_id: str
    base_model_hash: bytes
    rank: int
    alpha: float
    entries: dict[str, tuple[torch.Tensor, torch.Tensor]] = field(repr=False)
    dropout: float = 0.0

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def num_params(self) -> int:
        return sum(a.numel() + b.numel() for a, b in self.entries.values())

    def tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, (a, b) in self.entries.items():
            out[name + ".A"] = a
            out[name + ".B"] = b
        return out

    def clone(self) -> "Adapter":
        return Adapter(
            self.task_id, self.base_model_hash, self.rank, self.alpha,
            {n: (a.detach().clone(), b.detach().clone()) for n, (a, b) in self.entries.items()},
            self.dropout,
        )

    def to_bytes(self) -> bytes:
        fh = io.BytesIO()
        fh.write(ADAPTER_MAGIC)
        fh.write(struct.pack("<H", ADAPTER_VERSION))
        write_str(fh, self.task_id)
        if len(self.base_model_hash) != 32:
            raise ValueError("base_model_hash must be 32 bytes")
        fh.write(self.base_model_hash)
        fh.write(struct.pack("<IfI", self.rank, self.alpha, len(self.entries)))
        for name, (a, b) in self.entries.items():
            write_str(fh, name)
            write_dims_and_payload(fh, a)
            write_dims_and_payload(fh, b)
        return fh.getvalue()

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()

    def equal(self, other: "Adapter") -> bool:
        return (
            self.task_id == other.task_id
            and self.base_model_hash == other.base_model_hash
            and self.rank == other.rank
            and self.alpha == other.alpha
            and self.entries.keys() == other.entries.keys()
            and all(
                torch.equal(a, other.entries[n][0]) and torch.equal(b, other.entries[n][1])
                for n, (a, b) in self.entries.items()
            )
        )


def target_names(base: ModelParams, cfg: AdapterConfig) -> list[str]:
    names = []
    for suffix in cfg.targets:
        matched = [
            f"layers.{i}.{suffix}"
            for i in range(base.config.n_layers)
            if f"layers.{i}.{suffix}" in base.tensors
        ]
        if not matched or base.tensors[matched[0]].dim() != 2:
            raise UnknownTargetError(f"unknown adapter target {suffix!r}")
        names.extend(matched)
    return sorted(names, key=lambda n: (int(n.split(".")[1]), n))


def init_adapter(base: ModelParams, cfg: AdapterConfig, seed: int, task_id: str = "") -> Adapter:
    """A ~ N(0, 0.02^2) from per-target seeded streams, B = 0, so the adapted model equals the base."""
    entries = {}
    for name in target_names(base, cfg):
        out_dim, in_dim = base.tensors[name].shape
        g = tensor_generator(seed, name + ".A")
        a = (torch.randn(cfg.rank, in_dim, generator=g, dtype=torch.float64) * A_INIT_STD).to(base.dtype)
        b = torch.zeros(out_dim, cfg.rank, dtype=base.dtype)
        entries[name] = (a, b)
    # alpha is stored as f32 on disk; round now so reloaded adapters compute identically
    alpha = struct.unpack("<f", struct.pack("<f", cfg.alpha))[0]
    return Adapter(task_id, base.content_hash(), cfg.rank, alpha, entries, cfg.dropout)


def effective_weight(w: torch.Tensor, a: torch.Tensor, b: torch.Tensor, alpha: float, rank: int) -> torch.Tensor:
    """W + (alpha / rank) * B @ A."""
    if a.dim() != 2 or b.dim() != 2 or w.dim() != 2:
        raise ValueError("effective_weight expects matrices")
    if a.shape[0] != b.shape[1] or b.shape[0] != w.shape[0] or a.shape[1] != w.shape[1]:
        raise ValueError(f"shape mismatch: W {tuple(w.shape)}, A {tuple(a.shape)}, B {tuple(b.shape)}")
    return w + (alpha / rank) * (b @ a)


def check_compatible(base: ModelParams, adapter: Adapter, base_hash: bytes | None = None) -> None:
    base_hash = base.content_hash() if base_hash is None else base_hash
    if adapter.base_model_hash != base_hash:
        raise AdapterHashMismatch(
            f"adapter {adapter.task_id!r} was trained on base {adapter.base_model_hash.hex()[:12]}, "
            f"not {base_hash.hex()[:12]}"
        )
    for name, (a, b) in adapter.entries.items():
        if name not in base.tensors:
            raise UnknownTargetError(f"adapter target {name!r} missing from base")
        out_dim, in_dim = base.tensors[name].shape
        if tuple(a.shape) != (adapter.rank, in_dim) or tuple(b.shape) != (out_dim, adapter.rank):
            raise ValueError(f"{name}: adapter shapes {tuple(a.shape)}/{tuple(b.shape)} do not fit base")


def forward_with_adapter(base: ModelParams, adapter: Adapter, ids):
    check_compatible(base, adapter)
    return forward(base, ids, adapter)


def merge(base: ModelParams, adapter: Adapter) -> ModelParams:
    """Standalone model with the deltas folded into the base weights."""
    check_compatible(base, adapter)
    merged = base.clone()
    for name, (a, b) in adapter.entries.items():
        merged.tensors[name] = effective_weight(base.tensors[name], a, b, adapter.alpha, adapter.rank)
    return merged


def train_adapter(
    base: ModelParams,
    data: Sequence[tuple[Sequence[int], Sequence[int]]],
    acfg: AdapterConfig,
    tcfg: TrainConfig,
    *,
    task_id: str,
    init_seed: int,
    adapter: Adapter | None = None,
    pad_id: int = 0,
) -> tuple[Adapter, list[float]]:
    """Train only the A/B matrices; the base tensors never receive gradients.

    Passing ``adapter`` continues training a copy of it (sequential baselines).
    """
    if not data:
        raise ValueError("adapter training data is empty")
    if adapter is None:
        adapter = init_adapter(base, acfg, init_seed, task_id)
    else:
        check_compatible(base, adapter)
        adapter = adapter.clone()
        adapter.dropout = acfg.dropout
    trainable = adapter.tensors()
    gen = None
    if acfg.dropout > 0:
        gen = torch.Generator()
        gen.manual_seed(tcfg.seed)
    curve = fit(
        trainable,
        lambda batch: lm_loss(base, batch, adapter, pad_id=pad_id, dropout_gen=gen),
        data,
        tcfg,
        label=f"adapter[{task_id}]",
    )
    return adapter, curve


def save_adapter(adapter: Adapter, path: str | Path) -> str:
    """Write the adapter file; returns the sha256 hex digest of its bytes."""
    raw = adapter.to_bytes()
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def adapter_from_bytes(raw: bytes) -> Adapter:
    fh = io.BytesIO(raw)
    check_magic(fh, ADAPTER_MAGIC, ADAPTER_VERSION)
    task_id = read_str(fh)
    base_hash = read_exact(fh, 32)
    rank, alpha, n = struct.unpack("<IfI", read_exact(fh, 12))
    entries = {}
    for _ in range(n):
        name = read_str(fh)
        a = read_dims_and_payload(fh)
        b = read_dims_and_payload(fh)
        if a.dim() != 2 or b.dim() != 2 or a.shape[0] != rank or b.shape[1] != rank:
            raise CorruptFileError(f"{name}: inconsistent adapter shapes")
        entries[name] = (a, b)
    if fh.read(1):
        raise CorruptFileError("trailing bytes in adapter file")
    return Adapter(task_id, base_hash, rank, alpha, entries)


def load_adapter(path: str | Path) -> Adapter:
    return adapter_from_bytes(Path(path).read_bytes())
