"""Functional pre-LN causal transformer with rotary positions and a tied output head.

Parameters live in a flat ``name -> tensor`` dict so that low-rank adapters can
be attached by name without wrapping modules.
"""
from __future__ import annotations

import hashlib
import math
import zlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import torch
import torch.nn.functional as F

if TYPE_CHECKING:
    from switchcit.lora import Adapter

IGNORE = -100
INIT_STD = 0.02


class SequenceTooLongError(ValueError):
    pass


class EmptyTargetError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.dim % self.n_heads:
            raise ValueError(f"dim {self.dim} not divisible by n_heads {self.n_heads}")
        if (self.dim // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary encoding")
        if self.max_seq < 2:
            raise ValueError("max_seq must be >= 2")
        if min(self.vocab_size, self.dim, self.n_layers, self.n_heads) < 1:
            raise ValueError("model sizes must be positive")

    @property
    def mlp_dim(self) -> int:
        return 4 * self.dim


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, h = cfg.dim, cfg.mlp_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (cfg.vocab_size, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.weight": (d,), p + "ln1.bias": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d),
            p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.weight": (d,), p + "ln2.bias": (d,),
            p + "mlp.w1": (h, d), p + "mlp.b1": (h,),
            p + "mlp.w2": (d, h), p + "mlp.b2": (d,),
        })
    shapes["ln_f.weight"] = (d,)
    shapes["ln_f.bias"] = (d,)
    return shapes


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, torch.Tensor] = field(repr=False)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    @property
    def dtype(self) -> torch.dtype:
        return self.tensors["tok_emb"].dtype

    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.detach().to(dtype) for k, v in self.tensors.items()})

    def validate(self) -> None:
        expected = param_shapes(self.config)
        if set(expected) != set(self.tensors):
            raise ValueError(f"tensor names differ from config: {sorted(set(expected) ^ set(self.tensors))}")
        for name, shape in expected.items():
            t = self.tensors[name]
            if tuple(t.shape) != shape:
                raise ValueError(f"{name}: shape {tuple(t.shape)} != {shape}")
            if not torch.isfinite(t).all():
                raise ValueError(f"{name}: non-finite entries")

    def content_hash(self) -> bytes:
        """sha256 of the serialized model file."""
        from switchcit.tinylm.io import model_to_bytes

        return hashlib.sha256(model_to_bytes(self)).digest()

    def equal(self, other: "ModelParams") -> bool:
        return (
            self.config == other.config
            and self.tensors.keys() == other.tensors.keys()
            and all(torch.equal(v, other.tensors[k]) for k, v in self.tensors.items())
        )


def tensor_generator(seed: int, name: str) -> torch.Generator:
    """Independent seeded stream per named tensor."""
    g = torch.Generator()
    g.manual_seed((seed * 1_000_003 + zlib.crc32(name.encode())) % (2**63))
    return g


def init_params(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> ModelParams:
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias") or name.endswith(".b1") or name.endswith(".b2"):
            t = torch.zeros(shape, dtype=dtype)
        elif name.endswith("ln1.weight") or name.endswith("ln2.weight") or name == "ln_f.weight":
            t = torch.ones(shape, dtype=dtype)
        else:
            t = torch.randn(shape, generator=tensor_generator(cfg.seed, name), dtype=torch.float64)
            t = (t * INIT_STD).to(dtype)
        tensors[name] = t
    return ModelParams(cfg, tensors)


def zero_params(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> ModelParams:
    return ModelParams(cfg, {n: torch.zeros(s, dtype=dtype) for n, s in param_shapes(cfg).items()})


ROPE_BASE = 10000.0


def rope_tables(length: int, head_dim: int, dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    """cos/sin tables ``(length, head_dim)`` for rotary position encoding (rotate-half layout)."""
    half = head_dim // 2
    inv = ROPE_BASE ** (-torch.arange(half, dtype=torch.float64) / half)
    ang = torch.arange(length, dtype=torch.float64)[:, None] * inv[None, :]
    ang = torch.cat([ang, ang], dim=-1)
    return ang.cos().to(dtype), ang.sin().to(dtype)


def apply_rope(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    rotated = torch.cat([-x[..., half:], x[..., :half]], dim=-1)
    return x * cos + rotated * sin


def _as_batch(ids) -> tuple[torch.Tensor, bool]:
    if isinstance(ids, torch.Tensor):
        t = ids.long()
    else:
        t = torch.as_tensor(list(ids), dtype=torch.long)
    if t.dim() == 1:
        return t.unsqueeze(0), True
    return t, False


def forward(
    params: ModelParams,
    ids,
    adapter: "Adapter | None" = None,
    *,
    dropout_gen: torch.Generator | None = None,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Logits ``(B, L, V)`` and hidden states ``[embeddings, block_1, ..., block_n]``.

    The last hidden state has the final layer norm applied. A 1-D ``ids``
    yields unbatched ``(L, V)`` logits and ``(L, dim)`` hidden states.
    ``dropout_gen`` enables adapter dropout (training only).
    """
    cfg = params.config
    x_ids, squeeze = _as_batch(ids)
    B, L = x_ids.shape
    if L > cfg.max_seq:
        raise SequenceTooLongError(f"sequence of length {L} exceeds max_seq {cfg.max_seq}")
    if L == 0:
        raise ValueError("empty sequence")
    t = params.tensors
    nh, hd = cfg.n_heads, cfg.dim // cfg.n_heads

    entries = adapter.entries if adapter is not None else {}
    scale = adapter.scale if adapter is not None else 0.0
    p_drop = adapter.dropout if (adapter is not None and dropout_gen is not None) else 0.0

    def linear(h: torch.Tensor, name: str) -> torch.Tensor:
        out = h @ t[name].T
        if name in entries:
            a, b = entries[name]
            if p_drop > 0:
                keep = torch.rand(h.shape, generator=dropout_gen, dtype=h.dtype) >= p_drop
                h = h * keep / (1 - p_drop)
            out = out + scale * ((h @ a.T) @ b.T)
        return out

    x = t["tok_emb"][x_ids]
    hidden = [x]
    cos, sin = rope_tables(L, hd, x.dtype)
    mask = torch.ones(L, L, dtype=torch.bool).tril()
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = F.layer_norm(x, (cfg.dim,), t[p + "ln1.weight"], t[p + "ln1.bias"])
        q = apply_rope(linear(h, p + "attn.wq").view(B, L, nh, hd).transpose(1, 2), cos, sin)
        k = apply_rope(linear(h, p + "attn.wk").view(B, L, nh, hd).transpose(1, 2), cos, sin)
        v = linear(h, p + "attn.wv").view(B, L, nh, hd).transpose(1, 2)
        att = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        att = att.masked_fill(~mask, float("-inf")).softmax(dim=-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, cfg.dim)
        x = x + linear(y, p + "attn.wo")
        h = F.layer_norm(x, (cfg.dim,), t[p + "ln2.weight"], t[p + "ln2.bias"])
        h = F.gelu(linear(h, p + "mlp.w1") + t[p + "mlp.b1"])
        x = x + linear(h, p + "mlp.w2") + t[p + "mlp.b2"]
        hidden.append(x)
    x = F.layer_norm(x, (cfg.dim,), t["ln_f.weight"], t["ln_f.bias"])
    hidden[-1] = x
    logits = x @ t["tok_emb"].T
    if squeeze:
        return logits[0], [h_[0] for h_ in hidden]
    return logits, hidden


def collate(
    batch: Sequence[tuple[Sequence[int], Sequence[int]]], pad_id: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-padded inputs and next-token labels; prompt and padding positions are ``IGNORE``."""
    inputs, labels = [], []
    for prompt, target in batch:
        if len(target) == 0:
            raise EmptyTargetError("example has an empty target")
        if len(prompt) == 0:
            raise ValueError("example has an empty prompt")
        seq = list(prompt) + list(target)
        inputs.append(seq[:-1])
        labels.append([IGNORE] * (len(prompt) - 1) + list(target))
    width = max(len(s) for s in inputs)
    ids = torch.full((len(batch), width), pad_id, dtype=torch.long)
    lab = torch.full((len(batch), width), IGNORE, dtype=torch.long)
    for r, (s, l) in enumerate(zip(inputs, labels)):
        ids[r, : len(s)] = torch.as_tensor(s)
        lab[r, : len(l)] = torch.as_tensor(l)
    return ids, lab


def lm_loss(
    params: ModelParams,
    batch: Sequence[tuple[Sequence[int], Sequence[int]]],
    adapter: "Adapter | None" = None,
    *,
    pad_id: int = 0,
    dropout_gen: torch.Generator | None = None,
) -> torch.Tensor:
    """Mean cross-entropy over target tokens of the whole batch (prompt tokens masked)."""
    ids, labels = collate(batch, pad_id)
    if ids.shape[1] + 1 > params.config.max_seq:
        raise SequenceTooLongError(f"prompt+target length {ids.shape[1] + 1} exceeds max_seq")
    logits, _ = forward(params, ids, adapter, dropout_gen=dropout_gen)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE)


def loss_and_grads(
    params: ModelParams,
    batch,
    wrt: dict[str, torch.Tensor] | None = None,
    adapter: "Adapter | None" = None,
    *,
    pad_id: int = 0,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss value and gradients w.r.t. ``wrt`` (default: every model tensor)."""
    if wrt is None:
        params = ModelParams(
            params.config, {k: v.detach().clone().requires_grad_(True) for k, v in params.tensors.items()}
        )
        wrt = params.tensors
    loss = lm_loss(params, batch, adapter, pad_id=pad_id)
    names = list(wrt)
    grads = torch.autograd.grad(loss, [wrt[n] for n in names], allow_unused=True)
    out = {
        n: (g if g is not None else torch.zeros_like(wrt[n])) for n, g in zip(names, grads)
    }
    return float(loss.detach()), out
