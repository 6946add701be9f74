"""Minibatch training loop shared by pretraining, adapter tuning and the switch classifier."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence, TypeVar

import numpy as np
import torch

from switchcit.tinylm.model import ModelParams, lm_loss

log = logging.getLogger(__name__)

T = TypeVar("T")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    epochs: int = 3
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    grad_clip: float | None = 1.0
    seed: int = 0
    max_steps: int | None = None
    # "constant", or "cosine": linear warmup then cosine decay to min_lr_ratio * learning_rate
    schedule: str = "constant"
    warmup_steps: int = 0
    min_lr_ratio: float = 0.1

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def replace(self, **kw) -> "TrainConfig":
        from dataclasses import replace

        return replace(self, **kw)


def lr_at(cfg: TrainConfig, step: int, total_steps: int) -> float:
    """Learning rate for 0-based ``step`` of ``total_steps``."""
    if cfg.schedule == "constant":
        return cfg.learning_rate
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    span = max(1, total_steps - cfg.warmup_steps)
    progress = min(1.0, (step - cfg.warmup_steps) / span)
    floor = cfg.min_lr_ratio * cfg.learning_rate
    return floor + (cfg.learning_rate - floor) * 0.5 * (1 + math.cos(math.pi * progress))


def fit(
    trainable: dict[str, torch.Tensor],
    loss_fn: Callable[[list[T]], torch.Tensor],
    data: Sequence[T],
    cfg: TrainConfig,
    label: str = "train",
) -> list[float]:
    """Optimise ``trainable`` in place with AdamW; returns per-epoch mean loss.

    Examples are reshuffled every epoch from a stream seeded by ``cfg.seed``.
    """
    if len(data) == 0:
        raise ValueError("training data is empty")
    names = list(trainable)
    leaves = [trainable[n] for n in names]
    for t in leaves:
        t.requires_grad_(True)
    opt = torch.optim.AdamW(
        leaves, lr=cfg.learning_rate, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
        weight_decay=cfg.weight_decay, foreach=False,
    )
    rng = np.random.default_rng(cfg.seed)
    total_steps = cfg.epochs * math.ceil(len(data) / cfg.batch_size)
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    curve: list[float] = []
    steps = 0
    try:
        for epoch in range(cfg.epochs):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            order = rng.permutation(len(data))
            total, count = 0.0, 0
            for start in range(0, len(data), cfg.batch_size):
                if cfg.max_steps is not None and steps >= cfg.max_steps:
                    break
                batch = [data[i] for i in order[start : start + cfg.batch_size]]
                loss = loss_fn(batch)
                value = float(loss.detach())
                if not math.isfinite(value):
                    raise TrainingDivergedError(
                        f"{label}: non-finite loss {value} at epoch {epoch + 1}, step {steps + 1} "
                        f"(lr={cfg.learning_rate}); last epoch mean {curve[-1] if curve else 'n/a'}"
                    )
                grads = torch.autograd.grad(loss, leaves, allow_unused=True)
                for p, g in zip(leaves, grads):
                    p.grad = g if g is not None else torch.zeros_like(p)
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(leaves, cfg.grad_clip, foreach=False)
                opt.param_groups[0]["lr"] = lr_at(cfg, steps, total_steps)
                opt.step()
                steps += 1
                total += value * len(batch)
                count += len(batch)
            if count:
                curve.append(total / count)
                log.debug("%s epoch %d mean loss %.4f", label, epoch + 1, curve[-1])
    finally:
        for t in leaves:
            t.grad = None
            t.requires_grad_(False)
    return curve


def train_lm(
    params: ModelParams,
    dataset: Sequence[tuple[Sequence[int], Sequence[int]]],
    cfg: TrainConfig,
    pad_id: int = 0,
) -> tuple[ModelParams, list[float]]:
    """Full-parameter training on (prompt ids, target ids) pairs. The input params are not modified."""
    out = params.clone()
    curve = fit(out.tensors, lambda b: lm_loss(out, b, pad_id=pad_id), dataset, cfg, label="lm")
    return out, curve
