from __future__ import annotations

from typing import TYPE_CHECKING, Sequence

import torch

from switchcit.tinylm.model import ModelParams, SequenceTooLongError, forward

if TYPE_CHECKING:
    from switchcit.lora import Adapter


@torch.no_grad()
def generate_batch(
    params: ModelParams,
    prompts: Sequence[Sequence[int]],
    max_new: int,
    eos_id: int,
    adapter: "Adapter | None" = None,
    pad_id: int = 0,
) -> list[list[int]]:
    """Greedy continuations (eos excluded) for right-padded prompts decoded in lockstep.

    Rows never see one another: each row only attends to its own earlier
    positions, and its next token is read at its own last position.
    """
    if not prompts:
        return []
    lens = [len(p) for p in prompts]
    if min(lens) == 0:
        raise ValueError("prompt must be nonempty")
    if max(lens) + max_new > params.config.max_seq:
        raise SequenceTooLongError(
            f"prompt length {max(lens)} + max_new {max_new} exceeds max_seq {params.config.max_seq}"
        )
    B = len(prompts)
    buf = torch.full((B, max(lens) + max_new), pad_id, dtype=torch.long)
    for r, p in enumerate(prompts):
        buf[r, : len(p)] = torch.as_tensor(list(p))
    cur = torch.tensor(lens)
    done = torch.zeros(B, dtype=torch.bool)
    out: list[list[int]] = [[] for _ in range(B)]
    rows = torch.arange(B)
    for _ in range(max_new):
        logits, _ = forward(params, buf[:, : int(cur.max())], adapter)
        # argmax returns the first maximal index, i.e. ties go to the lowest id
        nxt = logits[rows, cur - 1].argmax(dim=-1)
        for r in range(B):
            if done[r]:
                continue
            tok = int(nxt[r])
            if tok == eos_id:
                done[r] = True
                continue
            out[r].append(tok)
            buf[r, cur[r]] = tok
            cur[r] += 1
        if done.all():
            break
    return out


def generate_greedy(
    params: ModelParams,
    prompt: Sequence[int],
    max_new: int,
    eos_id: int,
    adapter: "Adapter | None" = None,
) -> list[int]:
    return generate_batch(params, [prompt], max_new, eos_id, adapter)[0]
