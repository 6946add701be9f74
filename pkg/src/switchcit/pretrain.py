"""Pretraining of the base generator and the feature extractor on the generic corpus."""
from __future__ import annotations

import dataclasses
import json
import logging
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

from switchcit.tasks import BUILTIN_TASKS, default_tokenizer, derive_seed, generate_task_data, generic_corpus, save_dataset
from switchcit.tinylm.io import save_model
from switchcit.tinylm.model import ModelConfig, ModelParams, init_params
from switchcit.tinylm.tokenizer import Tokenizer
from switchcit.tinylm.train import TrainConfig, train_lm

if TYPE_CHECKING:
    from switchcit.config import ExperimentConfig

log = logging.getLogger(__name__)


def encode_unit(tok: Tokenizer, text: str, continuation: str | None) -> list[int]:
    ids = tok.encode(text)
    if continuation is not None:
        ids += [tok.sep_id, *tok.encode(continuation)]
    return ids + [tok.eos_id]


def pack_units(
    units: Sequence[tuple[str, str | None]], tok: Tokenizer, max_seq: int
) -> list[tuple[list[int], list[int]]]:
    """Greedily pack whole units behind one bos, each sequence at most ``max_seq`` ids."""
    seqs: list[list[int]] = []
    cur = [tok.bos_id]
    for text, cont in units:
        ids = encode_unit(tok, text, cont)
        if len(ids) + 1 > max_seq:
            raise ValueError(f"corpus unit longer than max_seq: {text!r}")
        if len(cur) + len(ids) > max_seq:
            seqs.append(cur)
            cur = [tok.bos_id]
        cur.extend(ids)
    if len(cur) > 1:
        seqs.append(cur)
    return [(s[:1], s[1:]) for s in seqs]


def pretrain_model(
    cfg: ModelConfig,
    tok: Tokenizer,
    units: Sequence[tuple[str, str | None]],
    tcfg: TrainConfig,
    pack_len: int | None = None,
) -> tuple[ModelParams, list[float]]:
    """Train from scratch; short ``pack_len`` trades context for more optimizer steps."""
    data = pack_units(units, tok, min(pack_len or cfg.max_seq, cfg.max_seq))
    log.info("pretraining dim=%d layers=%d on %d packed sequences", cfg.dim, cfg.n_layers, len(data))
    return train_lm(init_params(cfg), data, tcfg, pad_id=tok.pad_id)


def write_datasets(cfg: "ExperimentConfig", out_dir: str | Path) -> dict[str, int]:
    """Write ``<task>.train.jsonl`` / ``<task>.test.jsonl`` for every configured task."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for task in cfg.tasks.order:
        spec = dataclasses.replace(
            BUILTIN_TASKS[task], train_size=cfg.tasks.train_size, test_size=cfg.tasks.test_size
        )
        train, test = generate_task_data(spec, derive_seed(cfg.seed, task, "data"))
        save_dataset(train, out / f"{task}.train.jsonl")
        save_dataset(test, out / f"{task}.test.jsonl")
        counts[task] = len(train) + len(test)
    return counts


def pretrain_models(cfg: "ExperimentConfig", out_dir: str | Path) -> dict[str, str]:
    """Tokenizer, base generator and feature extractor; returns their content hashes.

    Both see cue-tagged skills, by default in the prompt layout; the extractor
    is smaller and trained far more briefly.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    pc = cfg.pretrain
    tok = default_tokenizer()
    tok.save(out / "tokenizer.json")

    base_units = generic_corpus(
        pc.corpus_lines, derive_seed(cfg.seed, "corpus", "base"), pc.skill_fraction,
        layout="prompt", preamble_fraction=pc.preamble_fraction,
    )
    m = cfg.model
    base_cfg = ModelConfig(tok.vocab_size, m.dim, m.n_layers, m.n_heads, m.max_seq, derive_seed(cfg.seed, "init", "base"))
    base, base_curve = pretrain_model(
        base_cfg, tok, base_units, pc.base.replace(seed=derive_seed(cfg.seed, "train", "base")), pc.pack_len
    )

    ext_units = generic_corpus(
        pc.extractor_corpus_lines, derive_seed(cfg.seed, "corpus", "extractor"), pc.skill_fraction,
        layout=pc.extractor_layout, preamble_fraction=pc.preamble_fraction,
    )
    e = cfg.extractor
    ext_cfg = ModelConfig(tok.vocab_size, e.dim, e.n_layers, e.n_heads, e.max_seq, derive_seed(cfg.seed, "init", "extractor"))
    ext, ext_curve = pretrain_model(
        ext_cfg, tok, ext_units, pc.extractor.replace(seed=derive_seed(cfg.seed, "train", "extractor")), pc.pack_len
    )

    hashes = {
        "base.sclm": save_model(base, out / "base.sclm").hex(),
        "extractor.sclm": save_model(ext, out / "extractor.sclm").hex(),
    }
    (out / "pretrain.json").write_text(
        json.dumps({"hashes": hashes, "base_loss": base_curve, "extractor_loss": ext_curve,
                    "config": cfg.to_dict()}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    return hashes
