"""Whitespace-plus-character tokenizer over a closed synthetic alphabet.

Whole words listed in the vocabulary map to a single id; any other
whitespace-delimited run is split into characters. Every space is its own
token, so decoding is plain concatenation.
"""
from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Iterable, Sequence

PAD, BOS, EOS, SEP, UNK = "<pad>", "<bos>", "<eos>", "<sep>", "<unk>"
SPECIALS = (PAD, BOS, EOS, SEP, UNK)

_SPLIT = re.compile(r"( )")


class Tokenizer:
    def __init__(self, vocab: Sequence[str]):
        vocab = list(vocab)
        if tuple(vocab[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"vocab must start with {SPECIALS}")
        if len(set(vocab)) != len(vocab):
            raise ValueError("duplicate tokens in vocab")
        self.vocab = vocab
        self.index = {tok: i for i, tok in enumerate(vocab)}
        self.pad_id, self.bos_id, self.eos_id, self.sep_id, self.unk_id = range(len(SPECIALS))
        self._specials = frozenset(range(len(SPECIALS)))
        self._words = {tok for tok in vocab[len(SPECIALS):] if len(tok) > 1}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for piece in _SPLIT.split(text):
            if not piece:
                continue
            if piece in self._words:
                ids.append(self.index[piece])
            else:
                ids.extend(self.index.get(ch, self.unk_id) for ch in piece)
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in self._specials and i != self.unk_id:
                continue
            out.append(self.vocab[i])
        return "".join(out)

    def is_single_token(self, word: str) -> bool:
        return word in self._words

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.vocab, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Tokenizer) and self.vocab == other.vocab

    def __repr__(self) -> str:
        return f"Tokenizer(vocab_size={self.vocab_size})"


def build_tokenizer(chars: Iterable[str], words: Iterable[str]) -> Tokenizer:
    """Vocab = specials, then single characters, then multi-character words (order kept, deduplicated)."""
    vocab = list(SPECIALS)
    seen = set(vocab)
    for tok in [" ", *chars, *words]:
        if tok and tok not in seen:
            vocab.append(tok)
            seen.add(tok)
    return Tokenizer(vocab)
