"""Synthetic instruction-task suite, prompt rendering, datasets and retention buffers."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from switchcit.tinylm.tokenizer import Tokenizer, build_tokenizer

PREAMBLE = (
    "Below is an instruction that describes a task. "
    "Write a response that completes the request."
)
METRICS = ("exact_match", "token_accuracy", "rouge1_f")

LETTERS = "abcdefghij"
DIGITS = "0123456789"
ARROW = "=>"

# Raw skill demonstrations in the generic pretraining corpus carry a cue token
# instead of an instruction.
SKILL_CUES = {
    "reverse": "[rev]",
    "uppercase": "[up]",
    "sort": "[sort]",
    "addition": "[add]",
    "headline": "[news]",
}


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    instruction_template: str
    has_input: bool
    generator: str
    metric: str
    max_new: int
    train_size: int = 2000
    test_size: int = 200

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}; expected one of {METRICS}")
        if self.train_size < 1 or self.test_size < 1:
            raise ValueError("train/test sizes must be >= 1")


@dataclass(frozen=True)
class Example:
    task_id: str
    instruction: str
    input: str | None
    target: str

    def __post_init__(self):
        if not self.target:
            raise ValueError("example target must be nonempty")

    def to_json(self) -> dict:
        return {
            "task_id": self.task_id,
            "instruction": self.instruction,
            "input": self.input,
            "target": self.target,
        }


@dataclass
class RetentionBuffer:
    task_id: str
    examples: list[Example]
    retention_rate: float
    features: object | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.examples)


# ---------------------------------------------------------------- generators


def _word(rng: np.random.Generator, lo: int, hi: int) -> str:
    n = int(rng.integers(lo, hi + 1))
    return "".join(LETTERS[i] for i in rng.integers(0, len(LETTERS), size=n))


def _words(rng: np.random.Generator, count: tuple[int, int], length: tuple[int, int]) -> list[str]:
    n = int(rng.integers(count[0], count[1] + 1))
    out = []
    while len(out) < n:
        w = _word(rng, *length)
        # a letter run that collides with a vocabulary word would tokenize differently
        if w not in _VOCAB_WORDS:
            out.append(w)
    return out


def _sample_reverse(rng):
    return " ".join(_words(rng, (2, 4), (1, 3)))


def _solve_reverse(x: str) -> str:
    return " ".join(reversed(x.split(" ")))


def _sample_uppercase(rng):
    return " ".join(_words(rng, (2, 3), (1, 3)))


def _solve_uppercase(x: str) -> str:
    return x.upper()


def _sample_sort(rng):
    return " ".join(_words(rng, (2, 3), (2, 4)))


def _solve_sort(x: str) -> str:
    return " ".join("".join(sorted(w)) for w in x.split(" "))


def _sample_addition(rng):
    a, b = rng.integers(0, 100, size=2)
    return f"{a} + {b}"


def _solve_addition(x: str) -> str:
    a, plus, b = x.split(" ")
    if plus != "+":
        raise ValueError(f"not an addition prompt: {x!r}")
    return str(int(a) + int(b))


def _sample_headline(rng):
    return " ".join(_words(rng, (2, 3), (2, 3)))


def _solve_headline(x: str) -> str:
    kws = x.split(" ")
    text = f"News: {kws[0]} meets {kws[1]}"
    if len(kws) > 2:
        text += " and " + " ".join(kws[2:])
    return text


GENERATORS: dict[str, tuple[Callable[[np.random.Generator], str], Callable[[str], str]]] = {
    "reverse": (_sample_reverse, _solve_reverse),
    "uppercase": (_sample_uppercase, _solve_uppercase),
    "sort": (_sample_sort, _solve_sort),
    "addition": (_sample_addition, _solve_addition),
    "headline": (_sample_headline, _solve_headline),
}

BUILTIN_TASKS: dict[str, TaskSpec] = {
    spec.task_id: spec
    for spec in (
        TaskSpec("reverse", "Reverse the word order.", True, "reverse", "exact_match", 20),
        TaskSpec("uppercase", "Convert the text to uppercase.", True, "uppercase", "token_accuracy", 16),
        TaskSpec("sort", "Sort the letters of each word.", True, "sort", "token_accuracy", 20),
        TaskSpec("addition", "Add the two numbers.", True, "addition", "exact_match", 6),
        TaskSpec("headline", "Write a headline with the keywords in order.", True, "headline", "rouge1_f", 26),
    )
}
DEFAULT_ORDER = ("reverse", "uppercase", "sort", "addition", "headline")

_FIXED_TEXT = [
    PREAMBLE,
    "Instruction: Input: Response: News: meets and",
    ARROW,
    *SKILL_CUES.values(),
    *(spec.instruction_template for spec in BUILTIN_TASKS.values()),
]
_VOCAB_WORDS = {w for text in _FIXED_TEXT for w in text.split(" ") if len(w) > 1}


def solve(task: TaskSpec | str, x: str) -> str:
    """Ground-truth target for an input."""
    generator = task.generator if isinstance(task, TaskSpec) else task
    return GENERATORS[generator][1](x)


def default_tokenizer() -> Tokenizer:
    words = []
    for text in _FIXED_TEXT:
        for w in text.split(" "):
            if len(w) > 1 and w not in words:
                words.append(w)
    chars = LETTERS + LETTERS.upper() + DIGITS + "+"
    return build_tokenizer(chars, words)


# ---------------------------------------------------------------- prompts


def render_text(instruction: str, input: str | None = None) -> str:
    if input is None:
        return f"{PREAMBLE} Instruction: {instruction} Response:"
    return f"{PREAMBLE} Instruction: {instruction} Input: {input} Response:"


def render_prompt(spec: TaskSpec, example: Example) -> str:
    """Preamble, instruction and (when the task takes one) input. The target is never included."""
    if example.task_id != spec.task_id:
        raise ValueError(f"example of task {example.task_id!r} rendered with spec {spec.task_id!r}")
    return render_text(example.instruction, example.input if spec.has_input else None)


def encode_example(tok: Tokenizer, prompt: str, target: str | None = None) -> tuple[list[int], list[int]]:
    """(prompt ids, target ids): bos + prompt + sep, then target + eos."""
    prompt_ids = [tok.bos_id, *tok.encode(prompt), tok.sep_id]
    if target is None:
        return prompt_ids, []
    return prompt_ids, [*tok.encode(target), tok.eos_id]


# ---------------------------------------------------------------- data


def derive_seed(base: int, *parts: object) -> int:
    """Stable 31-bit seed from a base seed and labels; independent of call order."""
    key = ":".join(str(p) for p in (base, *parts))
    return int.from_bytes(hashlib.sha256(key.encode()).digest()[:4], "little") >> 1


def generate_task_data(spec: TaskSpec, seed: int) -> tuple[list[Example], list[Example]]:
    """Distinct inputs in generation order; the first ``train_size`` are train, the rest test."""
    sample, solver = GENERATORS[spec.generator]
    rng = np.random.default_rng(seed)
    need = spec.train_size + spec.test_size
    seen: set[str] = set()
    inputs: list[str] = []
    attempts = 0
    while len(inputs) < need:
        attempts += 1
        if attempts > 200 * need:
            raise RuntimeError(f"generator {spec.generator!r} cannot produce {need} distinct inputs")
        x = sample(rng)
        if x not in seen:
            seen.add(x)
            inputs.append(x)
    examples = [
        Example(spec.task_id, spec.instruction_template, x if spec.has_input else None, solver(x))
        for x in inputs
    ]
    return examples[: spec.train_size], examples[spec.train_size:]


def retention_size(n: int, rate: float) -> int:
    return max(1, math.floor(rate * n + 0.5))


def sample_retention(train: Sequence[Example], rate: float, seed: int) -> RetentionBuffer:
    if not 0 < rate <= 1:
        raise ValueError(f"retention rate must be in (0, 1], got {rate}")
    if not train:
        raise ValueError("cannot sample a retention buffer from an empty split")
    k = min(len(train), retention_size(len(train), rate))
    idx = np.random.default_rng(seed).choice(len(train), size=k, replace=False)
    return RetentionBuffer(train[0].task_id, [train[i] for i in sorted(idx)], rate)


def generic_corpus(
    n_lines: int,
    seed: int,
    skill_fraction: float = 0.8,
    layout: str = "plain",
    preamble_fraction: float = 0.3,
) -> list[tuple[str, str | None]]:
    """Pretraining units ``(text, continuation)``; the continuation follows a separator id.

    Free-text units are random word strings with no continuation. Skill units
    demonstrate one of the five transformations tagged by a cue token instead
    of an instruction. ``layout="prompt"`` places the cue in the instruction
    slot of the prompt layout; ``"plain"`` is ``cue input``.
    """
    if layout not in ("plain", "prompt"):
        raise ValueError(f"unknown corpus layout {layout!r}")
    rng = np.random.default_rng(seed)
    words = sorted(_VOCAB_WORDS - {ARROW, *SKILL_CUES.values()})
    skills = list(SKILL_CUES)
    units: list[tuple[str, str | None]] = []
    for _ in range(n_lines):
        if rng.random() < skill_fraction:
            skill = skills[int(rng.integers(len(skills)))]
            x = GENERATORS[skill][0](rng)
            if layout == "prompt":
                text = f"Instruction: {SKILL_CUES[skill]} Input: {x} Response:"
                if rng.random() < preamble_fraction:
                    text = f"{PREAMBLE} {text}"
            else:
                text = f"{SKILL_CUES[skill]} {x}"
            units.append((text, solve(skill, x)))
        else:
            n = int(rng.integers(4, 13))
            parts = [
                words[int(rng.integers(len(words)))] if rng.random() < 0.5 else _word(rng, 1, 4)
                for _ in range(n)
            ]
            units.append((" ".join(parts), None))
    return units


# ---------------------------------------------------------------- JSONL


def save_dataset(examples: Iterable[Example], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json(), ensure_ascii=False) + "\n")


def load_dataset(path: str | Path) -> list[Example]:
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DatasetFormatError(f"{path}: line {lineno}: expected a JSON object")
            missing = [k for k in ("task_id", "instruction", "target") if k not in obj]
            if missing:
                raise DatasetFormatError(f"{path}: line {lineno}: missing field(s) {', '.join(missing)}")
            inp = obj.get("input")
            if inp is not None and not isinstance(inp, str):
                raise DatasetFormatError(f"{path}: line {lineno}: 'input' must be a string or null")
            try:
                examples.append(Example(obj["task_id"], obj["instruction"], inp, obj["target"]))
            except ValueError as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
    return examples
