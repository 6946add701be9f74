import json
from dataclasses import replace
from pathlib import Path

import pytest

from switchcit.tasks import (
    BUILTIN_TASKS,
    DEFAULT_ORDER,
    PREAMBLE,
    SKILL_CUES,
    DatasetFormatError,
    Example,
    GENERATORS,
    default_tokenizer,
    derive_seed,
    encode_example,
    generate_task_data,
    generic_corpus,
    load_dataset,
    render_prompt,
    render_text,
    retention_size,
    sample_retention,
    save_dataset,
    solve,
)

FIXTURES = Path(__file__).parent / "fixtures"


def small(task, n_train=50, n_test=10):
    return replace(BUILTIN_TASKS[task], train_size=n_train, test_size=n_test)


def test_builtin_registry():
    assert tuple(BUILTIN_TASKS) == DEFAULT_ORDER
    templates = [s.instruction_template for s in BUILTIN_TASKS.values()]
    assert len(set(templates)) == len(templates)
    with pytest.raises(ValueError):
        replace(BUILTIN_TASKS["reverse"], metric="bleu")


def test_golden_reverse_prompt():
    ex = Example("reverse", "Reverse the word order.", "ab c", "c ab")
    assert render_prompt(BUILTIN_TASKS["reverse"], ex) == (FIXTURES / "reverse_prompt.txt").read_text()


def test_prompt_without_input_and_shared_prefix():
    spec = replace(BUILTIN_TASKS["reverse"], has_input=False)
    ex = Example("reverse", spec.instruction_template, "ab c", "c ab")
    text = render_prompt(spec, ex)
    assert text == f"{PREAMBLE} Instruction: Reverse the word order. Response:"
    a = render_text("Sort the letters of each word.", "ab")
    b = render_text("Sort the letters of each word.", "dcb ef")
    prefix = f"{PREAMBLE} Instruction: Sort the letters of each word. Input: "
    assert a.startswith(prefix) and b.startswith(prefix)
    with pytest.raises(ValueError):
        render_prompt(BUILTIN_TASKS["sort"], ex)


def test_encode_example_layout():
    tok = default_tokenizer()
    p, t = encode_example(tok, "ab", "ba")
    assert p == [tok.bos_id, *tok.encode("ab"), tok.sep_id]
    assert t == [*tok.encode("ba"), tok.eos_id]
    assert encode_example(tok, "ab")[1] == []


@pytest.mark.parametrize("task", DEFAULT_ORDER)
def test_generation_deterministic_disjoint_verifiable(task):
    spec = small(task)
    train, test = generate_task_data(spec, 11)
    again = generate_task_data(spec, 11)
    assert (train, test) == again
    assert len(train) == 50 and len(test) == 10
    prompts = lambda xs: {render_prompt(spec, e) for e in xs}
    assert not prompts(train) & prompts(test)
    for ex in train + test:
        assert ex.target == solve(spec, ex.input)
        assert ex.instruction == spec.instruction_template


@pytest.mark.parametrize("task", DEFAULT_ORDER)
def test_prompts_fit_and_tokenize_cleanly(task):
    tok = default_tokenizer()
    spec = BUILTIN_TASKS[task]
    train, test = generate_task_data(spec, 0)
    for ex in train[:200] + test:
        p, t = encode_example(tok, render_prompt(spec, ex), ex.target)
        assert len(p) + len(t) <= 128
        assert tok.unk_id not in p + t
        assert tok.decode(t) == ex.target
        assert len(t) - 1 <= spec.max_new


def test_addition_oracle_over_split():
    train, test = generate_task_data(BUILTIN_TASKS["addition"], 0)
    for ex in train + test:
        a, b = ex.input.split(" + ")
        assert int(ex.target) == int(a) + int(b)
    assert solve("addition", "3 + 4") == "7"


def test_transform_oracles():
    assert solve("reverse", "ab c de") == "de c ab"
    assert solve("uppercase", "ab c") == "AB C"
    assert solve("sort", "cba ed") == "abc de"
    assert solve("headline", "ab cd") == "News: ab meets cd"
    assert solve("headline", "ab cd ef") == "News: ab meets cd and ef"


def test_retention_sizes_and_sampling():
    assert retention_size(2000, 0.01) == 20
    assert retention_size(2000, 0.0001) == 1
    assert retention_size(2000, 1.0) == 2000
    train, _ = generate_task_data(small("reverse", 200), 0)
    buf = sample_retention(train, 0.1, seed=4)
    assert len(buf) == 20 and len(set(buf.examples)) == 20
    assert all(e in train for e in buf.examples)
    assert sample_retention(train, 0.1, seed=4).examples == buf.examples
    assert sample_retention(train, 1.0, seed=4).examples == train
    with pytest.raises(ValueError):
        sample_retention(train, 0.0, seed=0)


def test_derive_seed_stable():
    assert derive_seed(0, "reverse", "adapter") == derive_seed(0, "reverse", "adapter")
    assert derive_seed(0, "reverse", "adapter") != derive_seed(1, "reverse", "adapter")
    assert 0 <= derive_seed(5, "x") < 2**31


def test_dataset_round_trip(tmp_path):
    for task in DEFAULT_ORDER:
        train, _ = generate_task_data(small(task), 0)
        save_dataset(train, tmp_path / f"{task}.jsonl")
        assert load_dataset(tmp_path / f"{task}.jsonl") == train


def test_fixture_jsonl_loads():
    exs = load_dataset(FIXTURES / "three_examples.jsonl")
    assert len(exs) == 3
    assert exs[2].input is None


def test_malformed_jsonl_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps({"task_id": "r", "instruction": "i", "input": None, "target": "t"})
    path.write_text(good + "\n" + json.dumps({"task_id": "r", "instruction": "i"}) + "\n")
    with pytest.raises(DatasetFormatError, match="line 2"):
        load_dataset(path)
    path.write_text("{not json\n")
    with pytest.raises(DatasetFormatError, match="line 1"):
        load_dataset(path)


def test_empty_target_rejected():
    with pytest.raises(ValueError):
        Example("r", "i", None, "")


def test_generic_corpus_layouts():
    plain = generic_corpus(200, seed=0, skill_fraction=0.5, layout="plain")
    prompt = generic_corpus(200, seed=0, skill_fraction=0.5, layout="prompt")
    assert plain == generic_corpus(200, seed=0, skill_fraction=0.5, layout="plain")
    skills = [(t, c) for t, c in plain if c is not None]
    assert skills and all(t.split(" ")[0] in SKILL_CUES.values() for t, _ in skills)
    assert not any(c is not None and "Instruction:" in t for t, c in plain)
    prompted = [t for t, c in prompt if c is not None]
    assert all("Instruction: [" in t and t.endswith("Response:") for t in prompted)
    # no built-in instruction ever appears in pretraining text
    for spec in BUILTIN_TASKS.values():
        assert not any(spec.instruction_template in t for t, _ in plain + prompt)
    with pytest.raises(ValueError):
        generic_corpus(1, 0, layout="chat")


def test_generators_reject_vocab_words():
    import numpy as np

    tok = default_tokenizer()
    rng = np.random.default_rng(0)
    for sample, _ in GENERATORS.values():
        for _ in range(300):
            x = sample(rng)
            assert all(len(tok.encode(w)) == len(w) for w in x.split(" "))
