import json

import pytest

from switchcit.continual import (
    ContinualRun,
    CorruptArtifactError,
    compute_upper_bounds,
    load_manifest,
    resume,
    run_strategy,
    with_strategy,
)
from switchcit.evaluation import progressive_rg
from switchcit.lora import load_adapter
from switchcit.tasks import retention_size

TASKS = ["reverse", "uppercase", "sort", "addition", "headline"]


def test_switchcit_layout(tiny_runs):
    run_dir, state = tiny_runs["switchcit"]
    assert state.complete and state.stage == 5
    assert sorted(p.name for p in (run_dir / "adapters").iterdir()) == sorted(f"{t}.scit" for t in TASKS)
    assert sorted(p.name for p in (run_dir / "classifiers").iterdir()) == [f"stage{k}.scsw" for k in (2, 3, 4, 5)]
    assert sorted(p.name for p in (run_dir / "buffers").iterdir()) == sorted(f"{t}.jsonl" for t in TASKS)
    assert [len(r) for r in state.scores] == [1, 2, 3, 4, 5]
    persisted = json.loads((run_dir / "metrics" / "scores.json").read_text())
    assert persisted["scores"] == state.scores
    assert set(json.loads((run_dir / "metrics" / "ub.json").read_text())) == set(TASKS)


def test_switchcit_adapter_isolation(tiny_runs):
    run_dir, state = tiny_runs["switchcit"]
    final = state.history[-1]["adapter_hashes"]
    for k, rec in enumerate(state.history, start=1):
        rel = f"adapters/{TASKS[k - 1]}.scit"
        assert rec["adapter_hashes"][rel] == final[rel]
        for earlier, h in rec["adapter_hashes"].items():
            assert final[earlier] == h


def test_switchcit_diagonal_is_upper_bound(tiny_runs):
    _, state = tiny_runs["switchcit"]
    for k, t in enumerate(TASKS, start=1):
        assert state.score(k, t) == state.ub[t]


def test_oracle_routing_equivalence(tiny_runs):
    _, state = tiny_runs["oracle"]
    for k, t in enumerate(TASKS, start=1):
        assert state.scores[-1][k - 1] == state.score(k, t) == state.ub[t]
    positive = {t: u for t, u in state.ub.items() if u > 0}
    m = progressive_rg(state.scores, TASKS, {t: state.ub[t] or 1.0 for t in TASKS})
    for s, row in enumerate(m.rg):
        for i, v in enumerate(row):
            if TASKS[i] in positive:
                assert v == 1.0


def test_classifier_records(tiny_runs):
    _, state = tiny_runs["switchcit"]
    assert state.history[0]["classifier"] is None
    for k, rec in enumerate(state.history[1:], start=2):
        assert rec["classifier"] == f"classifiers/stage{k}.scsw"
        assert rec["retained_examples"] == k * retention_size(60, 0.1)
        assert 0 <= rec["classifier_heldout_accuracy"] <= 1


def test_baselines_single_adapter(tiny_runs):
    for name in ("rehearsal", "seq_peft"):
        run_dir, state = tiny_runs[name]
        assert [p.name for p in (run_dir / "adapters").iterdir()] == ["shared.scit"]
        assert not list((run_dir / "classifiers").iterdir())
    assert not list((tiny_runs["seq_peft"][0] / "buffers").iterdir())


def test_rehearsal_training_set_sizes(tiny_runs):
    _, state = tiny_runs["rehearsal"]
    buf = retention_size(60, 0.1)
    assert [r["train_size"] for r in state.history] == [60 + buf * k for k in range(5)]


def test_stage_one_identical_across_strategies(tiny_runs):
    sw, re, sp = (tiny_runs[n][1] for n in ("switchcit", "rehearsal", "seq_peft"))
    assert re.history[0]["loss_curve"] == sp.history[0]["loss_curve"] == sw.history[0]["loss_curve"]
    assert sw.scores[0] == re.scores[0] == sp.scores[0]


def test_budget_parity(tiny_runs):
    sw_dir, _ = tiny_runs["switchcit"]
    re_dir, _ = tiny_runs["rehearsal"]
    for t in TASKS:
        assert (sw_dir / "buffers" / f"{t}.jsonl").read_bytes() == (re_dir / "buffers" / f"{t}.jsonl").read_bytes()


def test_upper_bounds_match_switchcit_and_ignore_order(tiny_env, tiny_resources, tiny_runs, tmp_path):
    _, state = tiny_runs["switchcit"]
    ub = compute_upper_bounds(tiny_env.cfg(), tiny_resources, tmp_path / "ub")
    assert ub == state.ub
    manifest = json.loads((tmp_path / "ub" / "manifest.json").read_text())
    assert manifest["upper_bounds"] == ub and len(ub) == 5
    flipped = tiny_env.cfg(**{"tasks.order": list(reversed(TASKS))})
    assert compute_upper_bounds(flipped, tiny_resources) == ub


def test_determinism_identical_manifests(tiny_env, tiny_resources, tiny_runs, tmp_path):
    run_dir, _ = tiny_runs["switchcit"]
    run_strategy(tiny_env.cfg(), tiny_resources, tmp_path / "again")
    assert (tmp_path / "again" / "manifest.json").read_bytes() == (run_dir / "manifest.json").read_bytes()


@pytest.mark.parametrize("strategy", ["switchcit", "rehearsal"])
def test_interrupt_and_resume(tiny_env, tiny_resources, tiny_runs, tmp_path, strategy):
    cfg = with_strategy(tiny_env.cfg(), strategy)
    partial = run_strategy(cfg, tiny_resources, tmp_path, stop_after=2)
    assert partial.stage == 2 and not partial.complete
    final = resume(cfg, tiny_resources, tmp_path)
    reference_dir, reference = tiny_runs[strategy]
    assert final.scores == reference.scores
    assert (tmp_path / "manifest.json").read_bytes() == (reference_dir / "manifest.json").read_bytes()


def test_resume_completed_is_noop(tiny_env, tiny_resources, tiny_runs):
    run_dir, state = tiny_runs["seq_peft"]
    before = (run_dir / "manifest.json").read_bytes()
    again = resume(tiny_env.cfg(), tiny_resources, run_dir)
    assert again.scores == state.scores and again.complete
    assert (run_dir / "manifest.json").read_bytes() == before


def test_flipped_byte_detected(tiny_env, tiny_resources, tmp_path):
    cfg = tiny_env.cfg()
    run_strategy(cfg, tiny_resources, tmp_path, stop_after=1)
    path = tmp_path / "adapters" / "reverse.scit"
    raw = bytearray(path.read_bytes())
    raw[-1] ^= 0x01
    path.write_bytes(bytes(raw))
    with pytest.raises(CorruptArtifactError, match="reverse.scit"):
        resume(cfg, tiny_resources, tmp_path)


def test_missing_artifact_and_config_change(tiny_env, tiny_resources, tmp_path):
    cfg = tiny_env.cfg()
    run_strategy(cfg, tiny_resources, tmp_path / "a", stop_after=1)
    with pytest.raises(CorruptArtifactError, match="different configuration"):
        ContinualRun(tiny_env.cfg(seed=1), tiny_resources, tmp_path / "a").run()
    (tmp_path / "a" / "buffers" / "reverse.jsonl").unlink()
    with pytest.raises(CorruptArtifactError, match="missing artifact"):
        resume(cfg, tiny_resources, tmp_path / "a")
    with pytest.raises(CorruptArtifactError, match="missing manifest"):
        load_manifest(tmp_path / "nothing")


def test_adapters_bound_to_base(tiny_runs, tiny_resources):
    run_dir, _ = tiny_runs["switchcit"]
    for t in TASKS:
        ad = load_adapter(run_dir / "adapters" / f"{t}.scit")
        assert ad.task_id == t and ad.base_model_hash == tiny_resources.base_hash
