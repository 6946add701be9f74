import json

import pytest

from switchcit.cli import main
from switchcit.tasks import BUILTIN_TASKS, load_dataset


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def cli_run(tiny_env, tmp_path_factory):
    run_dir = tmp_path_factory.mktemp("cli_run")
    assert main(["run", "--config", str(tiny_env.config_path), "--strategy", "switchcit", "--out", str(run_dir)]) == 0
    return run_dir


def test_gen_data_deterministic(tiny_env, tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        code, out, _ = run_cli(capsys, "gen-data", "--config", tiny_env.config_path, "--out", d, "--seed", 4)
        assert code == 0
    files = sorted(p.name for p in a.iterdir())
    assert len(files) == 10
    for name in files:
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_missing_out_is_usage_error(capsys):
    code, _, err = run_cli(capsys, "gen-data")
    assert code == 2 and "--out" in err


def test_unknown_command_is_usage_error(capsys):
    assert run_cli(capsys, "train-everything")[0] == 2


def test_invalid_config_is_runtime_error(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("run:\n  bogus: 1\n")
    code, _, err = run_cli(capsys, "gen-data", "--config", bad, "--out", tmp_path / "o")
    assert code == 1 and "bogus" in err
    code, _, err = run_cli(capsys, "gen-data", "--set", "nokey", "--out", tmp_path / "o")
    assert code == 2


def test_pretrain_distinct_hashes(tiny_env, tmp_path, capsys):
    code, out, _ = run_cli(
        capsys, "pretrain", "--config", tiny_env.config_path, "--out", tmp_path,
        "--set", "pretrain.corpus_lines=50", "--set", "pretrain.extractor_corpus_lines=50",
    )
    assert code == 0
    hashes = json.loads(out)["hashes"]
    assert set(hashes) == {"base.sclm", "extractor.sclm"}
    assert hashes["base.sclm"] != hashes["extractor.sclm"]
    assert (tmp_path / "tokenizer.json").exists()


def test_invalid_strategy_lists_valid(tiny_env, tmp_path, capsys):
    code, _, err = run_cli(capsys, "run", "--config", tiny_env.config_path, "--strategy", "ewc", "--out", tmp_path)
    assert code == 2
    assert "switchcit" in err and "rehearsal" in err and "seq_peft" in err


def test_rerun_completed_requires_force(tiny_env, cli_run, capsys):
    code, _, err = run_cli(capsys, "run", "--config", tiny_env.config_path, "--out", cli_run)
    assert code == 1 and "--force" in err


def test_force_and_stop_after(tiny_env, tmp_path, capsys):
    code, out, _ = run_cli(capsys, "run", "--config", tiny_env.config_path, "--out", tmp_path,
                           "--strategy", "seq_peft", "--stop-after", 1)
    assert code == 0 and json.loads(out)["stage"] == 1
    code, out, _ = run_cli(capsys, "run", "--config", tiny_env.config_path, "--out", tmp_path,
                           "--strategy", "seq_peft")
    assert code == 0 and json.loads(out)["complete"]
    code, out, _ = run_cli(capsys, "run", "--config", tiny_env.config_path, "--out", tmp_path,
                           "--strategy", "seq_peft", "--force", "--stop-after", 2)
    assert code == 0 and json.loads(out)["stage"] == 2


def test_missing_inputs_explained(tmp_path, capsys):
    code, _, err = run_cli(capsys, "run", "--out", tmp_path / "r",
                           "--set", f"paths.data_dir={tmp_path}", "--set", f"paths.model_dir={tmp_path}")
    assert code == 1 and "gen-data" in err


def test_route_probabilities(cli_run, capsys):
    spec = BUILTIN_TASKS["sort"]
    code, out, _ = run_cli(capsys, "route", "--run-dir", cli_run, "--instruction", spec.instruction_template,
                           "--input", "dcb ef")
    assert code == 0
    result = json.loads(out)
    assert set(result["probs"]) == set(BUILTIN_TASKS)
    assert abs(sum(result["probs"].values()) - 1.0) <= 1e-6
    assert result["task_id"] == max(result["probs"], key=result["probs"].get)


def test_infer_loads_exactly_one_adapter(cli_run, capsys):
    ex = load_dataset(cli_run / "buffers" / "reverse.jsonl")[0]
    code, out, _ = run_cli(capsys, "infer", "--run-dir", cli_run, "--instruction", ex.instruction, "--input", ex.input)
    assert code == 0
    result = json.loads(out)
    assert len(result["adapters_loaded"]) == 1
    assert result["adapters_loaded"][0].endswith(f"{result['task_id']}.scit")
    assert isinstance(result["output"], str)


def test_route_needs_classifier(tiny_env, tmp_path, capsys):
    assert main(["run", "--config", str(tiny_env.config_path), "--out", str(tmp_path), "--stop-after", "1"]) == 0
    code, _, err = run_cli(capsys, "route", "--run-dir", tmp_path, "--instruction", "Reverse the word order.")
    assert code == 1 and "at least 2" in err


def test_report_idempotent(cli_run, tmp_path, capsys):
    code, out, _ = run_cli(capsys, "report", "--run-dir", cli_run)
    assert code == 0
    first = {k: open(v, "rb").read() for k, v in json.loads(out).items()}
    code, out, _ = run_cli(capsys, "report", "--run-dir", cli_run)
    second = {k: open(v, "rb").read() for k, v in json.loads(out).items()}
    assert first == second
    assert set(first) == {"scores", "rg", "report"}
    assert (cli_run / "report" / "rg.csv").exists()


def test_report_single_stage(tiny_env, tmp_path, capsys):
    run_cli(capsys, "run", "--config", tiny_env.config_path, "--out", tmp_path / "r", "--stop-after", 1)
    code, out, _ = run_cli(capsys, "report", "--run-dir", tmp_path / "r")
    report = json.loads(open(json.loads(out)["report"]).read())
    assert code == 0 and len(report["rg"]) == 1 and len(report["rg"][0]) == 1


def test_report_baseline_needs_ub(tiny_env, tmp_path, capsys):
    run_cli(capsys, "run", "--config", tiny_env.config_path, "--out", tmp_path / "r",
            "--strategy", "seq_peft", "--stop-after", 2)
    code, _, err = run_cli(capsys, "report", "--run-dir", tmp_path / "r")
    assert code == 1 and "switchcit ub" in err
    code, _, err = run_cli(capsys, "report", "--run-dir", tmp_path / "r", "--ub-dir", tmp_path / "none")
    assert code == 1 and "ub" in err
    assert run_cli(capsys, "ub", "--config", tiny_env.config_path, "--out", tmp_path / "ub")[0] == 0
    code, out, _ = run_cli(capsys, "report", "--run-dir", tmp_path / "r", "--ub-dir", tmp_path / "ub")
    assert code == 0


def test_manifest_records_effective_config(tiny_env, tmp_path, capsys):
    main(["run", "--config", str(tiny_env.config_path), "--out", str(tmp_path), "--stop-after", "1",
          "--retention", "0.2", "--oracle-routing"])
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["config"]["run"]["retention"] == 0.2
    assert manifest["config"]["run"]["oracle_routing"] is True
