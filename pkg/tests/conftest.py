import json
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import pytest
import torch
import yaml

torch.set_num_threads(1)

# a miniature experiment: whole pipeline in seconds, same code paths as the default run
TINY = {
    "seed": 0,
    "tasks": {"train_size": 60, "test_size": 12},
    "model": {"dim": 16, "n_layers": 1, "n_heads": 2},
    "extractor": {"dim": 16, "n_layers": 1, "n_heads": 2},
    "pretrain": {
        "corpus_lines": 300,
        "extractor_corpus_lines": 200,
        "base": {"epochs": 1, "batch_size": 16},
        "extractor": {"epochs": 1, "batch_size": 16},
    },
    "train": {"epochs": 1, "batch_size": 16, "learning_rate": 0.01},
    "switch": {"epochs": 5, "hidden_dim": 16},
    "run": {"retention": 0.1, "eval_batch_size": 16},
}


@dataclass
class TinyEnv:
    root: Path
    config_path: Path
    data_dir: Path
    model_dir: Path

    def cfg(self, **overrides):
        from switchcit.config import load_config

        return load_config(self.config_path, overrides)

    def resources(self, cfg=None):
        from switchcit.continual import Resources

        cfg = cfg or self.cfg()
        return Resources.load(self.data_dir, self.model_dir, cfg.tasks.order)


@pytest.fixture(scope="session")
def tiny_env(tmp_path_factory) -> TinyEnv:
    from switchcit.config import load_config
    from switchcit.pretrain import pretrain_models, write_datasets

    root = tmp_path_factory.mktemp("tiny")
    data_dir, model_dir = root / "data", root / "models"
    doc = dict(TINY, paths={"data_dir": str(data_dir), "model_dir": str(model_dir)})
    config_path = root / "tiny.yaml"
    config_path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    cfg = load_config(config_path)
    write_datasets(cfg, data_dir)
    pretrain_models(cfg, model_dir)
    return TinyEnv(root, config_path, data_dir, model_dir)


@pytest.fixture(scope="session")
def tiny_resources(tiny_env):
    return tiny_env.resources()


@pytest.fixture(scope="session")
def tiny_runs(tiny_env, tiny_resources, tmp_path_factory):
    """One completed run per strategy (plus an oracle-routed switchcit run)."""
    from switchcit.continual import run_strategy, with_strategy

    base = tiny_env.cfg()
    out = {}
    for name, cfg in (
        ("switchcit", with_strategy(base, "switchcit")),
        ("rehearsal", with_strategy(base, "rehearsal")),
        ("seq_peft", with_strategy(base, "seq_peft")),
        ("oracle", tiny_env.cfg(**{"run.oracle_routing": True})),
    ):
        run_dir = tmp_path_factory.mktemp(f"run_{name}")
        out[name] = (run_dir, run_strategy(cfg, tiny_resources, run_dir))
    return out


@pytest.fixture(scope="session")
def experiment(tmp_path_factory):
    """The full default experiment, built once under ``SCIT_ACCEPT_DIR`` (default: a temp dir).

    A directory that already holds a finished experiment is reused, together
    with the wall-clock timings recorded when it was built; ``SCIT_ACCEPT_FRESH=1``
    forces a rebuild.
    """
    from switchcit.config import ExperimentConfig
    from switchcit.continual import Resources
    from switchcit.experiment import run_experiment, with_paths

    root = Path(os.environ.get("SCIT_ACCEPT_DIR") or tmp_path_factory.mktemp("accept"))
    done = root / "experiment.json"
    if os.environ.get("SCIT_ACCEPT_FRESH") == "1" and root.exists():
        shutil.rmtree(root)
    if not done.exists():
        root.mkdir(parents=True, exist_ok=True)
        run_experiment(ExperimentConfig(), root)
    result = json.loads(done.read_text())
    cfg = with_paths(ExperimentConfig(), root)
    res = Resources.load(cfg.paths.data_dir, cfg.paths.model_dir, cfg.tasks.order)
    return root, cfg, res, result


@pytest.fixture(scope="session")
def extra_run(experiment):
    """Additional runs into the experiment dir, reused when already complete."""
    from switchcit.continual import run_strategy

    root, cfg, res, _ = experiment

    def get(name, run_cfg, **kw):
        run_dir = root / "extra" / name
        return run_dir, run_strategy(run_cfg, res, run_dir, **kw)

    return get


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
