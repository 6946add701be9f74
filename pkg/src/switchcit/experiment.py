"""The complete default experiment: data, pretraining, upper bounds, three strategies, reports.

Equivalent to running the ``gen-data``, ``pretrain``, ``ub``, ``run`` (x3) and
``report`` subcommands in sequence; ``python -m switchcit.experiment --out DIR``.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import time
from pathlib import Path

from switchcit.config import STRATEGIES, ExperimentConfig, load_config
from switchcit.continual import Resources, compute_upper_bounds, load_manifest, run_strategy, with_strategy
from switchcit.evaluation import emit_report
from switchcit.pretrain import pretrain_models, write_datasets

log = logging.getLogger(__name__)


def with_paths(cfg: ExperimentConfig, root: str | Path) -> ExperimentConfig:
    root = Path(root)
    return cfg.replace(paths=dataclasses.replace(
        cfg.paths, data_dir=str(root / "data"), model_dir=str(root / "models")
    ))


def run_experiment(cfg: ExperimentConfig, root: str | Path) -> dict:
    """Run everything under ``root``; returns (and writes ``experiment.json``) timings and final RG."""
    root = Path(root)
    cfg = with_paths(cfg, root)
    timings: dict[str, float] = {}

    def timed(name, fn, *args, **kw):
        t0 = time.perf_counter()
        out = fn(*args, **kw)
        timings[name] = time.perf_counter() - t0
        log.info("%s done in %.1f s", name, timings[name])
        return out

    timed("gen_data", write_datasets, cfg, cfg.paths.data_dir)
    timed("pretrain", pretrain_models, cfg, cfg.paths.model_dir)
    res = Resources.load(cfg.paths.data_dir, cfg.paths.model_dir, cfg.tasks.order)
    ub = timed("ub", compute_upper_bounds, cfg, res, root / "ub")
    summary = {}
    for strategy in STRATEGIES:
        run_dir = root / "runs" / strategy
        state = timed(f"run_{strategy}", run_strategy, with_strategy(cfg, strategy), res, run_dir)
        paths = timed(
            f"report_{strategy}", emit_report, run_dir / "report",
            tasks=state.tasks, scores=state.scores, ub=ub, manifest=load_manifest(run_dir),
        )
        summary[strategy] = json.loads(paths["report"].read_text(encoding="utf-8"))["final_rg"]
    timings["total"] = sum(timings.values())
    result = {"timings": timings, "upper_bounds": ub, "final_rg": summary}
    (root / "experiment.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return result


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="python -m switchcit.experiment", description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--config")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    result = run_experiment(load_config(args.config), args.out)
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
