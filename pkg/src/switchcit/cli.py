"""``switchcit`` command line: gen-data, pretrain, run, ub, route, infer, report.

Exit codes: 0 success, 2 usage error, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import torch
import yaml

from switchcit.config import STRATEGIES, ConfigError, ExperimentConfig, load_config

log = logging.getLogger("switchcit")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key] = yaml.safe_load(raw)
    return out


def _config(args, **flags) -> ExperimentConfig:
    overrides = _parse_set(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    for key, value in flags.items():
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _resources(cfg: ExperimentConfig):
    from switchcit.continual import Resources

    try:
        return Resources.load(cfg.paths.data_dir, cfg.paths.model_dir, cfg.tasks.order)
    except FileNotFoundError as exc:
        raise CliError(f"missing input {exc.filename}; run gen-data and pretrain first") from None


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from switchcit.pretrain import write_datasets

    cfg = _config(args)
    counts = write_datasets(cfg, args.out)
    _emit({"out": str(args.out), "examples": counts})
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from switchcit.pretrain import pretrain_models

    cfg = _config(args)
    _emit({"out": str(args.out), "hashes": pretrain_models(cfg, args.out)})
    return EXIT_OK


def cmd_run(args) -> int:
    from switchcit.continual import ContinualRun, clear_run_dir, load_manifest

    if args.strategy is not None and args.strategy not in STRATEGIES:
        raise UsageError(f"invalid strategy {args.strategy!r}; valid strategies: {', '.join(STRATEGIES)}")
    cfg = _config(
        args,
        **{"run.strategy": args.strategy, "run.retention": args.retention,
           "run.oracle_routing": True if args.oracle_routing else None},
    )
    run_dir = Path(args.out)
    if (run_dir / "manifest.json").exists():
        if args.force:
            clear_run_dir(run_dir)
        elif load_manifest(run_dir).get("complete"):
            raise CliError(f"{run_dir} already holds a completed run; pass --force to overwrite")
    state = ContinualRun(cfg, _resources(cfg), run_dir).run(stop_after=args.stop_after)
    _emit({"run_dir": str(run_dir), "strategy": state.strategy, "stage": state.stage,
           "complete": state.complete, "final_scores": state.scores[-1] if state.scores else []})
    return EXIT_OK


def cmd_ub(args) -> int:
    from switchcit.continual import compute_upper_bounds

    cfg = _config(args)
    _emit({"out": str(args.out), "upper_bounds": compute_upper_bounds(cfg, _resources(cfg), args.out)})
    return EXIT_OK


def _routing_context(args):
    from switchcit.continual import load_manifest, verify_artifacts
    from switchcit.switchnet import FeatureExtractor, load_classifier
    from switchcit.tinylm.io import load_model
    from switchcit.tinylm.tokenizer import Tokenizer

    run_dir = Path(args.run_dir)
    manifest = load_manifest(run_dir)
    if manifest.get("strategy") != "switchcit":
        raise CliError("routing requires a switchcit run directory")
    verify_artifacts(run_dir, manifest)
    model_dir = Path(args.model_dir or manifest["config"]["paths"]["model_dir"])
    tok = Tokenizer.load(model_dir / "tokenizer.json")
    last = manifest["history"][-1] if manifest["history"] else {}
    if not last.get("classifier"):
        raise CliError("run has no switch classifier: routing requires at least 2 learned tasks")
    extractor = FeatureExtractor(load_model(model_dir / "extractor.sclm"), tok)
    clf = load_classifier(run_dir / last["classifier"], extractor)
    return run_dir, manifest, model_dir, tok, extractor, clf


def _prompt_text(args) -> str:
    from switchcit.tasks import render_text

    return render_text(args.instruction, args.input)


def cmd_route(args) -> int:
    from switchcit.switchnet import classify

    _, _, _, _, extractor, clf = _routing_context(args)
    task_id, probs = classify(clf, extractor, _prompt_text(args))
    _emit({"task_id": task_id, "probs": dict(zip(clf.classes, probs.tolist()))})
    return EXIT_OK


def cmd_infer(args) -> int:
    from switchcit.switchnet import AdapterRegistry, route
    from switchcit.tasks import BUILTIN_TASKS, encode_example
    from switchcit.tinylm.generate import generate_greedy
    from switchcit.tinylm.io import load_model

    run_dir, manifest, model_dir, tok, extractor, clf = _routing_context(args)
    registry = AdapterRegistry({t: run_dir / "adapters" / f"{t}.scit" for t in manifest["tasks"][: manifest["stage"]]})
    text = _prompt_text(args)
    adapter, task_id, probs = route(clf, extractor, registry, text)
    base = load_model(model_dir / "base.sclm")
    prompt, _ = encode_example(tok, text)
    max_new = args.max_new or BUILTIN_TASKS[task_id].max_new
    out = generate_greedy(base, prompt, max_new, tok.eos_id, adapter)
    for path in registry.loaded:
        log.info("loaded adapter %s", path)
    _emit({"task_id": task_id, "output": tok.decode(out),
           "adapters_loaded": [str(p) for p in registry.loaded]})
    return EXIT_OK


def cmd_report(args) -> int:
    from switchcit.continual import load_manifest
    from switchcit.evaluation import emit_report

    run_dir = Path(args.run_dir)
    manifest = load_manifest(run_dir)
    if args.ub_dir is not None:
        ub_path = Path(args.ub_dir) / "metrics" / "ub.json"
        if not ub_path.exists():
            raise CliError(f"no upper bounds at {ub_path}; run `switchcit ub --out {args.ub_dir}` first")
        ub = json.loads(ub_path.read_text(encoding="utf-8"))
    else:
        ub = manifest.get("upper_bounds") or {}
    learned = manifest["tasks"][: manifest["stage"]]
    missing = [t for t in learned if t not in ub]
    if missing:
        raise CliError(f"upper bounds missing for {missing}; run `switchcit ub` and pass --ub-dir")
    out = Path(args.out) if args.out else run_dir / "report"
    paths = emit_report(out, tasks=manifest["tasks"], scores=manifest["scores"], ub=ub, manifest=manifest)
    _emit({k: str(v) for k, v in paths.items()})
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="switchcit", description="Continual instruction tuning with task routing.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, out_required=True, seed=True):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        if seed:
            p.add_argument("--seed", type=int)
        if out_required:
            p.add_argument("--out", required=True)

    p = sub.add_parser("gen-data", help="write task datasets")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="write tokenizer, base and extractor models")
    common(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("run", help="run one continual-learning strategy")
    common(p)
    p.add_argument("--strategy", help=f"one of {', '.join(STRATEGIES)}")
    p.add_argument("--retention", type=float)
    p.add_argument("--oracle-routing", action="store_true")
    p.add_argument("--stop-after", type=int, help="stop after this many stages (resumable)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ub", help="per-task upper bounds")
    common(p)
    p.set_defaults(func=cmd_ub)

    for name, func in (("route", cmd_route), ("infer", cmd_infer)):
        p = sub.add_parser(name, help=f"{name} one instruction through a switchcit run")
        p.add_argument("--run-dir", required=True)
        p.add_argument("--instruction", required=True)
        p.add_argument("--input")
        p.add_argument("--model-dir", help="defaults to the run's configured model directory")
        if name == "infer":
            p.add_argument("--max-new", type=int)
        p.set_defaults(func=func)

    p = sub.add_parser("report", help="write scores.csv, rg.csv and report.json")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--ub-dir")
    p.add_argument("--out", help="defaults to <run-dir>/report")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    from switchcit.continual import CorruptArtifactError

    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    threads = os.environ.get("SCIT_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CliError, CorruptArtifactError, ValueError, LookupError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
