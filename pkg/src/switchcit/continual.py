"""Sequential task learning under SwitchCIT, Rehearsal and Sequential-PEFT, with checkpointing.

Run directory layout::

    manifest.json
    adapters/<task>.scit      (switchcit; baselines keep a single adapters/shared.scit)
    classifiers/stage<k>.scsw (switchcit, k >= 2)
    buffers/<task>.jsonl
    metrics/scores.json       (lower-triangular stage x task matrix)
    metrics/ub.json
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import torch

from switchcit.config import ExperimentConfig
from switchcit.evaluation import MetricResult, score_predictions
from switchcit.lora import Adapter, load_adapter, save_adapter, train_adapter
from switchcit.switchnet import (
    FeatureExtractor,
    SwitchClassifier,
    accuracy,
    load_classifier,
    save_classifier,
    train_classifier,
)
from switchcit.tasks import (
    BUILTIN_TASKS,
    Example,
    RetentionBuffer,
    TaskSpec,
    derive_seed,
    encode_example,
    load_dataset,
    render_prompt,
    sample_retention,
    save_dataset,
)
from switchcit.tinylm.generate import generate_batch
from switchcit.tinylm.io import load_model
from switchcit.tinylm.model import ModelParams
from switchcit.tinylm.tokenizer import Tokenizer

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
SHARED = "shared"


class CorruptArtifactError(RuntimeError):
    pass


class RunCompleteError(RuntimeError):
    pass


# ---------------------------------------------------------------- resources


@dataclass
class Resources:
    """Frozen models, tokenizer and task splits shared by every strategy."""

    tokenizer: Tokenizer
    base: ModelParams
    extractor: FeatureExtractor
    specs: dict[str, TaskSpec]
    splits: dict[str, tuple[list[Example], list[Example]]]
    base_hash: bytes = field(init=False)
    _test_features: dict[str, torch.Tensor] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.base_hash = self.base.content_hash()

    @classmethod
    def load(cls, data_dir: str | Path, model_dir: str | Path, task_ids: Sequence[str]) -> "Resources":
        data_dir, model_dir = Path(data_dir), Path(model_dir)
        tok = Tokenizer.load(model_dir / "tokenizer.json")
        base = load_model(model_dir / "base.sclm")
        ext = FeatureExtractor(load_model(model_dir / "extractor.sclm"), tok)
        splits = {}
        for t in task_ids:
            splits[t] = (load_dataset(data_dir / f"{t}.train.jsonl"), load_dataset(data_dir / f"{t}.test.jsonl"))
        return cls(tok, base, ext, {t: BUILTIN_TASKS[t] for t in task_ids}, splits)

    def prompt(self, ex: Example) -> str:
        return render_prompt(self.specs[ex.task_id], ex)

    def pairs(self, examples: Sequence[Example]) -> list[tuple[list[int], list[int]]]:
        return [encode_example(self.tokenizer, self.prompt(ex), ex.target) for ex in examples]

    def features(self, examples: Sequence[Example]) -> torch.Tensor:
        return self.extractor.extract_many([self.prompt(ex) for ex in examples])

    def test_features(self, task_id: str) -> torch.Tensor:
        if task_id not in self._test_features:
            self._test_features[task_id] = self.features(self.splits[task_id][1])
        return self._test_features[task_id]


def generate_texts(res: Resources, examples: Sequence[Example], adapter: Adapter | None, batch_size: int) -> list[str]:
    tok = res.tokenizer
    out = []
    for start in range(0, len(examples), batch_size):
        chunk = examples[start : start + batch_size]
        max_new = max(res.specs[ex.task_id].max_new for ex in chunk)
        prompts = [encode_example(tok, res.prompt(ex))[0] for ex in chunk]
        for ex, ids in zip(chunk, generate_batch(res.base, prompts, max_new, tok.eos_id, adapter, tok.pad_id)):
            out.append(tok.decode(ids[: res.specs[ex.task_id].max_new]))
    return out


def evaluate_direct(res: Resources, task_id: str, adapter: Adapter | None, batch_size: int = 100) -> MetricResult:
    test = res.splits[task_id][1]
    preds = generate_texts(res, test, adapter, batch_size)
    return score_predictions(res.specs[task_id].metric, preds, [ex.target for ex in test])


def evaluate_routed(
    res: Resources,
    task_id: str,
    adapters: dict[str, Adapter],
    routes: Sequence[str],
    batch_size: int = 100,
) -> MetricResult:
    """Score a test split when example ``i`` is answered by ``adapters[routes[i]]``.

    Examples sharing a route are decoded together in their original order, so
    a task whose examples all route to one adapter is decoded exactly as in
    ``evaluate_direct``.
    """
    test = res.splits[task_id][1]
    preds: list[str | None] = [None] * len(test)
    for routed in dict.fromkeys(routes):
        idx = [i for i, r in enumerate(routes) if r == routed]
        texts = generate_texts(res, [test[i] for i in idx], adapters[routed], batch_size)
        for i, text in zip(idx, texts):
            preds[i] = text
    return score_predictions(res.specs[task_id].metric, preds, [ex.target for ex in test])


# ---------------------------------------------------------------- state


@dataclass
class RunState:
    strategy: str
    tasks: list[str]
    stage: int = 0
    scores: list[list[float]] = field(default_factory=list)
    ub: dict[str, float] = field(default_factory=dict)
    history: list[dict] = field(default_factory=list)
    artifacts: dict[str, str] = field(default_factory=dict)
    adapters: dict[str, Adapter] = field(default_factory=dict, repr=False)
    buffers: dict[str, RetentionBuffer] = field(default_factory=dict, repr=False)
    classifier: SwitchClassifier | None = field(default=None, repr=False)

    @property
    def complete(self) -> bool:
        return self.stage == len(self.tasks)

    def score(self, stage: int, task_id: str) -> float:
        """score[stage][task] with 1-based stage, defined iff the task was learned by then."""
        i = self.tasks.index(task_id)
        if i >= stage:
            raise KeyError(f"task {task_id!r} not learned by stage {stage}")
        return self.scores[stage - 1][i]


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, obj) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _manifest(cfg: ExperimentConfig, state: RunState, res: Resources) -> dict:
    return {
        "manifest_version": MANIFEST_VERSION,
        "strategy": state.strategy,
        "tasks": state.tasks,
        "stage": state.stage,
        "complete": state.complete,
        "config": cfg.to_dict(),
        "base_model_hash": res.base_hash.hex(),
        "extractor_hash": res.extractor.hash.hex(),
        "artifacts": dict(sorted(state.artifacts.items())),
        "history": state.history,
        "scores": state.scores,
        "upper_bounds": state.ub,
    }


def load_manifest(run_dir: str | Path) -> dict:
    path = Path(run_dir) / "manifest.json"
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorruptArtifactError(f"missing manifest: {path}") from None
    except json.JSONDecodeError as exc:
        raise CorruptArtifactError(f"corrupted manifest {path}: {exc}") from None


def verify_artifacts(run_dir: str | Path, manifest: dict) -> None:
    run_dir = Path(run_dir)
    for rel, digest in manifest["artifacts"].items():
        path = run_dir / rel
        if not path.exists():
            raise CorruptArtifactError(f"missing artifact: {rel}")
        if sha256_file(path) != digest:
            raise CorruptArtifactError(f"artifact hash mismatch (corrupted file): {rel}")


# ---------------------------------------------------------------- runner


class ContinualRun:
    """One strategy over the configured task stream, checkpointed after every stage."""

    def __init__(self, cfg: ExperimentConfig, res: Resources, run_dir: str | Path):
        self.cfg = cfg
        self.res = res
        self.dir = Path(run_dir)
        self.strategy = cfg.run.strategy
        self.tasks = list(cfg.tasks.order)

    # seeds depend on the task, not its position, so per-task results do not depend on task order
    def adapter_seeds(self, task_id: str) -> tuple[int, int]:
        return derive_seed(self.cfg.seed, task_id, "adapter-init"), derive_seed(self.cfg.seed, task_id, "adapter-train")

    def buffer_seed(self, task_id: str) -> int:
        return derive_seed(self.cfg.seed, task_id, "retention")

    # -- persistence

    def _save_adapter(self, state: RunState, key: str, adapter: Adapter) -> str:
        rel = f"adapters/{key}.scit"
        state.artifacts[rel] = save_adapter(adapter, self.dir / rel)
        return state.artifacts[rel]

    def _checkpoint(self, state: RunState) -> None:
        (self.dir / "metrics").mkdir(parents=True, exist_ok=True)
        _write_json(self.dir / "metrics" / "scores.json", {"tasks": state.tasks, "scores": state.scores})
        _write_json(self.dir / "metrics" / "ub.json", state.ub)
        _write_json(self.dir / "manifest.json", _manifest(self.cfg, state, self.res))

    def _restore(self, manifest: dict) -> RunState:
        verify_artifacts(self.dir, manifest)
        if manifest["config"] != self.cfg.to_dict():
            raise CorruptArtifactError("run directory was created with a different configuration")
        state = RunState(
            manifest["strategy"], list(manifest["tasks"]), manifest["stage"],
            [list(r) for r in manifest["scores"]], dict(manifest["upper_bounds"]),
            list(manifest["history"]), dict(manifest["artifacts"]),
        )
        for rel in state.artifacts:
            path = self.dir / rel
            if rel.startswith("adapters/"):
                state.adapters[path.stem] = load_adapter(path)
            elif rel.startswith("buffers/"):
                examples = load_dataset(path)
                state.buffers[path.stem] = RetentionBuffer(path.stem, examples, self.cfg.run.retention)
        last = state.history[-1] if state.history else None
        if last and last.get("classifier"):
            state.classifier = load_classifier(self.dir / last["classifier"], self.res.extractor)
        return state

    # -- public

    def run(self, stop_after: int | None = None) -> RunState:
        """Run (or resume) until every task is learned or ``stop_after`` stages are done."""
        if (self.dir / "manifest.json").exists():
            manifest = load_manifest(self.dir)
            if manifest["strategy"] != self.strategy:
                raise CorruptArtifactError(
                    f"run directory holds a {manifest['strategy']} run, not {self.strategy}"
                )
            state = self._restore(manifest)
            if state.complete:
                return state
            log.info("resuming %s at stage %d", self.strategy, state.stage + 1)
        else:
            for sub in ("adapters", "classifiers", "buffers", "metrics"):
                (self.dir / sub).mkdir(parents=True, exist_ok=True)
            state = RunState(self.strategy, self.tasks)
        while not state.complete:
            if stop_after is not None and state.stage >= stop_after:
                break
            self._stage(state)
            self._checkpoint(state)
        return state

    def _stage(self, state: RunState) -> None:
        k = state.stage + 1
        task = self.tasks[k - 1]
        res, cfg = self.res, self.cfg
        train, _ = res.splits[task]
        init_seed, train_seed = self.adapter_seeds(task)
        tcfg = cfg.train.replace(seed=train_seed)
        record: dict = {"stage": k, "task": task}
        log.info("[%s] stage %d/%d: %s", self.strategy, k, len(self.tasks), task)

        if self.strategy != "seq_peft":
            buf = sample_retention(train, cfg.run.retention, self.buffer_seed(task))
            rel = f"buffers/{task}.jsonl"
            save_dataset(buf.examples, self.dir / rel)
            state.artifacts[rel] = sha256_file(self.dir / rel)

        if self.strategy == "switchcit":
            adapter, curve = train_adapter(
                res.base, res.pairs(train), cfg.adapter, tcfg,
                task_id=task, init_seed=init_seed, pad_id=res.tokenizer.pad_id,
            )
            state.adapters[task] = adapter
            self._save_adapter(state, task, adapter)
            state.buffers[task] = buf
            state.ub[task] = evaluate_direct(res, task, adapter, cfg.run.eval_batch_size).mean
            record["train_size"] = len(train)
            if k >= 2:
                state.classifier, info = self._retrain_switch(state, k)
                record.update(info)
            else:
                state.classifier = None
                record["classifier"] = None
            row = [self._routed_score(state, t) for t in self.tasks[:k]]
        else:
            data = list(train)
            if self.strategy == "rehearsal":
                for prev in self.tasks[: k - 1]:
                    data.extend(state.buffers[prev].examples)
                state.buffers[task] = buf
            previous = state.adapters.get(SHARED)
            adapter, curve = train_adapter(
                res.base, res.pairs(data), cfg.adapter, tcfg,
                task_id=SHARED, init_seed=init_seed, adapter=previous, pad_id=res.tokenizer.pad_id,
            )
            state.adapters[SHARED] = adapter
            self._save_adapter(state, SHARED, adapter)
            record["train_size"] = len(data)
            row = [evaluate_direct(res, t, adapter, cfg.run.eval_batch_size).mean for t in self.tasks[:k]]

        record["loss_curve"] = curve
        record["adapter_hashes"] = {
            rel: h for rel, h in sorted(state.artifacts.items()) if rel.startswith("adapters/")
        }
        record["scores"] = row
        state.scores.append(row)
        state.history.append(record)
        state.stage = k

    def _retrain_switch(self, state: RunState, k: int):
        res, learned = self.res, self.tasks[:k]
        feats, labels = [], []
        for i, t in enumerate(learned):
            buf = state.buffers[t]
            if buf.features is None:
                buf.features = res.features(buf.examples)
            feats.append(buf.features)
            labels += [i] * len(buf)
        scfg = dataclasses.replace(self.cfg.switch, seed=derive_seed(self.cfg.seed, "switch", k))
        clf, train_acc = train_classifier(torch.cat(feats), labels, learned, scfg, res.extractor.hash)
        rel = f"classifiers/stage{k}.scsw"
        state.artifacts[rel] = save_classifier(clf, self.dir / rel)
        test_feats = torch.cat([res.test_features(t) for t in learned])
        test_labels = [i for i, t in enumerate(learned) for _ in range(len(res.splits[t][1]))]
        held_out = accuracy(clf, test_feats, test_labels)
        log.info("[switchcit] stage %d classifier: train acc %.4f, held-out acc %.4f", k, train_acc, held_out)
        return clf, {
            "classifier": rel,
            "classifier_train_accuracy": train_acc,
            "classifier_heldout_accuracy": held_out,
            "retained_examples": len(labels),
        }

    def _routed_score(self, state: RunState, task: str) -> float:
        n = len(self.res.splits[task][1])
        if self.cfg.run.oracle_routing or state.classifier is None:
            routes = [task] * n if self.cfg.run.oracle_routing else [next(iter(state.adapters))] * n
        else:
            pred = state.classifier.predict(self.res.test_features(task))
            routes = [state.classifier.classes[int(i)] for i in pred]
        return evaluate_routed(self.res, task, state.adapters, routes, self.cfg.run.eval_batch_size).mean


def run_strategy(cfg: ExperimentConfig, res: Resources, run_dir, *, stop_after: int | None = None) -> RunState:
    return ContinualRun(cfg, res, run_dir).run(stop_after=stop_after)


def with_strategy(cfg: ExperimentConfig, strategy: str) -> ExperimentConfig:
    return cfg.replace(run=dataclasses.replace(cfg.run, strategy=strategy))


def run_switchcit(cfg: ExperimentConfig, res: Resources, run_dir, **kw) -> RunState:
    return run_strategy(with_strategy(cfg, "switchcit"), res, run_dir, **kw)


def run_rehearsal(cfg: ExperimentConfig, res: Resources, run_dir, **kw) -> RunState:
    return run_strategy(with_strategy(cfg, "rehearsal"), res, run_dir, **kw)


def run_seq_peft(cfg: ExperimentConfig, res: Resources, run_dir, **kw) -> RunState:
    return run_strategy(with_strategy(cfg, "seq_peft"), res, run_dir, **kw)


def resume(cfg: ExperimentConfig, res: Resources, run_dir) -> RunState:
    """Continue an interrupted run; on a completed run this only reloads the final state."""
    manifest = load_manifest(run_dir)
    return ContinualRun(with_strategy(cfg, manifest["strategy"]), res, run_dir).run()


def compute_upper_bounds(cfg: ExperimentConfig, res: Resources, out_dir: str | Path | None = None) -> dict[str, float]:
    """Per task: fresh adapter trained on that task alone, scored on its own test split."""
    runner = ContinualRun(cfg, res, out_dir or ".")
    ub: dict[str, float] = {}
    artifacts: dict[str, str] = {}
    if out_dir is not None:
        (Path(out_dir) / "adapters").mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "metrics").mkdir(parents=True, exist_ok=True)
    for task in cfg.tasks.order:
        init_seed, train_seed = runner.adapter_seeds(task)
        adapter, _ = train_adapter(
            res.base, res.pairs(res.splits[task][0]), cfg.adapter, cfg.train.replace(seed=train_seed),
            task_id=task, init_seed=init_seed, pad_id=res.tokenizer.pad_id,
        )
        ub[task] = evaluate_direct(res, task, adapter, cfg.run.eval_batch_size).mean
        log.info("[ub] %s: %.4f", task, ub[task])
        if out_dir is not None:
            rel = f"adapters/{task}.scit"
            artifacts[rel] = save_adapter(adapter, Path(out_dir) / rel)
    if out_dir is not None:
        _write_json(Path(out_dir) / "metrics" / "ub.json", ub)
        _write_json(Path(out_dir) / "manifest.json", {
            "manifest_version": MANIFEST_VERSION,
            "kind": "upper_bounds",
            "tasks": list(cfg.tasks.order),
            "config": cfg.to_dict(),
            "base_model_hash": res.base_hash.hex(),
            "artifacts": artifacts,
            "upper_bounds": ub,
        })
    return ub


def clear_run_dir(run_dir: str | Path) -> None:
    run_dir = Path(run_dir)
    if run_dir.exists():
        shutil.rmtree(run_dir)
