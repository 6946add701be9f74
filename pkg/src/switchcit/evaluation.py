"""Metrics, Relative Gain and report emission."""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

REPORT_VERSION = 1


class UndefinedUpperBoundError(ValueError):
    pass


def normalize(s: str) -> str:
    return " ".join(s.split())


def exact_match(prediction: str, target: str) -> int:
    return int(normalize(prediction) == normalize(target))


def token_accuracy(prediction: str, target: str) -> float:
    """Position-wise whitespace-token matches over the longer of the two sequences."""
    p, t = prediction.split(), target.split()
    n = max(len(p), len(t))
    if n == 0:
        return 1.0
    return sum(a == b for a, b in zip(p, t)) / n


def rouge1_prf(prediction: str, target: str) -> tuple[float, float, float]:
    p, r = Counter(prediction.split()), Counter(target.split())
    np_, nr = sum(p.values()), sum(r.values())
    if np_ == 0 and nr == 0:
        return 1.0, 1.0, 1.0
    if np_ == 0 or nr == 0:
        return 0.0, 0.0, 0.0
    overlap = sum((p & r).values())
    if overlap == 0:
        return 0.0, 0.0, 0.0
    prec, rec = overlap / np_, overlap / nr
    return prec, rec, 2 * prec * rec / (prec + rec)


def rouge1_f(prediction: str, target: str) -> float:
    return rouge1_prf(prediction, target)[2]


METRIC_FNS = {
    "exact_match": exact_match,
    "token_accuracy": token_accuracy,
    "rouge1_f": rouge1_f,
}


@dataclass
class MetricResult:
    metric: str
    scores: list[float]
    mean: float = field(init=False)
    count: int = field(init=False)

    def __post_init__(self):
        self.count = len(self.scores)
        self.mean = sum(self.scores) / self.count if self.count else 0.0


def score_predictions(metric: str, predictions: Sequence[str], targets: Sequence[str]) -> MetricResult:
    if len(predictions) != len(targets):
        raise ValueError("predictions and targets differ in length")
    fn = METRIC_FNS[metric]
    return MetricResult(metric, [float(fn(p, t)) for p, t in zip(predictions, targets)])


def relative_gain(score: float, upper_bound: float) -> float:
    if not upper_bound > 0:
        raise UndefinedUpperBoundError(f"relative gain undefined for upper bound {upper_bound}")
    return score / upper_bound


@dataclass
class RgMatrix:
    tasks: list[str]
    stages: list[str]
    # rg[s][t] for t < s + 1 (lower-triangular, in task order); None where UB is not positive
    rg: list[list[float | None]]

    def final(self) -> dict[str, float]:
        last = self.rg[-1]
        return {t: last[i] for i, t in enumerate(self.tasks[: len(last)])}


def progressive_rg(
    scores: Sequence[Sequence[float]],
    tasks: Sequence[str],
    ub: Mapping[str, float],
    strict: bool = True,
) -> RgMatrix:
    """Elementwise score / UB over a lower-triangular stage x task score matrix.

    With ``strict=False`` a non-positive UB leaves its cells undefined (None)
    instead of raising.
    """
    missing = [t for t in tasks[: len(scores)] if t not in ub]
    if missing:
        raise UndefinedUpperBoundError(f"missing upper bound for task(s): {', '.join(missing)}")
    rg = []
    for s, row in enumerate(scores):
        if len(row) != s + 1:
            raise ValueError(f"stage {s + 1} has {len(row)} scores, expected {s + 1}")
        cells = []
        for i, v in enumerate(row):
            if not strict and not ub[tasks[i]] > 0:
                cells.append(None)
            else:
                cells.append(relative_gain(v, ub[tasks[i]]))
        rg.append(cells)
    return RgMatrix(list(tasks), list(tasks[: len(scores)]), rg)


def matrix_csv(matrix: Sequence[Sequence[float | None]], tasks: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["stage", *tasks])
    for s, row in enumerate(matrix):
        cells = ["" if v is None else f"{v:.6f}" for v in row] + [""] * (len(tasks) - len(row))
        w.writerow([tasks[s], *cells])
    return buf.getvalue()


def emit_report(
    out_dir: str | Path,
    *,
    tasks: Sequence[str],
    scores: Sequence[Sequence[float]],
    ub: Mapping[str, float],
    manifest: Mapping | None = None,
) -> dict[str, Path]:
    """Write ``scores.csv``, ``rg.csv`` and ``report.json``; output depends only on the inputs."""
    n = len(scores)
    if n < 1:
        raise ValueError("report needs at least one completed stage")
    tasks = list(tasks[:n])
    rgm = progressive_rg(scores, tasks, ub, strict=False)
    final_defined = [v for v in rgm.rg[-1] if v is not None]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"scores": out / "scores.csv", "rg": out / "rg.csv", "report": out / "report.json"}
    paths["scores"].write_text(matrix_csv(scores, tasks), encoding="utf-8")
    paths["rg"].write_text(matrix_csv(rgm.rg, tasks), encoding="utf-8")
    bundle = {
        "report_version": REPORT_VERSION,
        "tasks": tasks,
        "scores": [list(r) for r in scores],
        "upper_bounds": {t: ub[t] for t in tasks},
        "rg": rgm.rg,
        "final_rg": rgm.final(),
        "final_mean_rg": sum(final_defined) / len(final_defined) if final_defined else None,
        "undefined_rg_tasks": [t for t in tasks if not ub[t] > 0],
    }
    if manifest is not None:
        bundle["strategy"] = manifest.get("strategy")
        bundle["config"] = manifest.get("config")
        bundle["artifacts"] = manifest.get("artifacts")
    paths["report"].write_text(json.dumps(bundle, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
