"""Leave-one-patient-out retrieval evaluation with majority-n voting."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, QuerySetMismatch, SinglePatient
from .index import SignatureIndex, knn_query


@dataclass(frozen=True)
class EvalConfig:
    n_values: tuple[int, ...] = (1, 3, 5, 7)
    mode: str = "targeted"
    seed: int = 42
    ranking: str = "median_of_min"

    def __post_init__(self):
        if not self.n_values or any(int(n) < 1 for n in self.n_values):
            raise ConfigError(f"n_values must be non-empty and >= 1, got {self.n_values}")
        if self.mode not in ("targeted", "normal"):
            raise ConfigError(f"mode must be 'targeted' or 'normal', got {self.mode!r}")


def majority_vote(labels: Sequence[str], n: int) -> str:
    """Most common label among the first ``n``; ties go to the best-ranked."""
    top = list(labels[:n])
    if not top:
        raise ValueError("no labels to vote on")
    counts = Counter(top)
    best = max(counts.values())
    for label in top:
        if counts[label] == best:
            return label
    raise AssertionError("unreachable")


def prf(tp: int, fp: int, fn: int) -> dict:
    """Precision, recall and F1 as fractions; 0 wherever a denominator is 0."""
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"precision": precision, "recall": recall, "f1": f1}


@dataclass
class EvalReport:
    config: EvalConfig
    labels: list[str]
    accuracy: dict[int, float]
    per_label: dict[int, dict[str, dict]]
    queries: list[dict] = field(default_factory=list)

    @property
    def query_ids(self) -> list[str]:
        return [q["slide_id"] for q in self.queries]

    def to_dict(self) -> dict:
        return {
            "config": {
                "n_values": list(self.config.n_values),
                "mode": self.config.mode,
                "seed": self.config.seed,
                "ranking": self.config.ranking,
            },
            "labels": self.labels,
            "accuracy": {str(n): a for n, a in self.accuracy.items()},
            "per_label": {str(n): v for n, v in self.per_label.items()},
            "queries": self.queries,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        cfg = d["config"]
        return cls(
            EvalConfig(tuple(cfg["n_values"]), cfg["mode"], cfg["seed"], cfg.get("ranking", "median_of_min")),
            list(d["labels"]),
            {int(n): a for n, a in d["accuracy"].items()},
            {int(n): v for n, v in d["per_label"].items()},
            list(d["queries"]),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def table(self) -> str:
        lines = [f"mode: {self.config.mode}   queries: {len(self.queries)}", ""]
        lines.append("n    accuracy")
        for n in self.config.n_values:
            lines.append(f"{n:<4} {100 * self.accuracy[n]:8.2f}")
        lines.append("")
        lines.append(f"{'label':<10}{'n':>4}{'tp':>5}{'fp':>5}{'fn':>5}{'prec':>9}{'recall':>9}{'f1':>9}")
        for n in self.config.n_values:
            for label in self.labels:
                m = self.per_label[n][label]
                lines.append(
                    f"{label:<10}{n:>4}{m['tp']:>5}{m['fp']:>5}{m['fn']:>5}"
                    f"{100 * m['precision']:9.2f}{100 * m['recall']:9.2f}{100 * m['f1']:9.2f}"
                )
        return "\n".join(lines) + "\n"


def leave_one_patient_out(index: SignatureIndex, config: EvalConfig | None = None) -> EvalReport:
    """Query every slide against the index with its own patient removed."""
    config = config or EvalConfig()
    if len({e.patient_id for e in index.entries}) < 2:
        raise SinglePatient("leave-one-patient-out needs at least two patients")
    labels = sorted({e.label for e in index.entries})
    k = max(config.n_values)
    queries = []
    for q in sorted(index.entries, key=lambda e: e.slide_id):
        result = knn_query(index, q, k, exclude_patient=q.patient_id, ranking=config.ranking)
        queries.append(
            {
                "slide_id": q.slide_id,
                "patient_id": q.patient_id,
                "truth": q.label,
                "retrieved": [h.slide_id for h in result.hits],
                "labels": result.labels,
                "distances": [h.distance for h in result.hits],
                "predicted": {str(n): majority_vote(result.labels, n) for n in config.n_values},
            }
        )
    accuracy, per_label = {}, {}
    for n in config.n_values:
        preds = [(q["truth"], q["predicted"][str(n)]) for q in queries]
        accuracy[n] = sum(t == p for t, p in preds) / len(preds)
        per_label[n] = {}
        for label in labels:
            tp = sum(t == label and p == label for t, p in preds)
            fp = sum(t != label and p == label for t, p in preds)
            fn = sum(t == label and p != label for t, p in preds)
            per_label[n][label] = {"tp": tp, "fp": fp, "fn": fn, **prf(tp, fp, fn)}
    return EvalReport(config, labels, accuracy, per_label, queries)


@dataclass
class Comparison:
    n_values: tuple[int, ...]
    accuracy_delta: dict[int, float]
    metric_delta: dict[int, dict[str, dict[str, float]]]
    outcome: dict[int, str]

    def to_dict(self) -> dict:
        return {
            "n_values": list(self.n_values),
            "accuracy_delta": {str(n): d for n, d in self.accuracy_delta.items()},
            "metric_delta": {str(n): d for n, d in self.metric_delta.items()},
            "outcome": {str(n): o for n, o in self.outcome.items()},
        }

    def table(self) -> str:
        lines = ["n    delta_acc  outcome"]
        for n in self.n_values:
            lines.append(f"{n:<4} {100 * self.accuracy_delta[n]:+9.2f}  {self.outcome[n]}")
        return "\n".join(lines) + "\n"


def compare_runs(targeted: EvalReport, normal: EvalReport) -> Comparison:
    """Targeted-minus-normal deltas per n and per label metric."""
    if sorted(targeted.query_ids) != sorted(normal.query_ids):
        raise QuerySetMismatch("reports cover different query slides")
    n_values = tuple(n for n in targeted.config.n_values if n in normal.accuracy)
    acc, metrics, outcome = {}, {}, {}
    for n in n_values:
        d = targeted.accuracy[n] - normal.accuracy[n]
        acc[n] = d
        outcome[n] = "targeted-win" if d > 0 else "normal-win" if d < 0 else "tie"
        metrics[n] = {
            label: {
                key: targeted.per_label[n][label][key] - normal.per_label[n][label][key]
                for key in ("precision", "recall", "f1")
            }
            for label in targeted.labels
            if label in normal.per_label[n]
        }
    return Comparison(n_values, acc, metrics, outcome)
