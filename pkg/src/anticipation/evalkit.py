"""Mean top-k recall and late fusion of prediction scores.

Per-class recall is averaged over the classes that occur in the evaluation
labels; classes without instances are left out rather than counted as zero.
Ties between equal scores rank the lower class index first.
"""

from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .serialization import read_tns, write_tns

TASKS = ("verb", "noun", "action")


@dataclass
class ScoreSet:
    model_id: str
    modality: str
    sample_ids: list[str]
    scores: dict[str, np.ndarray]          # task -> [n_samples, n_classes]
    constituents: list[str] = field(default_factory=list)

    def __post_init__(self):
        for task, s in self.scores.items():
            if s.ndim != 2 or s.shape[0] != len(self.sample_ids):
                raise DataError(f"{self.model_id}: {task} scores {s.shape} do not match {len(self.sample_ids)} samples")

    def check_normalized(self, tol: float = 1e-5) -> None:
        for task, s in self.scores.items():
            worst = float(np.max(np.abs(s.sum(axis=1) - 1.0))) if len(s) else 0.0
            if worst > tol:
                raise DataError(f"{self.model_id}: {task} scores deviate from sum 1 by {worst:.2e}")


@dataclass
class FusionSpec:
    weights: list[tuple[str, float]]

    def weight_of(self, model_id: str) -> float:
        return dict(self.weights).get(model_id, 1.0)

    @classmethod
    def uniform(cls, sets: list[ScoreSet]) -> "FusionSpec":
        return cls([(s.model_id, 1.0) for s in sets])

    @classmethod
    def modality_weighted(cls, sets: list[ScoreSet], modality: str = "rgb", factor: float = 1.2) -> "FusionSpec":
        return cls([(s.model_id, factor if s.modality == modality else 1.0) for s in sets])


def topk_membership(scores: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean per sample: does the true label rank within the top ``k``?"""
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    labels = np.asarray(labels)
    if len(labels) and (labels.min() < 0 or labels.max() >= scores.shape[1]):
        raise DataError(f"labels outside [0, {scores.shape[1]})")
    true = scores[np.arange(len(labels)), labels][:, None]
    cols = np.arange(scores.shape[1])[None, :]
    # classes ranked strictly ahead: higher score, or equal score with lower index
    ahead = (scores > true) | ((scores == true) & (cols < labels[:, None]))
    return ahead.sum(axis=1) < k


def topk_recall_per_class(scores: np.ndarray, labels, k: int = 5) -> dict[int, float]:
    """Recall@k for every class that has at least one instance."""
    labels = np.asarray(labels)
    hits = topk_membership(np.asarray(scores), labels, k)
    return {int(c): float(hits[labels == c].mean()) for c in np.unique(labels)}


def mt5r(scores: np.ndarray, labels, k: int = 5) -> float:
    """Mean over present classes of per-class top-k recall."""
    labels = np.asarray(labels)
    if labels.size == 0:
        raise ContractError("mean top-k recall of an empty label set")
    per_class = topk_recall_per_class(scores, labels, k)
    return float(np.mean(list(per_class.values())))


def mt5r_by_task(score_set: ScoreSet, labels: dict[str, np.ndarray], k: int = 5) -> dict[str, float]:
    return {task: mt5r(score_set.scores[task], labels[task], k) for task in TASKS if task in score_set.scores}


def fuse(score_sets: list[ScoreSet], spec: FusionSpec | None = None, fused_id: str | None = None) -> ScoreSet:
    """Weighted mean of aligned score sets, renormalised to sum 1 per sample."""
    if not score_sets:
        raise ContractError("fusion needs at least one score set")
    spec = spec or FusionSpec.uniform(score_sets)
    ref = score_sets[0].sample_ids
    for s in score_sets[1:]:
        if s.sample_ids != ref:
            if len(s.sample_ids) != len(ref):
                raise DataError(f"{s.model_id}: {len(s.sample_ids)} samples, expected {len(ref)}")
            first = next(b for a, b in zip(ref, s.sample_ids) if a != b)
            raise DataError(f"{s.model_id}: sample ids misaligned, first mismatch {first!r}")
    weights = [spec.weight_of(s.model_id) for s in score_sets]
    if any(w <= 0 for w in weights):
        raise ConfigError("fusion weights must be positive")
    fused = {}
    for task in TASKS:
        if not all(task in s.scores for s in score_sets):
            continue
        acc = sum(w * s.scores[task].astype(np.float64) for w, s in zip(weights, score_sets))
        fused[task] = acc / acc.sum(axis=1, keepdims=True)
    modalities = sorted({s.modality for s in score_sets})
    return ScoreSet(fused_id or "+".join(s.model_id for s in score_sets),
                    modalities[0] if len(modalities) == 1 else "mixed", list(ref), fused,
                    [s.model_id for s in score_sets])


@dataclass
class ReportRow:
    name: str
    members: list[str]
    mt5r: dict[str, float]


def ensemble_report(score_sets: list[ScoreSet], specs: dict[str, tuple[list[str], FusionSpec | None]],
                    labels: dict[str, np.ndarray], k: int = 5) -> list[ReportRow]:
    """One row per named fusion: ``specs[name] = (member model ids, weights)``."""
    by_id = {s.model_id: s for s in score_sets}
    rows = []
    for name, (members, spec) in specs.items():
        missing = [m for m in members if m not in by_id]
        if missing:
            raise DataError(f"report row {name!r} references unknown models {missing}")
        fused = fuse([by_id[m] for m in members], spec, fused_id=name)
        rows.append(ReportRow(name, list(members), mt5r_by_task(fused, labels, k)))
    return rows


def format_report(rows: list[ReportRow]) -> str:
    width = max([len("fusion")] + [len(r.name) for r in rows])
    lines = [f"{'fusion':<{width}}  {'verb':>7}  {'noun':>7}  {'action':>7}"]
    for r in rows:
        cells = "  ".join(f"{100 * r.mt5r.get(t, float('nan')):7.2f}" for t in TASKS)
        lines.append(f"{r.name:<{width}}  {cells}")
    return "\n".join(lines)


def report_csv(rows: list[ReportRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["fusion", "members", "mt5r_verb", "mt5r_noun", "mt5r_action"])
    for r in rows:
        writer.writerow([r.name, ";".join(r.members)] + [repr(r.mt5r.get(t, float("nan"))) for t in TASKS])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# ScoreSet files: uint32 header length, JSON header, one TNS1 block per task
# ---------------------------------------------------------------------------

def save_scoreset(score_set: ScoreSet, path) -> None:
    tasks = [t for t in TASKS if t in score_set.scores]
    header = {
        "model_id": score_set.model_id,
        "modality": score_set.modality,
        "tasks": {t: int(score_set.scores[t].shape[1]) for t in tasks},
        "task_order": tasks,
        "sample_ids": score_set.sample_ids,
        "constituents": score_set.constituents,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for t in tasks:
            write_tns(fh, score_set.scores[t])


def load_scoreset(path) -> ScoreSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"score file {path} not found")
    with open(path, "rb") as fh:
        (length,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(length).decode("utf-8"))
        scores = {t: read_tns(fh) for t in header["task_order"]}
    for t, n in header["tasks"].items():
        if scores[t].shape[1] != n:
            raise DataError(f"{path}: {t} block has {scores[t].shape[1]} classes, header says {n}")
    return ScoreSet(header["model_id"], header["modality"], header["sample_ids"], scores,
                    header.get("constituents", []))
