"""Measurements: KNN-monitor accuracy, attack success rate, target-class gap,
detection statistics and a 2-D embedding projection export."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import EncoderState, embed_many, normalize_rows
from .data import Dataset, GlobalTrigger, embed_trigger
from .defense import MaliciousScoreTable
from .errors import DataError
from .linalg import pca


@dataclass
class EvalPlan:
    """Labeled probe data for the KNN monitor (never seen by training)."""

    train: Dataset
    test: Dataset
    target_class: int
    trigger: GlobalTrigger | None = None
    knn_k: int = 5
    knn_temperature: float = 0.1
    gap_per_class: int = 50

    def __post_init__(self):
        if self.train.labels is None or self.test.labels is None:
            raise DataError("probe splits need labels")
        if len(self.train) == 0 or len(self.test) == 0:
            raise DataError("probe splits must be non-empty")
        if self.knn_k < 1:
            raise DataError("knn_k must be >= 1")

    @property
    def num_classes(self) -> int:
        return int(max(self.train.labels.max(), self.test.labels.max())) + 1


def knn_predict(bank: np.ndarray, bank_labels: np.ndarray, queries: np.ndarray, k: int = 5,
                temperature: float = 0.1, num_classes: int | None = None) -> np.ndarray:
    """Soft-vote cosine kNN: each of the ``k`` nearest bank items votes ``exp(sim / T)``."""
    if len(bank) == 0 or len(queries) == 0:
        raise DataError("empty kNN bank or query set")
    C = int(bank_labels.max()) + 1 if num_classes is None else num_classes
    k = min(k, len(bank))
    sim = normalize_rows(np.asarray(queries, dtype=np.float64)) @ normalize_rows(np.asarray(bank, dtype=np.float64)).T
    idx = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    w = np.exp(np.take_along_axis(sim, idx, axis=1) / temperature)
    votes = np.zeros((len(queries), C))
    rows = np.arange(len(queries))
    for j in range(k):
        np.add.at(votes, (rows, bank_labels[idx[:, j]]), w[:, j])
    return votes.argmax(axis=1)


def _bank(encoder: EncoderState, plan: EvalPlan) -> np.ndarray:
    return embed_many(encoder, plan.train.images)


def knn_acc(encoder: EncoderState, plan: EvalPlan, bank: np.ndarray | None = None) -> float:
    bank = _bank(encoder, plan) if bank is None else bank
    pred = knn_predict(bank, plan.train.labels, embed_many(encoder, plan.test.images), plan.knn_k,
                       plan.knn_temperature, plan.num_classes)
    return float(100.0 * np.mean(pred == plan.test.labels))


def asr(encoder: EncoderState, plan: EvalPlan, bank: np.ndarray | None = None) -> float:
    """Percent of triggered non-target test images classified as the target class."""
    if plan.trigger is None:
        raise DataError("ASR needs a trigger")
    keep = plan.test.labels != plan.target_class
    if not np.any(keep):
        raise DataError("no non-target test images")
    bank = _bank(encoder, plan) if bank is None else bank
    triggered = embed_trigger(plan.test.images[keep], plan.trigger)
    pred = knn_predict(bank, plan.train.labels, embed_many(encoder, triggered), plan.knn_k,
                       plan.knn_temperature, plan.num_classes)
    return float(100.0 * np.mean(pred == plan.target_class))


def acc_and_asr(encoder: EncoderState, plan: EvalPlan) -> tuple[float, float | None]:
    bank = _bank(encoder, plan)
    a = knn_acc(encoder, plan, bank)
    b = asr(encoder, plan, bank) if plan.trigger is not None else None
    return a, b


# ---------------------------------------------------------------------------
# target-class gap


def gap_samples(plan: EvalPlan, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Up to ``gap_per_class`` probe images per class: ``(others, targets)``."""
    pool = Dataset(np.concatenate([plan.train.images, plan.test.images]),
                   np.concatenate([plan.train.labels, plan.test.labels]))
    rng = np.random.default_rng(seed)
    others, targets = [], []
    for c in np.unique(pool.labels):
        idx = np.flatnonzero(pool.labels == c)
        idx = np.sort(rng.choice(idx, size=min(plan.gap_per_class, len(idx)), replace=False))
        (targets if c == plan.target_class else others).append(pool.images[idx])
    if not targets or not others:
        raise DataError("gap measurement needs target and non-target images")
    return np.concatenate(others), np.concatenate(targets)


def gap_sum(encoder: EncoderState, others: np.ndarray, targets: np.ndarray) -> float:
    """Sum of cosine similarities over every (non-target image, target image) pair."""
    a = normalize_rows(embed_many(encoder, others))
    b = normalize_rows(embed_many(encoder, targets))
    return float(np.sum(a @ b.T))


def relative_error(g_clean: float, g_backdoored: float) -> float:
    """Percent change of the gap; dividing by ``|g_clean|`` keeps "more similar" positive
    when the clean sum of cosines is negative."""
    if g_clean == 0:
        raise ZeroDivisionError("clean gap is zero")
    return (g_backdoored - g_clean) / abs(g_clean) * 100.0


def gap_relative_error(clean: EncoderState, backdoored: EncoderState, plan: EvalPlan, seed=0) -> float:
    others, targets = gap_samples(plan, seed)
    return relative_error(gap_sum(clean, others, targets), gap_sum(backdoored, others, targets))


# ---------------------------------------------------------------------------
# detection statistics


@dataclass(frozen=True)
class DetectionStats:
    fpr: float | None
    tpr: float | None
    b_ms: float | None
    m_ms: float | None


def detection_stats(table: MaliciousScoreTable, truth: set[int]) -> DetectionStats:
    """FPR/TPR and mean final scores of benign / malicious participants.

    A group with no members yields ``None`` for its fields.
    """
    flagged = table.flagged()
    benign = [c for c in table.scores if c not in truth]
    malicious = [c for c in table.scores if c in truth]
    fpr = sum(c in flagged for c in benign) / len(benign) if benign else None
    tpr = sum(c in flagged for c in malicious) / len(malicious) if malicious else None
    b_ms = float(np.mean([table.scores[c] for c in benign])) if benign else None
    m_ms = float(np.mean([table.scores[c] for c in malicious])) if malicious else None
    return DetectionStats(fpr, tpr, b_ms, m_ms)


def flag_stats(participants: Sequence[int], flagged: set[int], truth: set[int]) -> DetectionStats:
    """FPR/TPR for rules that flag clients but keep no score table."""
    benign = [c for c in participants if c not in truth]
    malicious = [c for c in participants if c in truth]
    fpr = sum(c in flagged for c in benign) / len(benign) if benign else None
    tpr = sum(c in flagged for c in malicious) / len(malicious) if malicious else None
    return DetectionStats(fpr, tpr, None, None)


# ---------------------------------------------------------------------------
# projection export


@dataclass
class Projection:
    points: np.ndarray
    tags: list[str]
    client_ids: list[int]
    rank_deficient: bool = False
    variances: np.ndarray = field(default_factory=lambda: np.zeros(2))


def project_embeddings(embs: np.ndarray, tags: Sequence[str], client_ids: Sequence[int], seed=0) -> Projection:
    """Mean-centre and project onto the top two principal axes."""
    E = np.asarray(embs, dtype=np.float64)
    _, comps, var, pts = pca(E, 2, seed=seed)
    deficient = bool(np.any(np.linalg.norm(comps, axis=1) == 0))
    if deficient:
        warnings.warn("embedding cloud has rank < 2; padding missing axes with zeros", stacklevel=2)
    return Projection(pts, list(tags), list(client_ids), deficient, var)


def export_embedding_projection(encoders: Sequence[tuple[int, str, EncoderState]], global_encoder: EncoderState,
                                image: np.ndarray, path=None, seed=0) -> Projection:
    """Embed one input with every encoder plus the global model and write ``x y tag client_id`` lines."""
    if len(encoders) < 3:
        raise DataError("projection export needs at least three encoders")
    x = np.asarray(image)[None]
    embs = [embed_many(st, x)[0] for _, _, st in encoders] + [embed_many(global_encoder, x)[0]]
    tags = [t for _, t, _ in encoders] + ["global"]
    ids = [c for c, _, _ in encoders] + [-1]
    proj = project_embeddings(np.stack(embs), tags, ids, seed)
    if path is not None:
        write_projection(path, proj)
    return proj


def write_projection(path, proj: Projection) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        fh.write("# x y tag client_id\n")
        for (x, y), t, c in zip(proj.points, proj.tags, proj.client_ids):
            fh.write(f"{x:.10g} {y:.10g} {t} {c}\n")


# ---------------------------------------------------------------------------
# metrics CSV

CSV_FIELDS = ("round", "acc", "asr", "fpr", "tpr", "b_ms", "m_ms", "flagged_ids")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def report_row(report) -> list[str]:
    s = report.detection
    return [
        str(report.round),
        _fmt(report.acc),
        _fmt(report.asr),
        _fmt(s.fpr if s else None),
        _fmt(s.tpr if s else None),
        _fmt(s.b_ms if s else None),
        _fmt(s.m_ms if s else None),
        ";".join(str(c) for c in sorted(report.flagged)),
    ]


class MetricsWriter:
    """Append-only CSV; each row is formatted in memory and written with one call."""

    def __init__(self, path):
        self.path = Path(path)
        self.fh = open(self.path, "w", encoding="utf-8", newline="")
        self._write(CSV_FIELDS)

    def _write(self, fields) -> None:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow(fields)
        self.fh.write(buf.getvalue())
        self.fh.flush()

    def write(self, report) -> None:
        self._write(report_row(report))

    def close(self) -> None:
        self.fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
