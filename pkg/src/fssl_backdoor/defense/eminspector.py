"""Embedding-similarity voting against backdoored uploads.

For each inspection input, every uploaded encoder embeds it.  A model whose
embedding is, summed over all other models, at least as similar as the
decision boundary gets a vote against it (+1), otherwise a vote for it (-1).
Models that end with a positive score are dropped before averaging.

Backdoored encoders trained against a shared clean anchor produce embeddings
that sit close to everyone else's, while benign local training scatters
embeddings; high accumulated similarity is therefore the suspicious signal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..aggregation import fedavg
from ..core import normalize_rows
from ..errors import DefenseError


TIE_TOL = 1e-12


@dataclass
class MaliciousScoreTable:
    scores: dict[int, int]
    flag_log: list[tuple[int, frozenset]] = field(default_factory=list)
    # per-item count of exact ties at the boundary (used by property checks)
    tie_log: list[int] = field(default_factory=list)
    # False for the mean-only boundary, which carries no at-most-half guarantee
    half_cap: bool = True

    @property
    def n_items(self) -> int:
        return len(self.flag_log)

    def flagged(self) -> set[int]:
        return {c for c, s in self.scores.items() if s > 0}

    def check_invariants(self) -> None:
        n = self.n_items
        for c, s in self.scores.items():
            if abs(s) > n or (s - n) % 2:
                raise AssertionError(f"score {s} of client {c} violates parity/bound for {n} items")
        if not self.half_cap:
            return
        cap = math.ceil(len(self.scores) / 2)
        for (u, flagged), ties in zip(self.flag_log, self.tie_log):
            # exact ties at the boundary are the only way past half of the models
            if len(flagged) > cap + max(0, ties - 1):
                raise AssertionError(f"item {u}: {len(flagged)} of {len(self.scores)} models at or above the boundary")

    def recompute_scores(self) -> dict[int, int]:
        """Scores rebuilt from the per-item flag log."""
        out = {c: 0 for c in self.scores}
        for _, flagged in self.flag_log:
            for c in out:
                out[c] += 1 if c in flagged else -1
        return out

    def to_json(self) -> dict:
        return {
            "scores": {str(c): int(s) for c, s in sorted(self.scores.items())},
            "flag_log": [{"item": int(i), "flagged": sorted(int(c) for c in f)} for i, f in self.flag_log],
        }


def similarity_matrix(embs: np.ndarray) -> np.ndarray:
    """Cosine similarities between rows; zero-norm rows have similarity 0 to everything."""
    U = normalize_rows(np.asarray(embs, dtype=np.float64))
    S = U @ U.T
    return (S + S.T) / 2


def accumulated_similarities(embs: np.ndarray) -> np.ndarray:
    """``d_i = sum_{j != i} s(e_i, e_j)`` for every row ``i``."""
    S = similarity_matrix(embs)
    return S.sum(axis=1) - np.diag(S)


def accumulated_similarity(embs: Sequence, i: int) -> float:
    E = np.asarray(embs, dtype=np.float64)
    if len(E) < 2:
        raise DefenseError("need embeddings from at least two models")
    return float(accumulated_similarities(E)[i])


def median_sorted(values: Sequence[float]) -> float:
    L = sorted(values)
    n = len(L)
    if n % 2:
        return float(L[(n - 1) // 2])
    return float((L[n // 2 - 1] + L[n // 2]) / 2)


def decision_boundary(ds: Sequence[float], rule: str = "max") -> float:
    """``max(mean, median)`` of the accumulated similarities (``rule="mean"`` for the ablation)."""
    if len(ds) < 1:
        raise DefenseError("empty similarity list")
    mean = float(np.mean(ds))
    if rule == "mean":
        return mean
    if rule == "max":
        return max(mean, median_sorted(ds))
    raise DefenseError(f"unknown boundary rule {rule!r}")


def top_k_count(n: int, fraction: float) -> int:
    return max(1, int(math.floor(fraction * n + 0.5)))


def vote(embeddings: np.ndarray, client_ids: Sequence[int], *, rule: str = "max",
         top_fraction: float | None = None) -> MaliciousScoreTable:
    """Score clients from ``embeddings[model, item, dim]``.

    With ``top_fraction`` set, each item votes against the top fraction of
    models by accumulated similarity (ties go to the lower client id)
    instead of thresholding at the decision boundary.
    """
    E = np.asarray(embeddings, dtype=np.float64)
    n_models, n_items = E.shape[:2]
    ids = list(client_ids)
    if n_models != len(ids):
        raise DefenseError("one embedding stack per client is required")
    if n_models < 2:
        raise DefenseError("need at least two uploaded models")
    if n_items < 1:
        raise DefenseError("empty inspection set")
    scores = {c: 0 for c in ids}
    table = MaliciousScoreTable(scores, half_cap=top_fraction is not None or rule == "max")
    order = np.argsort(ids, kind="stable")
    for u in range(n_items):
        d = accumulated_similarities(E[:, u, :])
        if top_fraction is None:
            bound = decision_boundary(d, rule)
            # values within rounding of the boundary are ties and count as hits
            tol = TIE_TOL * max(1.0, float(np.max(np.abs(d))))
            hit = d >= bound - tol
            table.tie_log.append(int(np.sum(np.abs(d - bound) <= tol)))
        else:
            k = top_k_count(n_models, top_fraction)
            # sort by descending d, ascending client id among equals
            ranked = sorted(order, key=lambda j: (-d[j], ids[j]))
            hit = np.zeros(n_models, dtype=bool)
            hit[ranked[:k]] = True
            table.tie_log.append(0)
        flagged = frozenset(ids[j] for j in range(n_models) if hit[j])
        for j, c in enumerate(ids):
            scores[c] += 1 if hit[j] else -1
        table.flag_log.append((u, flagged))
    return table


@dataclass
class InspectionResult:
    params: object
    flagged: set[int]
    table: MaliciousScoreTable
    fallback: bool = False


def inspect(updates: Sequence, inspection_items: np.ndarray, embed: Callable, *, rule: str = "max",
            top_fraction: float | None = None, previous_global=None) -> InspectionResult:
    """Run the vote over ``updates`` and average the survivors.

    ``embed(params, items)`` must return ``[n_items, dim]`` embeddings.  If
    every client is flagged the previous global model is kept (when given).
    """
    if len(updates) < 2:
        raise DefenseError("EmInspector needs at least two uploads")
    ups = sorted(updates, key=lambda u: u.client_id)
    E = np.stack([embed(u.params, inspection_items) for u in ups])
    table = vote(E, [u.client_id for u in ups], rule=rule, top_fraction=top_fraction)
    flagged = table.flagged()
    survivors = [u for u in ups if u.client_id not in flagged]
    if survivors:
        return InspectionResult(fedavg(survivors), flagged, table)
    if previous_global is None:
        raise DefenseError("every upload was flagged and no previous global model is available")
    return InspectionResult(previous_global.copy(), flagged, table, fallback=True)


def eminspector(updates, inspection, embed: Callable, previous_global=None, rule: str = "max") -> InspectionResult:
    items = getattr(inspection, "items", inspection)
    return inspect(updates, items, embed, rule=rule, previous_global=previous_global)


def eminspector_knowledge_adjusted(updates, inspection, embed: Callable, est_malicious_frac: float,
                                   fluctuation: float, previous_global=None) -> InspectionResult:
    """Vote against the top ``est_malicious_frac + fluctuation`` of models per item."""
    frac = est_malicious_frac + fluctuation
    if not 0 < frac < 0.5 or est_malicious_frac < 0 or fluctuation < 0:
        raise DefenseError("need 0 < est_malicious_frac + fluctuation < 0.5")
    items = getattr(inspection, "items", inspection)
    return inspect(updates, items, embed, top_fraction=frac, previous_global=previous_global)
