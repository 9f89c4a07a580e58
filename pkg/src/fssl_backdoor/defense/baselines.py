"""Baseline robust aggregation rules.

Krum, trimmed mean and FLTrust follow their published definitions exactly.
FoolsGold, FLAME, RFLBAT and FLARE are compact renditions of the published
schemes; the simplifications are noted on each function.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from sklearn.cluster import HDBSCAN

from ..aggregation import deltas, fedavg, stack
from ..core import BN_STAT, ParameterVector
from ..errors import DefenseError
from ..linalg import kmeans, pca


@dataclass
class RuleResult:
    params: ParameterVector
    flagged: set[int] = field(default_factory=set)
    info: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Krum


def krum_scores(X: np.ndarray, C: int) -> np.ndarray:
    n = len(X)
    m = n - C - 2
    D = ((X[:, None, :] - X[None, :, :]) ** 2).sum(axis=-1)
    scores = np.empty(n)
    for i in range(n):
        others = np.sort(np.delete(D[i], i))
        scores[i] = others[:m].sum()
    return scores


def krum(updates: Sequence, C: int) -> RuleResult:
    """Pick the upload with the smallest summed squared distance to its ``n - C - 2`` nearest peers."""
    n = len(updates)
    if C < 0 or n < C + 3:
        raise DefenseError(f"Krum with C={C} needs at least {C + 3} updates, got {n}")
    ups = sorted(updates, key=lambda u: u.client_id)
    scores = krum_scores(stack(ups), C)
    best = int(np.argmin(scores))  # first minimum = lowest client id
    chosen = ups[best].client_id
    return RuleResult(ups[best].params.copy(), {u.client_id for u in ups if u.client_id != chosen},
                      {"scores": dict(zip([u.client_id for u in ups], scores.tolist())), "selected": chosen})


# ---------------------------------------------------------------------------
# trimmed mean


def trimmed_mean(updates: Sequence, k: int) -> RuleResult:
    n = len(updates)
    if k < 0 or 2 * k >= n:
        raise DefenseError(f"trimmed mean with k={k} needs more than {2 * k} updates, got {n}")
    X = np.sort(stack(updates), axis=0)
    return RuleResult(updates[0].params.with_values(X[k : n - k].mean(axis=0)))


# ---------------------------------------------------------------------------
# FLTrust


def fltrust(updates: Sequence, server_update: ParameterVector, global_params: ParameterVector) -> RuleResult:
    """Trust = ReLU(cos(delta_i, delta_server)); deltas rescaled to the server norm."""
    D = deltas(updates, global_params)
    g0 = server_update.values - global_params.values
    n0 = np.linalg.norm(g0)
    norms = np.linalg.norm(D, axis=1)
    trust = np.zeros(len(updates))
    for i in range(len(updates)):
        if norms[i] > 0 and n0 > 0:
            trust[i] = max(0.0, float(D[i] @ g0) / (norms[i] * n0))
    ids = [u.client_id for u in updates]
    info = {"trust": dict(zip(ids, trust.tolist()))}
    if trust.sum() == 0:
        info["fallback"] = True
        return RuleResult(global_params.copy(), set(ids), info)
    scaled = D * (n0 / np.where(norms > 0, norms, 1.0))[:, None]
    agg = (trust @ scaled) / trust.sum()
    flagged = {c for c, t in zip(ids, trust) if t == 0}
    return RuleResult(global_params.with_values(global_params.values + agg), flagged, info)


# ---------------------------------------------------------------------------
# FoolsGold


def foolsgold_weights(history: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """FoolsGold re-weighting of clients from their cumulative update vectors."""
    n = len(history)
    if n == 1:
        return np.ones(1)
    U = history / np.maximum(np.linalg.norm(history, axis=1, keepdims=True), 1e-300)
    cs = U @ U.T - np.eye(n)
    maxcs = cs.max(axis=1)
    for i in range(n):
        for j in range(n):
            if i != j and maxcs[i] < maxcs[j]:
                cs[i, j] = cs[i, j] * maxcs[i] / maxcs[j]
    wv = 1.0 - cs.max(axis=1)
    wv = np.clip(wv, 0.0, 1.0)
    if wv.max() == 0:
        return wv
    wv = wv / wv.max()
    wv[wv == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        wv = np.log(wv / (1.0 - wv) + eps) + 0.5
    wv[np.isinf(wv) | (wv > 1)] = 1.0
    wv[wv < 0] = 0.0
    return wv


def foolsgold(updates: Sequence, history: dict, global_params: ParameterVector) -> RuleResult:
    """Weighted update average; ``history`` maps client id to its cumulative delta and is updated in place."""
    D = deltas(updates, global_params)
    ids = [u.client_id for u in updates]
    for c, d in zip(ids, D):
        history[c] = history.get(c, 0.0) + d
    H = np.stack([history[c] for c in ids])
    w = foolsgold_weights(H)
    info = {"weights": dict(zip(ids, w.tolist()))}
    if w.sum() == 0:
        info["fallback"] = True
        return RuleResult(global_params.copy(), set(ids), info)
    agg = (w @ D) / w.sum()
    return RuleResult(global_params.with_values(global_params.values + agg),
                      {c for c, x in zip(ids, w) if x == 0}, info)


# ---------------------------------------------------------------------------
# FLAME


def _cosine_distances(D: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(D, axis=1, keepdims=True)
    U = np.divide(D, n, out=np.zeros_like(D), where=n > 0)
    return np.clip(1.0 - U @ U.T, 0.0, 2.0)


def flame(updates: Sequence, global_params: ParameterVector, rng: np.random.Generator,
          noise_lambda: float = 0.001) -> RuleResult:
    """Cluster, clip to the median norm, average, add Gaussian noise.

    Clustering runs HDBSCAN on cosine distances between update deltas with
    ``min_cluster_size = n // 2 + 1``; the largest cluster survives.  Noise of
    standard deviation ``noise_lambda * clip_bound`` is added to trainable
    coordinates only (batch-norm running statistics are left noise-free).
    """
    n = len(updates)
    if n < 3:
        raise DefenseError("FLAME needs at least 3 updates")
    ids = [u.client_id for u in updates]
    D = deltas(updates, global_params)
    dist = _cosine_distances(D)
    if np.allclose(dist, 0.0, atol=1e-12):
        keep = np.ones(n, dtype=bool)
    else:
        labels = HDBSCAN(min_cluster_size=n // 2 + 1, min_samples=1, metric="precomputed",
                         allow_single_cluster=True).fit(dist).labels_
        valid = labels[labels >= 0]
        if len(valid) == 0:
            keep = np.ones(n, dtype=bool)
        else:
            counts = np.bincount(valid)
            keep = labels == int(np.argmax(counts))
    norms = np.linalg.norm(D, axis=1)
    bound = float(np.median(norms))
    factor = np.where(norms > bound, bound / np.where(norms > 0, norms, 1.0), 1.0)
    clipped = D * factor[:, None]
    agg = clipped[keep].mean(axis=0)
    out = global_params.values + agg
    sigma = noise_lambda * bound
    if sigma > 0:
        mask = ~global_params.layout.mask(BN_STAT)
        out = out.copy()
        out[mask] += rng.normal(0.0, sigma, size=int(mask.sum()))
    flagged = {c for c, k in zip(ids, keep) if not k}
    return RuleResult(global_params.with_values(out), flagged,
                      {"clip_bound": bound, "clipped_norms": np.linalg.norm(clipped, axis=1).tolist(),
                       "kept": [c for c, k in zip(ids, keep) if k]})


# ---------------------------------------------------------------------------
# RFLBAT


def rflbat(updates: Sequence, global_params: ParameterVector, seed=0) -> RuleResult:
    """PCA to two components, 2-means, keep the larger cluster.

    Equal-size clusters are resolved in favour of the cluster whose members
    are mutually less similar (larger mean pairwise cosine distance), since
    colluding uploads look alike.  The published gap-statistic choice of
    ``k`` and the outlier pre-filter are not reproduced.
    """
    n = len(updates)
    if n < 4:
        raise DefenseError("RFLBAT needs at least 4 updates")
    ids = [u.client_id for u in updates]
    D = deltas(updates, global_params)
    _, comps, var, proj = pca(D, 2, seed=seed)
    if var[0] <= 1e-20:
        return RuleResult(fedavg(list(updates)), set(), {"degenerate": True})
    labels, _, _ = kmeans(proj, 2, seed=seed)
    sizes = np.bincount(labels, minlength=2)
    if sizes[0] != sizes[1]:
        keep_label = int(np.argmax(sizes))
    else:
        dist = _cosine_distances(D)
        spread = []
        for lab in (0, 1):
            idx = np.flatnonzero(labels == lab)
            sub = dist[np.ix_(idx, idx)]
            spread.append(sub.sum() / max(len(idx) * (len(idx) - 1), 1))
        keep_label = int(np.argmax(spread))
    keep = labels == keep_label
    survivors = [u for u, k in zip(updates, keep) if k]
    return RuleResult(fedavg(survivors), {c for c, k in zip(ids, keep) if not k},
                      {"projection": proj.tolist(), "labels": labels.tolist()})


# ---------------------------------------------------------------------------
# FLARE


def mmd_matrix(reps: np.ndarray) -> np.ndarray:
    """Biased squared MMD between every pair of representation sets ``reps[model, item, dim]``.

    Gaussian kernel; bandwidth is the median pairwise distance of all pooled
    representations.
    """
    R = np.asarray(reps, dtype=np.float64)
    m, k, _ = R.shape
    flat = R.reshape(m * k, -1)
    sq = np.sum(flat * flat, axis=1)
    D2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T, 0.0)
    off = D2[np.triu_indices(len(flat), 1)]
    med = float(np.median(np.sqrt(off))) if off.size else 0.0
    if med <= 0:
        med = 1.0
    K = np.exp(-D2 / (2.0 * med * med))
    blocks = K.reshape(m, k, m, k).mean(axis=(1, 3))
    diag = np.diag(blocks)
    M = diag[:, None] + diag[None, :] - 2.0 * blocks
    M = np.maximum((M + M.T) / 2.0, 0.0)
    np.fill_diagonal(M, 0.0)
    return M


def flare_trust(mmd: np.ndarray, k: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Votes from each model's ``k`` MMD-nearest neighbours, squashed by softmax."""
    n = len(mmd)
    if k is None:
        k = max(1, n // 2)
    votes = np.zeros(n)
    for i in range(n):
        order = sorted((j for j in range(n) if j != i), key=lambda j: (mmd[i, j], j))
        for j in order[:k]:
            votes[j] += 1
    e = np.exp(votes - votes.max())
    return votes, e / e.sum()


def flare(updates: Sequence, inspection_items: np.ndarray, embed: Callable, global_params: ParameterVector,
          k: int | None = None) -> RuleResult:
    """Trust-weighted update average from MMD neighbourhoods of encoder outputs.

    The encoder output stands in for the penultimate representation.
    """
    ids = [u.client_id for u in updates]
    reps = np.stack([embed(u.params, inspection_items) for u in updates])
    M = mmd_matrix(reps)
    votes, trust = flare_trust(M, k)
    D = deltas(updates, global_params)
    out = global_params.values + trust @ D
    return RuleResult(global_params.with_values(out), set(),
                      {"trust": dict(zip(ids, trust.tolist())), "votes": dict(zip(ids, votes.tolist()))})
