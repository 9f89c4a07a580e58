"""Power-iteration PCA and seeded k-means for small point sets."""

from __future__ import annotations

import numpy as np


def _top_eigs(A: np.ndarray, k: int, rng: np.random.Generator, iters: int, tol: float):
    """Leading ``k`` eigenpairs of a symmetric PSD matrix by deflated power iteration."""
    n = A.shape[0]
    vals, vecs = [], []
    B = A.copy()
    for _ in range(k):
        v = rng.normal(size=n)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(iters):
            w = B @ v
            nw = np.linalg.norm(w)
            if nw == 0.0:
                lam = 0.0
                break
            w /= nw
            # re-orthogonalise against found vectors to stop drift
            for u in vecs:
                w -= (u @ w) * u
            w /= max(np.linalg.norm(w), 1e-300)
            new_lam = float(w @ B @ w)
            done = abs(new_lam - lam) <= tol * max(abs(new_lam), 1e-300) and np.linalg.norm(w - v) < 1e-10
            v, lam = w, new_lam
            if done:
                break
        vals.append(max(lam, 0.0))
        vecs.append(v)
        B = B - lam * np.outer(v, v)
    return np.array(vals), np.array(vecs)


def pca(X: np.ndarray, n_components: int = 2, seed=0, iters: int = 2000, tol: float = 1e-14):
    """Principal axes of the rows of ``X``.

    Returns ``(mean, components [k, d], variances [k], projected [n, k])``.
    Components with zero variance come back as zero rows.  When there are
    fewer points than dimensions the eigenproblem is solved on the Gram
    matrix and mapped back.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    mean = X.mean(axis=0)
    Xc = X - mean
    rng = np.random.default_rng(seed)
    k = min(n_components, n, d)
    if d > n:
        vals, U = _top_eigs(Xc @ Xc.T, k, rng, iters, tol)
        comps = np.zeros((n_components, d))
        for i in range(k):
            if vals[i] > 1e-12 * max(vals[0], 1e-300) and vals[i] > 0:
                c = Xc.T @ U[i]
                comps[i] = c / np.linalg.norm(c)
    else:
        vals, V = _top_eigs(Xc.T @ Xc, k, rng, iters, tol)
        comps = np.zeros((n_components, d))
        for i in range(k):
            if vals[i] > 1e-12 * max(vals[0], 1e-300) and vals[i] > 0:
                comps[i] = V[i]
    variances = np.zeros(n_components)
    variances[:k] = vals / max(n - 1, 1)
    variances[np.linalg.norm(comps, axis=1) == 0] = 0.0
    return mean, comps, variances, Xc @ comps.T


def kmeans(X: np.ndarray, k: int, seed=0, n_init: int = 10, iters: int = 100):
    """Lloyd's algorithm with k-means++ seeding; best of ``n_init`` restarts.

    Returns ``(labels, centroids, inertia)``.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError("k must lie in [1, n]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        cents = [X[rng.integers(n)]]
        for _ in range(1, k):
            d2 = np.min(((X[:, None, :] - np.array(cents)[None]) ** 2).sum(-1), axis=1)
            tot = d2.sum()
            if tot == 0:
                cents.append(X[rng.integers(n)])
            else:
                cents.append(X[rng.choice(n, p=d2 / tot)])
        C = np.array(cents)
        labels = np.zeros(n, dtype=np.int64)
        for _ in range(iters):
            d2 = ((X[:, None, :] - C[None]) ** 2).sum(-1)
            new = d2.argmin(axis=1)
            for j in range(k):
                if np.any(new == j):
                    C[j] = X[new == j].mean(axis=0)
            if np.array_equal(new, labels):
                labels = new
                break
            labels = new
        inertia = float(((X - C[labels]) ** 2).sum())
        if best is None or inertia < best[2] - 1e-12:
            best = (labels.copy(), C.copy(), inertia)
    return best
