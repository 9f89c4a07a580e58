"""Contrastive and backdoor objectives with analytic gradients.

Every loss returns the scalar value together with the gradient with respect
to the flat parameter vector, obtained by pushing embedding gradients
through :meth:`Tape.backward`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp, softmax

from ..data import embed_trigger
from ..errors import NonFiniteError, ShapeError, ZeroNormError
from .encoder import EncoderState, forward_train, stack_inputs, trainable_mask
from .params import ParameterVector

DEFAULT_TEMPERATURE = 0.5
CRITERIA = ("cosine", "mse", "cross_entropy")


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape or a.size == 0:
        raise ShapeError("cosine_similarity needs two non-empty vectors of equal length")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ZeroNormError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class LossResult:
    loss: float
    grads: ParameterVector
    running: dict = field(default_factory=dict)
    parts: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# row-wise similarity criteria: value per row and gradients for both arguments


def _normalize_with_grad(v: np.ndarray):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ZeroNormError("zero-norm embedding")
    u = v / n

    def back(du):
        return (du - u * np.sum(u * du, axis=-1, keepdims=True)) / n

    return u, back


def pair_similarity(a: np.ndarray, b: np.ndarray, criterion: str = "cosine"):
    """Row-wise similarity ``s(a_k, b_k)`` and a function giving ``(da, db)``.

    ``mse`` and ``cross_entropy`` are expressed as similarities (negated
    distances) so that every attack term keeps the form ``-s(., .)``.
    """
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if criterion == "cosine":
        ua, ba = _normalize_with_grad(a)
        ub, bb = _normalize_with_grad(b)
        s = np.sum(ua * ub, axis=-1)

        def grad(ds):
            ds = ds[:, None]
            return ba(ds * ub), bb(ds * ua)

        return s, grad
    if criterion == "mse":
        diff = a - b
        d = a.shape[-1]
        s = -np.mean(diff * diff, axis=-1)

        def grad(ds):
            g = -2.0 * diff / d * ds[:, None]
            return g, -g

        return s, grad
    if criterion == "cross_entropy":
        # s = -CE(softmax(b) || softmax(a)) = sum_k p_k log q_k with p = softmax(b), q = softmax(a)
        logq = a - logsumexp(a, axis=-1, keepdims=True)
        p = softmax(b, axis=-1)
        s = np.sum(p * logq, axis=-1)

        def grad(ds):
            ds = ds[:, None]
            q = np.exp(logq)
            da = ds * (p - q)
            db = ds * p * (logq - np.sum(p * logq, axis=-1, keepdims=True))
            return da, db

        return s, grad
    raise ValueError(f"unknown similarity criterion {criterion!r}")


# ---------------------------------------------------------------------------
# NT-Xent


def ntxent(emb_a: np.ndarray, emb_b: np.ndarray, temperature: float = DEFAULT_TEMPERATURE):
    """NT-Xent over the ``2B`` concatenated views.

    Returns ``(loss, d_emb_a, d_emb_b)``.  Embeddings are L2-normalised inside.
    """
    emb_a = np.asarray(emb_a)
    emb_b = np.asarray(emb_b)
    if emb_a.shape != emb_b.shape or emb_a.ndim != 2:
        raise ShapeError("ntxent needs two [B, d] arrays of equal shape")
    B = emb_a.shape[0]
    if B < 2:
        raise ShapeError("ntxent needs at least two pairs (no negatives otherwise)")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z_raw = np.concatenate([emb_a, emb_b], axis=0)
    z, back = _normalize_with_grad(z_raw)
    n = 2 * B
    logits = z @ z.T / temperature
    np.fill_diagonal(logits, -np.inf)
    pos = np.concatenate([np.arange(B, n), np.arange(0, B)])
    lse = logsumexp(logits, axis=1)
    loss = float(np.mean(lse - logits[np.arange(n), pos]))
    G = np.exp(logits - lse[:, None])
    G[np.arange(n), pos] -= 1.0
    G /= n
    dz = (G + G.T) @ z / temperature
    dz_raw = back(dz)
    return loss, dz_raw[:B], dz_raw[B:]


def ntxent_loss(state: EncoderState, view_a: np.ndarray, view_b: np.ndarray,
                temperature: float = DEFAULT_TEMPERATURE) -> LossResult:
    """Contrastive loss of two augmented views, differentiated to the parameters."""
    batch, (sa, sb) = stack_inputs([view_a, view_b])
    emb, tape = forward_train(state, batch)
    loss, ga, gb = ntxent(emb[sa], emb[sb], temperature)
    d = np.empty_like(emb)
    d[sa], d[sb] = ga, gb
    grad = tape.backward(d)
    grad[~trainable_mask(state.params.layout, state.bn_frozen)] = 0.0
    _check(loss, grad)
    return LossResult(loss, state.params.with_values(grad), tape.running, {"ntxent": loss})


# ---------------------------------------------------------------------------
# backdoor objective


def backdoor_loss(state: EncoderState, clean_batch: np.ndarray, trigger,
                  target_image: np.ndarray, reference_emb_target: np.ndarray, clean_ref_embs: np.ndarray,
                  lambda1: float = 1.0, lambda2: float = 1.0, criterion: str = "cosine") -> LossResult:
    """``lambda1 * L1 + lambda2 * L2`` for one attacker minibatch.

    ``L1 = -mean_x s(f(x+e), f(x_t)) - s(f(x_t), f_clean(x_t))`` pulls triggered
    inputs onto the reference image while anchoring the reference itself;
    ``L2 = -mean_x s(f(x), f_clean(x))`` keeps clean embeddings in place.
    The clean, triggered and reference inputs share one forward pass.
    """
    if lambda1 < 0 or lambda2 < 0 or (lambda1 == 0 and lambda2 == 0):
        raise ValueError("lambda1, lambda2 must be non-negative and not both zero")
    clean_batch = np.asarray(clean_batch)
    if len(clean_batch) == 0:
        raise ShapeError("empty batch")
    if len(clean_ref_embs) != len(clean_batch):
        raise ShapeError("clean reference embeddings must match the clean batch")
    triggered_batch = embed_trigger(clean_batch, trigger)
    target = np.asarray(target_image)[None]
    batch, (s_clean, s_trig, s_tgt) = stack_inputs([clean_batch, triggered_batch, target])
    emb, tape = forward_train(state, batch)
    h_clean, h_trig, h_tgt = emb[s_clean], emb[s_trig], emb[s_tgt]
    B = len(clean_batch)
    ref_t = np.atleast_2d(reference_emb_target)

    # L1, first term: triggered inputs vs the reference under the model being trained
    s1, g1 = pair_similarity(h_trig, np.repeat(h_tgt, B, axis=0), criterion)
    # L1, second term: reference under the trained vs the clean model
    s2, g2 = pair_similarity(h_tgt, ref_t, criterion)
    # L2: clean inputs vs the clean model
    s3, g3 = pair_similarity(h_clean, np.asarray(clean_ref_embs), criterion)
    l1 = -float(np.mean(s1)) - float(s2[0])
    l2 = -float(np.mean(s3))
    loss = lambda1 * l1 + lambda2 * l2

    d = np.zeros_like(emb)
    da, db = g1(np.full(B, -lambda1 / B))
    d[s_trig] += da
    d[s_tgt] += db.sum(axis=0, keepdims=True)
    da, _ = g2(np.array([-lambda1]))
    d[s_tgt] += da
    da, _ = g3(np.full(B, -lambda2 / B))
    d[s_clean] += da
    grad = tape.backward(d)
    grad[~trainable_mask(state.params.layout, state.bn_frozen)] = 0.0
    _check(loss, grad)
    parts = {"l1": l1, "l1_trigger": -float(np.mean(s1)), "l1_reference": -float(s2[0]), "l2": l2}
    return LossResult(loss, state.params.with_values(grad), tape.running, parts)


def _check(loss: float, grad: np.ndarray) -> None:
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise NonFiniteError("non-finite loss or gradient")
