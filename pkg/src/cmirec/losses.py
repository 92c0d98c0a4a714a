"""Loss terms: sampled-softmax main loss, contrastive multi-interest loss,
orthogonality penalty, and their weighted total.

Each ``*_with_grad`` variant returns the analytic gradient with respect to its
array inputs; :mod:`cmirec.training` chains those into parameter gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# row block size for the (2mB x 2mB) similarity matrix
SIM_BLOCK = 2048


class DivergenceError(FloatingPointError):
    """A loss component became NaN or infinite."""


@dataclass
class BatchLossReport:
    main: float
    contrastive: float
    orthogonality: float
    total: float
    batch_size: int = 0
    negatives_per_positive: int = 0


@dataclass
class NegativeSet:
    sampled: np.ndarray
    in_batch: np.ndarray | None = None

    def __len__(self):
        return len(self.sampled) + (0 if self.in_batch is None else len(self.in_batch))


def logsumexp(x, axis=-1):
    mx = np.max(x, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    return (mx + np.log(np.sum(np.exp(x - mx), axis=axis, keepdims=True))).squeeze(axis)


def orthogonality_loss(category_matrix) -> float:
    return orthogonality_with_grad(category_matrix)[0]


def orthogonality_with_grad(category_matrix):
    gram = category_matrix @ category_matrix.T
    np.fill_diagonal(gram, 0.0)
    # both (i, j) and (j, i) are counted, so d/dG = 4 * offdiag(G G^T) G
    return float(np.sum(gram ** 2)), 4.0 * gram @ category_matrix


def contrastive_multi_interest_loss(view1, view2, tau) -> float:
    return contrastive_with_grad(view1, view2, tau, grad=False)[0]


def contrastive_with_grad(view1, view2, tau, grad=True):
    """Mean over the B*m anchors of the two-term contrastive loss.

    The vectors of both views are stacked into one (2Bm, d) matrix.  Row ``a``
    pairs with the same user/category in the other view; every other row
    except ``a`` itself is a negative, giving 2(mB - 1) negatives per anchor.
    The first log term is the row of the first-view vector and the second log
    term the row of the second-view vector, so summing all 2Bm row losses and
    dividing by Bm yields the per-anchor mean.
    """
    if view1.shape != view2.shape or view1.ndim != 3:
        raise ValueError("views must share a (B, m, d) shape")
    if tau <= 0:
        raise ValueError("tau must be positive")
    B, m, d = view1.shape
    half = B * m
    z = np.concatenate([view1.reshape(half, d), view2.reshape(half, d)])
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm interest vector")
    zu = z / norms
    n_rows = 2 * half
    partner = (np.arange(n_rows) + half) % n_rows
    total = 0.0
    d_zu = np.zeros_like(zu) if grad else None
    for start in range(0, n_rows, SIM_BLOCK):
        rows = np.arange(start, min(start + SIM_BLOCK, n_rows))
        local = np.arange(len(rows))
        sim = zu[rows] @ zu.T / tau
        sim[local, rows] = -np.inf
        lse = logsumexp(sim, axis=1)
        total += float(np.sum(lse - sim[local, partner[rows]]))
        if grad:
            prob = np.exp(sim - lse[:, None])
            prob[local, partner[rows]] -= 1.0
            prob /= half * tau
            d_zu[rows] += prob @ zu
            d_zu += prob.T @ zu[rows]
    loss = total / half
    if not grad:
        return loss, None, None
    d_z = (d_zu - zu * np.sum(zu * d_zu, axis=1, keepdims=True)) / norms
    return loss, d_z[:half].reshape(B, m, d), d_z[half:].reshape(B, m, d)


def sample_negatives(seen, num_items, n, rng) -> NegativeSet:
    """Draw ``n`` distinct items the user never interacted with (rejection sampling)."""
    if not isinstance(seen, (set, frozenset)):
        seen = {int(i) for i in seen}
    if len(seen) > num_items - n:
        free = num_items - sum(1 for i in seen if 0 <= i < num_items)
        if free < n:
            raise ValueError(f"only {free} unseen items, cannot sample {n} negatives")
    out = []
    while len(out) < n:
        item = int(rng.integers(num_items))
        if item not in seen and item not in out:
            out.append(item)
    return NegativeSet(np.array(out, dtype=np.int64))


def candidate_items(positives, negatives):
    """Column order of the in-batch candidate set: all positives, then all sampled negatives."""
    return np.concatenate([np.asarray(positives, dtype=np.int64),
                           np.asarray(negatives, dtype=np.int64).ravel()])


def main_loss(interests, general, positives, negatives, item_embeddings, epsilon) -> float:
    return main_with_grad(interests, general, positives, negatives, item_embeddings,
                          epsilon, grad=False)[0]


def main_with_grad(interests, general, positives, negatives, item_embeddings, epsilon, grad=True):
    """Cross-entropy of each user's positive against the whole in-batch candidate set.

    User ``b`` scores every positive and sampled negative in the batch with
    ``max_l(u_l . v) / epsilon + u_g . v``; its own positive is the target.
    Returns ``(loss, d_interests, d_general, candidates, d_candidate_rows)``.
    """
    B = interests.shape[0]
    cand = candidate_items(positives, negatives)
    v = item_embeddings[cand]
    per_interest = interests @ v.T / epsilon
    best = per_interest.argmax(axis=1)
    logits = np.take_along_axis(per_interest, best[:, None, :], axis=1)[:, 0, :]
    logits = logits + general @ v.T
    lse = logsumexp(logits, axis=1)
    rows = np.arange(B)
    loss = float(np.mean(lse - logits[rows, rows]))
    if not grad:
        return loss, None, None, cand, None
    d_logits = np.exp(logits - lse[:, None])
    d_logits[rows, rows] -= 1.0
    d_logits /= B
    d_general = d_logits @ v
    chosen = (best[:, None, :] == np.arange(interests.shape[1])[None, :, None]) * d_logits[:, None, :]
    d_interests = chosen @ v / epsilon
    m, d = interests.shape[1:]
    d_v = d_logits.T @ general + chosen.reshape(B * m, -1).T @ interests.reshape(B * m, d) / epsilon
    return loss, d_interests, d_general, cand, d_v


def total_loss(main, contrastive, orthogonality, lambda_cl, lambda_orth,
               batch_size=0, negatives_per_positive=0) -> BatchLossReport:
    for name, value in (("main", main), ("contrastive", contrastive), ("orthogonality", orthogonality)):
        if not math.isfinite(value):
            raise DivergenceError(f"non-finite {name} loss: {value}")
    total = main + lambda_cl * contrastive + lambda_orth * orthogonality
    return BatchLossReport(float(main), float(contrastive), float(orthogonality), float(total),
                           batch_size, negatives_per_positive)
