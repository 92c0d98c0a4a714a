"""Two-stage top-K recall and Recall@K / HitRate@K evaluation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .data import InteractionLog, UserSequence
from .model import Hyperparams, ModelParameters, batch_forward

DEFAULT_KS = (10, 20, 50)
USER_CHUNK = 256


class RankMode(enum.Enum):
    MULTI_COSINE = "multi_cosine"
    COMBINED = "combined"


@dataclass
class Recommendation:
    user_id: int
    items: list
    scores: list
    truncated: bool = False


@dataclass
class MetricsReport:
    recall: dict = field(default_factory=dict)
    hitrate: dict = field(default_factory=dict)
    num_users: int = 0

    def rows(self):
        for k in sorted(self.recall):
            yield "recall", k, self.recall[k]
            yield "hitrate", k, self.hitrate[k]

    def tsv(self):
        ks = sorted(self.recall)
        head = "\t".join(["users"] + [f"recall@{k}" for k in ks] + [f"hitrate@{k}" for k in ks])
        vals = "\t".join([str(self.num_users)] + [f"{self.recall[k]:.6f}" for k in ks]
                         + [f"{self.hitrate[k]:.6f}" for k in ks])
        return head + "\n" + vals + "\n"

    def keyvalue(self):
        return "".join(f"{name}\t{k}\t{value:.6f}\n" for name, k, value in self.rows())


def truth_sets(log: InteractionLog) -> dict[int, set]:
    out: dict[int, set] = {}
    for u, i in zip(log.users.tolist(), log.items.tolist()):
        out.setdefault(u, set()).add(i)
    return out


def ranked_top_k(scores, k, candidates=None):
    """Indices of the k best scores, descending, ties to the smaller index.

    ``-inf`` entries are treated as unavailable and never returned.
    """
    ids = np.arange(len(scores)) if candidates is None else np.asarray(candidates)
    vals = scores if candidates is None else scores[ids]
    keep = np.isfinite(vals)
    ids, vals = ids[keep], vals[keep]
    if len(ids) > k:
        thr = np.partition(vals, len(vals) - k)[len(vals) - k]
        keep = vals >= thr
        ids, vals = ids[keep], vals[keep]
    order = np.lexsort((ids, -vals))[:k]
    return ids[order], vals[order]


def top_k_sets(scores, k):
    """Per row, the set of indices ``ranked_top_k`` would return (unordered)."""
    n = scores.shape[1]
    if k >= n:
        return [ranked_top_k(row, k)[0] for row in scores]
    part = np.argpartition(-scores, k - 1, axis=1)[:, :k]
    thr = np.take_along_axis(scores, part, axis=1).min(axis=1)
    # rows with boundary ties or unavailable entries need the exact tie-break
    exact = ((scores >= thr[:, None]).sum(axis=1) > k) | ~np.isfinite(thr)
    out = list(part)
    for r in np.flatnonzero(exact):
        out[r] = ranked_top_k(scores[r], k)[0]
    return out


def score_matrix(interests, general, item_embeddings, epsilon, mode: RankMode):
    """(B, m, V) per-interest cosines and the (B, V) final ranking score."""
    item_norm = np.linalg.norm(item_embeddings, axis=1)
    int_norm = np.linalg.norm(interests, axis=2, keepdims=True)
    dots = interests @ item_embeddings.T
    with np.errstate(divide="ignore", invalid="ignore"):
        cos = dots / (int_norm * item_norm[None, None, :])
    cos = np.nan_to_num(cos, nan=0.0)
    if mode is RankMode.MULTI_COSINE:
        final = cos.max(axis=1)
    else:
        final = dots.max(axis=1) / epsilon + general @ item_embeddings.T
    return cos, final


def recommend(params: ModelParameters, hyper: Hyperparams, histories, k,
              mode: RankMode = RankMode.COMBINED, exclude=None) -> list[Recommendation]:
    """Per-interest top-k by cosine, union of the m*k candidates, final top-k.

    ``exclude`` maps user -> items that must not be recommended; by default
    each user's own history is excluded.
    """
    E = params.item_embeddings
    out = []
    for lo in range(0, len(histories), USER_CHUNK):
        chunk = histories[lo:lo + USER_CHUNK]
        interests, general = batch_forward(params, [s.items for s in chunk], hyper)
        cos, final = score_matrix(interests.astype(np.float64), general.astype(np.float64),
                                  E.astype(np.float64), hyper.epsilon, mode)
        for b, seq in enumerate(chunk):
            banned = exclude.get(seq.user_id, ()) if exclude is not None else seq.items
            banned = np.fromiter(banned, dtype=np.int64) if len(banned) else np.empty(0, np.int64)
            user_cos = cos[b]
            user_cos[:, banned] = -np.inf
            pool = np.unique(np.concatenate(top_k_sets(user_cos, k)))
            items, scores = ranked_top_k(final[b], k, pool)
            available = E.shape[0] - len(np.unique(banned))
            out.append(Recommendation(seq.user_id, items.tolist(), scores.tolist(),
                                      truncated=len(items) < k and available < k))
    return out


def recall_for_user(history: UserSequence, params, hyper, k, mode=RankMode.COMBINED,
                    exclude=None) -> Recommendation:
    excl = None if exclude is None else {history.user_id: exclude}
    return recommend(params, hyper, [history], k, mode, excl)[0]


def metrics_from_rankings(rankings: dict, truth: dict, ks=DEFAULT_KS) -> MetricsReport:
    """Macro-averaged Recall@K and HitRate@K over users that have truth items.

    ``rankings[u]`` is either one ranked list (cut at each K) or a dict K -> list.
    Per-user recalls are summed as exact fractions, so the result is the
    correctly rounded mean and does not depend on user order.
    """
    users = [u for u in truth if truth[u] and u in rankings]
    report = MetricsReport(num_users=len(users))
    for k in ks:
        recall, hits = Fraction(0), 0
        for u in users:
            ranked = rankings[u][k] if isinstance(rankings[u], dict) else rankings[u]
            n_hit = len(set(ranked[:k]) & truth[u])
            recall += Fraction(n_hit, len(truth[u]))
            hits += n_hit > 0
        report.recall[k] = float(recall / len(users)) if users else 0.0
        report.hitrate[k] = float(Fraction(hits, len(users))) if users else 0.0
    return report


def evaluate_split(params, hyper, histories, truth, ks=DEFAULT_KS, mode=RankMode.COMBINED,
                   exclude=None) -> MetricsReport:
    """Metrics of two-stage recall against per-user truth sets.

    ``truth`` is an :class:`InteractionLog` or a ``{user: set}`` mapping.
    Only users present in both ``histories`` and ``truth`` are scored.
    """
    if isinstance(truth, InteractionLog):
        truth = truth_sets(truth)
    histories = [s for s in histories if truth.get(s.user_id)]
    rankings: dict = {s.user_id: {} for s in histories}
    for k in ks:
        for rec in recommend(params, hyper, histories, k, mode, exclude):
            rankings[rec.user_id][k] = rec.items
    return metrics_from_rankings(rankings, {u: truth[u] for u in rankings}, ks)


def popularity_rankings(train: InteractionLog, users, k, exclude=None) -> dict:
    """Most-interacted train items, skipping each user's excluded items."""
    counts = np.bincount(train.items, minlength=train.num_items)
    order = np.lexsort((np.arange(len(counts)), -counts))
    out = {}
    for u in users:
        banned = exclude.get(u, set()) if exclude else set()
        ranked = []
        for item in order:
            if int(item) not in banned:
                ranked.append(int(item))
                if len(ranked) == k:
                    break
        out[u] = ranked
    return out


def popularity_baseline(train: InteractionLog, truth, ks=DEFAULT_KS, exclude=None) -> MetricsReport:
    if isinstance(truth, InteractionLog):
        truth = truth_sets(truth)
    rankings = popularity_rankings(train, list(truth), max(ks), exclude)
    return metrics_from_rankings(rankings, truth, ks)
