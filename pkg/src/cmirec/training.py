"""Reverse-mode gradients, Adam with unit-sphere projection, and the epoch loop."""

from __future__ import annotations

import logging
import math
import time
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .data import SplitLog, UserSequence, augment_sequence, build_sequences
from .evaluation import RankMode, evaluate_split, truth_sets
from .model import (GRU_NAMES, GruCache, GruParameters, Hyperparams, InterestCache,
                    ModelParameters, batch_gru, batch_interests, init_parameters, pad_sequences)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingInstance:
    user_id: int
    history: UserSequence
    positive: int


@dataclass
class GradientSet:
    arrays: dict
    touched_items: np.ndarray

    def __getitem__(self, name):
        return self.arrays[name]


@dataclass
class OptimizerState:
    first: dict
    second: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParameters):
        arrays = params.named_arrays()
        return cls({k: np.zeros_like(v) for k, v in arrays.items()},
                   {k: np.zeros_like(v) for k, v in arrays.items()})


@dataclass
class TrainConfig:
    hyper: Hyperparams = field(default_factory=Hyperparams)
    max_epochs: int = 50
    seed: int = 0
    instances_per_user: int = 8
    threads: int | None = None
    rank_mode: RankMode = RankMode.COMBINED

    def __post_init__(self):
        if self.max_epochs < 0 or self.instances_per_user < 1:
            raise ValueError("max_epochs must be >= 0 and instances_per_user >= 1")


@dataclass
class BatchDraw:
    """Stochastic inputs of one batch: sampled negatives and both augmented views."""

    negatives: np.ndarray
    view1: list
    view2: list


def build_instances(sequences, max_len, cap=None, rng=None) -> list[TrainingInstance]:
    """Next-item instances: items[:t] (last ``max_len`` kept) predicts items[t] for t >= 1."""
    out = []
    for seq in sequences:
        positions = np.arange(1, len(seq))
        if cap is not None and len(positions) > cap:
            positions = np.sort(rng.choice(positions, size=cap, replace=False))
        for t in positions:
            hist = seq.items[max(0, t - max_len):t]
            out.append(TrainingInstance(seq.user_id, UserSequence(seq.user_id, hist), seq.items[t]))
    return out


def draw_batch(batch, hyper: Hyperparams, rng, num_items, seen=None) -> BatchDraw:
    negatives = np.empty((len(batch), hyper.num_negatives), dtype=np.int64)
    view1, view2 = [], []
    for b, inst in enumerate(batch):
        user_seen = seen.get(inst.user_id) if seen is not None else None
        if user_seen is None:
            user_seen = set(inst.history.items) | {inst.positive}
        negatives[b] = losses.sample_negatives(user_seen, num_items, hyper.num_negatives, rng).sampled
        pair = augment_sequence(inst.history, hyper.mu, hyper.max_len, rng)
        view1.append(pair.first.items)
        view2.append(pair.second.items)
    return BatchDraw(negatives, view1, view2)


def scatter_rows(target, idx, values):
    """target[idx] += values with repeated indices summed in a fixed order."""
    if len(idx) == 0:
        return
    order = np.argsort(idx, kind="stable")
    idx = idx[order]
    starts = np.flatnonzero(np.r_[True, idx[1:] != idx[:-1]])
    target[idx[starts]] += np.add.reduceat(values[order], starts, axis=0)


def interests_backward(ic: InterestCache, d_interests, epsilon):
    """Gradients of the interest vectors w.r.t. the gathered sequence rows and the category matrix."""
    maskf = ic.mask[..., None].astype(ic.seq.dtype)
    weights = ic.probs * maskf
    d_probs = (ic.seq @ np.swapaxes(d_interests, 1, 2)) * maskf
    d_seq = weights @ d_interests
    d_w = ic.probs * (d_probs - np.sum(ic.probs * d_probs, axis=-1, keepdims=True)) / epsilon
    d_seq_unit = d_w @ ic.cat_unit
    m, d = ic.cat_unit.shape
    d_cat_unit = d_w.reshape(-1, m).T @ ic.seq_unit.reshape(-1, d)
    d_seq += (d_seq_unit - ic.seq_unit * np.sum(ic.seq_unit * d_seq_unit, axis=-1, keepdims=True)) / ic.seq_norm
    d_cat = (d_cat_unit - ic.cat_unit * np.sum(ic.cat_unit * d_cat_unit, axis=-1, keepdims=True)) / ic.cat_norm
    return d_seq * maskf, d_cat


def gru_backward(gru: GruParameters, cache: GruCache, d_out):
    """Backpropagation through time; returns (dict of weight grads, d_inputs)."""
    xs, mask = cache.xs, cache.mask
    B, L, d = xs.shape
    grads = {name: np.zeros_like(getattr(gru, name)) for name in GRU_NAMES}
    a_z = np.zeros_like(xs)
    a_r = np.zeros_like(xs)
    a_h = np.zeros_like(xs)
    dh = d_out
    for t in range(L - 1, -1, -1):
        live = mask[:, t, None]
        h_prev, z, r, c = cache.hs[t], cache.zs[t], cache.rs[t], cache.cs[t]
        dh_new = np.where(live, dh, 0.0)
        dh_prev = np.where(live, 0.0, dh)
        dz = dh_new * (c - h_prev)
        dc = dh_new * z
        dh_prev = dh_prev + dh_new * (1 - z)
        da_h = dc * (1 - c * c)
        grads["U_h"] += da_h.T @ (r * h_prev)
        d_rh = da_h @ gru.U_h
        dr = d_rh * h_prev
        dh_prev += d_rh * r
        da_r = dr * r * (1 - r)
        grads["U_r"] += da_r.T @ h_prev
        dh_prev += da_r @ gru.U_r
        da_z = dz * z * (1 - z)
        grads["U_z"] += da_z.T @ h_prev
        dh_prev += da_z @ gru.U_z
        a_z[:, t], a_r[:, t], a_h[:, t] = da_z, da_r, da_h
        dh = dh_prev
    flat_x = xs.reshape(-1, d)
    d_xs = np.zeros_like(xs)
    for gate, acc in (("z", a_z), ("r", a_r), ("h", a_h)):
        flat = acc.reshape(-1, d)
        grads[f"W_{gate}"] += flat.T @ flat_x
        grads[f"b_{gate}"] += flat.sum(axis=0)
        d_xs += acc @ getattr(gru, f"W_{gate}")
    return grads, d_xs


def batch_objective(params: ModelParameters, batch, draw: BatchDraw, hyper: Hyperparams, grad=True):
    """Total loss of one batch under fixed stochastic draws, optionally with gradients."""
    E, G = params.item_embeddings, params.category_matrix
    eps = hyper.epsilon
    idx, mask = pad_sequences([inst.history.items for inst in batch])
    ic = batch_interests(E, G, idx, mask, eps)
    gru_cache = None
    if hyper.use_general:
        gru_cache = batch_gru(params.gru, ic.seq, mask)
        general = gru_cache.output
    else:
        general = np.zeros((len(batch), E.shape[1]), dtype=E.dtype)
    positives = np.array([inst.positive for inst in batch], dtype=np.int64)
    main, d_int, d_gen, cand, d_cand = losses.main_with_grad(
        ic.interests, general, positives, draw.negatives, E, eps, grad=grad)

    want_cl = grad and hyper.lambda_cl > 0
    idx1, mask1 = pad_sequences(draw.view1)
    idx2, mask2 = pad_sequences(draw.view2)
    ic1 = batch_interests(E, G, idx1, mask1, eps)
    ic2 = batch_interests(E, G, idx2, mask2, eps)
    cl, d_v1, d_v2 = losses.contrastive_with_grad(ic1.interests, ic2.interests, hyper.tau, grad=want_cl)
    orth, d_orth = losses.orthogonality_with_grad(G)
    report = losses.total_loss(main, cl, orth, hyper.lambda_cl, hyper.lambda_orth,
                               len(batch), len(positives) * (1 + hyper.num_negatives) - 1)
    if not grad:
        return report, None

    d_E = np.zeros_like(E)
    d_G = (hyper.lambda_orth * d_orth).astype(G.dtype)
    arrays = {"item_embeddings": d_E, "category_matrix": d_G}
    d_seq, d_cat = interests_backward(ic, d_int, eps)
    d_G += d_cat
    if gru_cache is not None:
        gru_grads, d_xs = gru_backward(params.gru, gru_cache, d_gen)
        d_seq += d_xs * mask[..., None]
    else:
        gru_grads = {name: np.zeros_like(getattr(params.gru, name)) for name in GRU_NAMES}
    arrays.update({f"gru.{name}": g for name, g in gru_grads.items()})
    scatter_rows(d_E, idx[mask], d_seq[mask])
    scatter_rows(d_E, cand, d_cand)
    touched = [idx[mask], cand]
    if want_cl:
        for view_cache, view_idx, view_mask, d_view in ((ic1, idx1, mask1, d_v1), (ic2, idx2, mask2, d_v2)):
            d_vseq, d_vcat = interests_backward(view_cache, hyper.lambda_cl * d_view, eps)
            d_G += d_vcat
            scatter_rows(d_E, view_idx[view_mask], d_vseq[view_mask])
            touched.append(view_idx[view_mask])
    return report, GradientSet(arrays, np.unique(np.concatenate(touched)))


def compute_gradients(batch, params: ModelParameters, hyper: Hyperparams, rng, seen=None):
    if not batch:
        raise ValueError("empty batch")
    draw = draw_batch(batch, hyper, rng, params.dims[0], seen)
    return batch_objective(params, batch, draw, hyper, grad=True)


def project_rows(x, rows=None):
    """Renormalize rows to unit L2 norm (computed in double precision)."""
    sel = x if rows is None else x[rows]
    sel64 = sel.astype(np.float64)
    sel64 /= np.linalg.norm(sel64, axis=1, keepdims=True)
    if rows is None:
        x[...] = sel64
    else:
        x[rows] = sel64


def adam_step(params: ModelParameters, grads: GradientSet, state: OptimizerState, hyper: Hyperparams):
    """One bias-corrected Adam update, in place.

    Item-embedding rows (and their moments) are only touched when they
    appear in ``grads.touched_items``; afterwards every updated item row and
    every category row is projected back onto the unit sphere.
    """
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    corr1 = 1.0 - b1 ** state.step
    corr2 = 1.0 - b2 ** state.step
    rows = grads.touched_items
    for name, value in params.named_arrays().items():
        g = grads.arrays[name]
        m, v = state.first[name], state.second[name]
        if name == "item_embeddings":
            g = g[rows]
            m_rows = b1 * m[rows] + (1 - b1) * g
            v_rows = b2 * v[rows] + (1 - b2) * g * g
            m[rows], v[rows] = m_rows, v_rows
            value[rows] -= (hyper.lr * (m_rows / corr1) / (np.sqrt(v_rows / corr2) + hyper.adam_eps)).astype(value.dtype)
        else:
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            value -= (hyper.lr * (m / corr1) / (np.sqrt(v / corr2) + hyper.adam_eps)).astype(value.dtype)
    if len(rows):
        project_rows(params.item_embeddings, rows)
    project_rows(params.category_matrix)
    return params, state


@dataclass
class GradCheckReport:
    max_rel_error: dict
    worst: float
    coordinates: int
    tolerance: float = 1e-4

    @property
    def passed(self):
        return self.worst < self.tolerance


def relative_error(analytic, numeric, floor=1e-5):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero coordinates from
    turning float64 round-off into large ratios."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def gradient_check(params: ModelParameters, batch, hyper: Hyperparams, step=1e-5, tolerance=1e-4,
                   seed=0, frozen=True, seen=None, arrays=None) -> GradCheckReport:
    """Compare analytic gradients with central differences in float64.

    With ``frozen=True`` every loss evaluation reuses one draw of negatives
    and augmented views; ``frozen=False`` redraws per evaluation and is only
    useful as a negative control.
    """
    p64 = params.copy(np.float64)
    rng = np.random.default_rng(seed)
    draw = draw_batch(batch, hyper, rng, p64.dims[0], seen)
    _, grads = batch_objective(p64, batch, draw, hyper, grad=True)
    redraw = np.random.default_rng(seed + 1)

    def loss():
        d = draw if frozen else draw_batch(batch, hyper, redraw, p64.dims[0], seen)
        return batch_objective(p64, batch, d, hyper, grad=False)[0].total

    errors, count = {}, 0
    for name, value in p64.named_arrays().items():
        if arrays is not None and name not in arrays:
            continue
        numeric = np.zeros_like(value)
        flat, nflat = value.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss()
            flat[i] = orig - step
            down = loss()
            flat[i] = orig
            nflat[i] = (up - down) / (2 * step)
        count += flat.size
        errors[name] = float(relative_error(grads.arrays[name], numeric).max())
    return GradCheckReport(errors, max(errors.values()), count, tolerance)


@dataclass
class EpochRecord:
    epoch: int
    main: float
    contrastive: float
    orthogonality: float
    total: float
    val_recall: float
    elapsed: float

    def tsv(self, with_elapsed=True):
        elapsed = f"{self.elapsed:.2f}" if with_elapsed else "-"
        return (f"{self.epoch}\t{self.main:.6f}\t{self.contrastive:.6f}\t{self.orthogonality:.6f}\t"
                f"{self.total:.6f}\t{self.val_recall:.6f}\t{elapsed}")


EPOCH_LOG_HEADER = "epoch\tmain\tcontrastive\torthogonality\ttotal\tval_recall@50\telapsed_s"


@dataclass
class FitResult:
    params: ModelParameters
    history: list
    best_epoch: int

    @property
    def best_recall(self):
        return self.history[self.best_epoch].val_recall


def _thread_limit(threads):
    if not threads:
        return nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=threads)


def fit(split: SplitLog, config: TrainConfig, on_step=None, on_epoch=None, params=None) -> FitResult:
    """Train on ``split.train`` with early stopping on validation Recall@50.

    Epoch 0 in the returned history is the untrained model.  ``on_step`` is
    called as ``on_step(params, report, epoch, batch_index)`` after every
    optimizer step and ``on_epoch(record)`` after every epoch.
    """
    hyper = config.hyper
    train = split.train
    if len(train) == 0:
        raise ValueError("empty training split")
    full_sequences = build_sequences(train, max_len=len(train))
    histories = build_sequences(train, hyper.max_len)
    seen = {s.user_id: set(s.items) for s in full_sequences}
    truth = truth_sets(split.validation)
    if params is None:
        params = init_parameters(train.num_items, hyper.dim, hyper.num_interests, config.seed)
    state = OptimizerState.zeros_like(params)
    start = time.perf_counter()

    def validate():
        report = evaluate_split(params, hyper, histories, truth, ks=(50,), mode=config.rank_mode,
                                exclude=seen)
        return report.recall[50]

    with _thread_limit(config.threads):
        history = [EpochRecord(0, math.nan, math.nan, math.nan, math.nan, validate(),
                               time.perf_counter() - start)]
        if on_epoch:
            on_epoch(history[0])
        best, best_epoch, best_params, stale = history[0].val_recall, 0, params.copy(), 0
        for epoch in range(1, config.max_epochs + 1):
            rng = np.random.default_rng([config.seed, epoch])
            instances = build_instances(full_sequences, hyper.max_len, config.instances_per_user, rng)
            order = rng.permutation(len(instances))
            sums = np.zeros(4)
            n_batches = 0
            for b, lo in enumerate(range(0, len(order), hyper.batch_size)):
                batch = [instances[i] for i in order[lo:lo + hyper.batch_size]]
                batch_rng = np.random.default_rng([config.seed, epoch, b])
                try:
                    report, grads = compute_gradients(batch, params, hyper, batch_rng, seen)
                except losses.DivergenceError as exc:
                    raise losses.DivergenceError(f"epoch {epoch}, batch {b}: {exc}") from exc
                adam_step(params, grads, state, hyper)
                sums += (report.main, report.contrastive, report.orthogonality, report.total)
                n_batches += 1
                if on_step:
                    on_step(params, report, epoch, b)
            means = sums / max(n_batches, 1)
            record = EpochRecord(epoch, *means, validate(), time.perf_counter() - start)
            history.append(record)
            log.info(record.tsv())
            if on_epoch:
                on_epoch(record)
            if record.val_recall > best:
                best, best_epoch, best_params, stale = record.val_recall, epoch, params.copy(), 0
            else:
                stale += 1
                if stale >= hyper.patience:
                    break
    return FitResult(best_params, history, best_epoch)
