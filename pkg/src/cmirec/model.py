"""Model parameters and the forward pass.

The per-user functions (``category_assignment``, ``encode_interests``,
``encode_general``, ``score_interaction``, ``forward_user``) are the plain
reference path.  The ``batch_*`` functions compute the same quantities for a
padded batch and keep the intermediates needed by the backward pass in
:mod:`cmirec.training`.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .data import UserSequence

MAGIC = b"CMI1"
GRU_NAMES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


class CheckpointError(ValueError):
    pass


@dataclass
class Hyperparams:
    num_interests: int = 8
    dim: int = 64
    epsilon: float = 0.1
    tau: float = 0.1
    mu: float = 0.5
    max_len: int = 100
    lambda_cl: float = 0.01
    lambda_orth: float = 10.0
    num_negatives: int = 1
    top_k: int = 50
    batch_size: int = 1024
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 5
    use_general: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.epsilon <= 0 or self.tau <= 0:
            raise ValueError("epsilon and tau must be positive")
        if not 0 < self.mu <= 1:
            raise ValueError("mu must be in (0, 1]")
        if self.num_interests < 1 or self.num_negatives < 1 or self.dim < 1:
            raise ValueError("num_interests, num_negatives and dim must be >= 1")
        if self.max_len < 1 or self.top_k < 1 or self.batch_size < 1:
            raise ValueError("max_len, top_k and batch_size must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lambda_cl < 0 or self.lambda_orth < 0 or self.lr <= 0:
            raise ValueError("loss weights must be >= 0 and lr > 0")


@dataclass
class GruParameters:
    W_z: np.ndarray
    U_z: np.ndarray
    b_z: np.ndarray
    W_r: np.ndarray
    U_r: np.ndarray
    b_r: np.ndarray
    W_h: np.ndarray
    U_h: np.ndarray
    b_h: np.ndarray

    @classmethod
    def zeros(cls, d, dtype=np.float64):
        return cls(**{name: np.zeros((d,) if name.startswith("b") else (d, d), dtype=dtype)
                      for name in GRU_NAMES})

    def arrays(self):
        return [getattr(self, name) for name in GRU_NAMES]


@dataclass
class ModelParameters:
    item_embeddings: np.ndarray
    category_matrix: np.ndarray
    gru: GruParameters

    @property
    def dims(self):
        return (self.item_embeddings.shape[0], self.item_embeddings.shape[1],
                self.category_matrix.shape[0])

    @property
    def dtype(self):
        return self.item_embeddings.dtype

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {"item_embeddings": self.item_embeddings, "category_matrix": self.category_matrix}
        out.update({f"gru.{name}": getattr(self.gru, name) for name in GRU_NAMES})
        return out

    def set_array(self, name, value):
        if name.startswith("gru."):
            setattr(self.gru, name[4:], value)
        else:
            setattr(self, name, value)

    def copy(self, dtype=None) -> "ModelParameters":
        dtype = dtype or self.dtype
        gru = GruParameters(**{n: np.array(getattr(self.gru, n), dtype=dtype) for n in GRU_NAMES})
        return ModelParameters(np.array(self.item_embeddings, dtype=dtype),
                               np.array(self.category_matrix, dtype=dtype), gru)


def unit_rows(x):
    x64 = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x64, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cannot normalize a zero row")
    return (x64 / norms).astype(x.dtype)


def init_parameters(num_items, dim, num_interests, seed=0, dtype=np.float32) -> ModelParameters:
    """Draw every entry from U(-1/sqrt(d), 1/sqrt(d)); item and category rows are then put on the unit sphere."""
    if min(num_items, dim, num_interests) < 1:
        raise ValueError("dimensions must be positive")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(dim)

    def draw(*shape):
        return rng.uniform(-bound, bound, size=shape)

    items = unit_rows(draw(num_items, dim))
    cats = unit_rows(draw(num_interests, dim))
    gru = GruParameters(**{n: draw(dim) if n.startswith("b") else draw(dim, dim) for n in GRU_NAMES})
    return ModelParameters(items, cats, gru).copy(dtype)


# --- per-user reference path ------------------------------------------------

@dataclass
class AssignmentMatrix:
    scores: np.ndarray
    probs: np.ndarray


@dataclass
class InterestSet:
    interests: np.ndarray
    general: np.ndarray


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _row_norms(x, what):
    norms = np.linalg.norm(x, axis=-1)
    if np.any(norms == 0):
        raise ValueError(f"zero-norm row in {what}")
    return norms


def category_assignment(seq_embeddings, category_matrix, epsilon) -> AssignmentMatrix:
    seq_embeddings = np.atleast_2d(seq_embeddings)
    sn = _row_norms(seq_embeddings, "sequence embeddings")
    gn = _row_norms(category_matrix, "category matrix")
    w = (seq_embeddings / sn[:, None]) @ (category_matrix / gn[:, None]).T
    return AssignmentMatrix(w, softmax(w / epsilon, axis=1))


def encode_interests(seq_embeddings, probs):
    """Probability-weighted sum (not mean) of item embeddings per category."""
    return probs.T @ seq_embeddings


def gru_cell(x, h, gru: GruParameters):
    z = sigmoid(gru.W_z @ x + gru.U_z @ h + gru.b_z)
    r = sigmoid(gru.W_r @ x + gru.U_r @ h + gru.b_r)
    cand = np.tanh(gru.W_h @ x + gru.U_h @ (r * h) + gru.b_h)
    return (1 - z) * h + z * cand


def encode_general(seq_embeddings, gru: GruParameters):
    h = np.zeros(gru.b_z.shape[0], dtype=np.result_type(seq_embeddings, gru.b_z))
    for x in np.atleast_2d(seq_embeddings):
        h = gru_cell(x, h, gru)
    return h


def score_interaction(interest_set: InterestSet, item_embedding, epsilon) -> float:
    return float(np.max(interest_set.interests @ item_embedding) / epsilon
                 + interest_set.general @ item_embedding)


def forward_user(seq: UserSequence, params: ModelParameters, hyper: Hyperparams) -> InterestSet:
    items = np.asarray(seq.items, dtype=np.int64)
    if items.min() < 0 or items.max() >= params.item_embeddings.shape[0]:
        raise IndexError(f"item id out of range for user {seq.user_id}")
    emb = params.item_embeddings[items]
    assign = category_assignment(emb, params.category_matrix, hyper.epsilon)
    interests = encode_interests(emb, assign.probs)
    if hyper.use_general:
        general = encode_general(emb, params.gru)
    else:
        general = np.zeros(emb.shape[1], dtype=emb.dtype)
    return InterestSet(interests, general)


# --- batched path -------------------------------------------------------------

def pad_sequences(seqs):
    """Right-pad item lists to a (B, L) index array plus a boolean mask."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if len(seqs) == 0 or lengths.min() < 1:
        raise ValueError("every sequence must be non-empty")
    idx = np.zeros((len(seqs), lengths.max()), dtype=np.int64)
    mask = np.arange(lengths.max())[None, :] < lengths[:, None]
    idx[mask] = np.concatenate([np.asarray(s, dtype=np.int64) for s in seqs])
    return idx, mask


@dataclass
class InterestCache:
    idx: np.ndarray
    mask: np.ndarray
    seq: np.ndarray
    seq_norm: np.ndarray
    seq_unit: np.ndarray
    cat_norm: np.ndarray
    cat_unit: np.ndarray
    probs: np.ndarray
    interests: np.ndarray


def batch_interests(item_embeddings, category_matrix, idx, mask, epsilon) -> InterestCache:
    maskf = mask[..., None].astype(item_embeddings.dtype)
    seq = item_embeddings[idx] * maskf
    norm = np.linalg.norm(seq, axis=-1, keepdims=True)
    if np.any(norm[mask] == 0):
        raise ValueError("zero-norm item embedding in batch")
    norm = np.where(mask[..., None], norm, 1.0)
    seq_unit = seq / norm
    cat_norm = np.linalg.norm(category_matrix, axis=-1, keepdims=True)
    if np.any(cat_norm == 0):
        raise ValueError("zero-norm category row")
    cat_unit = category_matrix / cat_norm
    w = seq_unit @ cat_unit.T
    probs = softmax(w / epsilon, axis=-1)
    interests = np.swapaxes(probs * maskf, 1, 2) @ seq
    return InterestCache(idx, mask, seq, norm, seq_unit, cat_norm, cat_unit, probs, interests)


@dataclass
class GruCache:
    xs: np.ndarray
    mask: np.ndarray
    hs: list = field(default_factory=list)
    zs: list = field(default_factory=list)
    rs: list = field(default_factory=list)
    cs: list = field(default_factory=list)

    @property
    def output(self):
        return self.hs[-1]


def batch_gru(gru: GruParameters, xs, mask) -> GruCache:
    """Run the GRU over right-padded inputs; padded steps carry the state through."""
    B, L, d = xs.shape
    cache = GruCache(xs, mask)
    h = np.zeros((B, gru.b_z.shape[0]), dtype=xs.dtype)
    cache.hs.append(h)
    # input projections for all steps at once
    xz = xs @ gru.W_z.T + gru.b_z
    xr = xs @ gru.W_r.T + gru.b_r
    xh = xs @ gru.W_h.T + gru.b_h
    for t in range(L):
        z = sigmoid(xz[:, t] + h @ gru.U_z.T)
        r = sigmoid(xr[:, t] + h @ gru.U_r.T)
        c = np.tanh(xh[:, t] + (r * h) @ gru.U_h.T)
        h_new = (1 - z) * h + z * c
        h = np.where(mask[:, t, None], h_new, h)
        cache.zs.append(z)
        cache.rs.append(r)
        cache.cs.append(c)
        cache.hs.append(h)
    return cache


def batch_forward(params: ModelParameters, seqs, hyper: Hyperparams):
    """Interests (B, m, d) and general vectors (B, d) for a list of item lists."""
    idx, mask = pad_sequences(seqs)
    ic = batch_interests(params.item_embeddings, params.category_matrix, idx, mask, hyper.epsilon)
    if hyper.use_general:
        general = batch_gru(params.gru, ic.seq, mask).output
    else:
        general = np.zeros((len(seqs), params.dims[1]), dtype=params.dtype)
    return ic.interests, general


# --- checkpoints ------------------------------------------------------------

def checkpoint_bytes(params: ModelParameters) -> bytes:
    n, d, m = params.dims
    parts = [MAGIC, struct.pack("<III", n, d, m)]
    for arr in (params.item_embeddings, params.category_matrix, *params.gru.arrays()):
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(params: ModelParameters, path):
    """Write atomically: temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(checkpoint_bytes(params))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> ModelParameters:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {blob[:4]!r}")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated header")
    n, d, m = struct.unpack("<III", blob[4:16])
    shapes = [(n, d), (m, d)] + [(d,) if name.startswith("b") else (d, d) for name in GRU_NAMES]
    expected = 16 + 4 * sum(int(np.prod(s)) for s in shapes)
    if len(blob) != expected:
        raise CheckpointError(f"{path}: expected {expected} bytes, found {len(blob)}")
    arrays, offset = [], 16
    for shape in shapes:
        count = int(np.prod(shape))
        arrays.append(np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
                      .reshape(shape).astype(np.float32))
        offset += 4 * count
    return ModelParameters(arrays[0], arrays[1], GruParameters(*arrays[2:]))


def hyper_with(hyper: Hyperparams, **changes) -> Hyperparams:
    return replace(hyper, **changes)


def hyper_fields():
    return [f.name for f in fields(Hyperparams)]
