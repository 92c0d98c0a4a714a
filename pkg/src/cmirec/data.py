"""Interaction logs, chronological splits, user sequences and augmentation.

Interaction files are delimited text with one ``user_id,item_id,timestamp``
triple per line.  Raw IDs are re-indexed to contiguous ranges on load; the
original IDs are kept on the log so outputs can be mapped back.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DAY_SECONDS = 86400


class ParseError(ValueError):
    """Raised for malformed interaction files."""


@dataclass(frozen=True)
class InteractionRecord:
    user_id: int
    item_id: int
    timestamp: int

    def __post_init__(self):
        if self.user_id < 0 or self.item_id < 0 or self.timestamp < 0:
            raise ValueError(f"negative field in {self!r}")


@dataclass
class InteractionLog:
    """Column-oriented interaction log.

    ``users``/``items`` hold contiguous indices; ``user_ids``/``item_ids`` map
    an index back to the raw ID found in the source file.
    """

    users: np.ndarray
    items: np.ndarray
    timestamps: np.ndarray
    num_users: int
    num_items: int
    user_ids: np.ndarray | None = None
    item_ids: np.ndarray | None = None

    def __post_init__(self):
        self.users = np.asarray(self.users, dtype=np.int64)
        self.items = np.asarray(self.items, dtype=np.int64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if not (len(self.users) == len(self.items) == len(self.timestamps)):
            raise ValueError("column length mismatch")
        if len(self.users):
            if self.users.min() < 0 or self.users.max() >= self.num_users:
                raise ValueError("user index out of range")
            if self.items.min() < 0 or self.items.max() >= self.num_items:
                raise ValueError("item index out of range")
            if self.timestamps.min() < 0:
                raise ValueError("negative timestamp")
        if self.user_ids is None:
            self.user_ids = np.arange(self.num_users, dtype=np.int64)
        if self.item_ids is None:
            self.item_ids = np.arange(self.num_items, dtype=np.int64)

    def __len__(self):
        return len(self.users)

    @property
    def records(self) -> list[InteractionRecord]:
        return [InteractionRecord(int(u), int(i), int(t))
                for u, i, t in zip(self.users, self.items, self.timestamps)]

    @classmethod
    def from_records(cls, records, num_users=None, num_items=None):
        records = list(records)
        users = [r.user_id for r in records]
        items = [r.item_id for r in records]
        ts = [r.timestamp for r in records]
        if num_users is None:
            num_users = max(users, default=-1) + 1
        if num_items is None:
            num_items = max(items, default=-1) + 1
        return cls(np.array(users, dtype=np.int64), np.array(items, dtype=np.int64),
                   np.array(ts, dtype=np.int64), num_users, num_items)

    def subset(self, mask) -> "InteractionLog":
        """Rows selected by a boolean mask, sharing the ID tables."""
        return InteractionLog(self.users[mask], self.items[mask], self.timestamps[mask],
                              self.num_users, self.num_items, self.user_ids, self.item_ids)

    def user_index(self) -> dict[int, int]:
        return {int(raw): idx for idx, raw in enumerate(self.user_ids)}


@dataclass
class SplitLog:
    train: InteractionLog
    validation: InteractionLog
    test: InteractionLog
    span_days: int


@dataclass(frozen=True)
class UserSequence:
    user_id: int
    items: tuple

    def __post_init__(self):
        if len(self.items) < 1:
            raise ValueError("a user sequence needs at least one item")

    def __len__(self):
        return len(self.items)


@dataclass(frozen=True)
class AugmentedPair:
    first: UserSequence
    second: UserSequence


@dataclass
class SyntheticSpec:
    """Planted-category dataset description.

    Items are split evenly into ``num_planted_categories`` categories laid out
    on a ring.  Each user picks ``interests_per_user`` categories and, within
    each, a contiguous window covering ``interest_width`` of the category.
    A non-noise interaction comes from the window with probability
    ``window_share`` and from anywhere in the category otherwise.
    """

    num_users: int = 1000
    num_items: int = 2000
    num_planted_categories: int = 4
    interests_per_user: int = 2
    interactions_per_user: int = 100
    noise_rate: float = 0.1
    seed: int = 0
    span_days: int = 10
    day_length: int = DAY_SECONDS
    interest_width: float = 0.2
    window_share: float = 1.0

    def validate(self):
        if min(self.num_users, self.num_items, self.num_planted_categories,
               self.interests_per_user, self.interactions_per_user) < 1:
            raise ValueError("counts must be positive")
        if self.interests_per_user > self.num_planted_categories:
            raise ValueError("interests_per_user exceeds num_planted_categories")
        if self.num_planted_categories > self.num_items:
            raise ValueError("more categories than items")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must be in [0, 1]")
        if not 0.0 < self.interest_width <= 1.0:
            raise ValueError("interest_width must be in (0, 1]")
        if not 0.0 <= self.window_share <= 1.0:
            raise ValueError("window_share must be in [0, 1]")
        if self.interactions_per_user > self.num_items:
            raise ValueError("interactions_per_user exceeds num_items")
        if self.span_days < 3 or self.day_length < 1:
            raise ValueError("span_days must be >= 3")


@dataclass
class SyntheticDataset:
    log: InteractionLog
    item_category: np.ndarray
    user_categories: list = field(default_factory=list)


def _parse_int(text, lineno, name):
    try:
        value = int(text.strip())
    except ValueError:
        raise ParseError(f"line {lineno}: non-numeric {name} field {text!r}") from None
    if value < 0:
        raise ParseError(f"line {lineno}: negative {name} {value}")
    return value


def parse_interactions(path, delimiter: str = ",") -> InteractionLog:
    """Read a delimited ``user,item,timestamp`` file.

    A non-numeric first row is treated as a header.  Users and items are
    re-indexed in ascending raw-ID order; row order is preserved so that
    equal timestamps keep their input order downstream.
    """
    path = Path(path)
    users, items, stamps = [], [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        for lineno, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < 3:
                raise ParseError(f"line {lineno}: expected 3 fields, got {len(row)}")
            if lineno == 1 and not row[0].strip().lstrip("-").isdigit():
                continue
            users.append(_parse_int(row[0], lineno, "user"))
            items.append(_parse_int(row[1], lineno, "item"))
            stamps.append(_parse_int(row[2], lineno, "timestamp"))
    if not users:
        raise ParseError(f"{path}: no interactions")
    user_ids, user_idx = np.unique(np.array(users, dtype=np.int64), return_inverse=True)
    item_ids, item_idx = np.unique(np.array(items, dtype=np.int64), return_inverse=True)
    return InteractionLog(user_idx, item_idx, np.array(stamps, dtype=np.int64),
                          len(user_ids), len(item_ids), user_ids, item_ids)


def write_interactions(log: InteractionLog, path, delimiter: str = ",", header: bool = True):
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            fh.write(delimiter.join(["user_id", "item_id", "timestamp"]) + "\n")
        for u, i, t in zip(log.user_ids[log.users], log.item_ids[log.items], log.timestamps):
            fh.write(f"{u}{delimiter}{i}{delimiter}{t}\n")


def day_index(timestamps, day_length=DAY_SECONDS, origin=None):
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if origin is None:
        origin = timestamps.min() if len(timestamps) else 0
    return (timestamps - origin) // day_length


def chronological_split(log: InteractionLog, span_days: int,
                        day_length: int = DAY_SECONDS, origin=None) -> SplitLog:
    """Train on days 1..h-2, validate on day h-1, test on day h.

    Days are counted from ``origin`` (the earliest timestamp by default); a
    record exactly on a day boundary belongs to the later day.  Validation and
    test rows whose user or item never appears in train are dropped.
    """
    if span_days < 3:
        raise ValueError(f"span_days must be at least 3, got {span_days}")
    days = day_index(log.timestamps, day_length, origin)
    if len(days) and (days.min() < 0 or days.max() >= span_days):
        raise ValueError(f"timestamps span more than {span_days} days")
    train_mask = days < span_days - 2
    train = log.subset(train_mask)
    seen_users = np.zeros(log.num_users, dtype=bool)
    seen_users[train.users] = True
    seen_items = np.zeros(log.num_items, dtype=bool)
    seen_items[train.items] = True
    warm = seen_users[log.users] & seen_items[log.items]
    validation = log.subset(warm & (days == span_days - 2))
    test = log.subset(warm & (days == span_days - 1))
    return SplitLog(train, validation, test, span_days)


def build_sequences(log: InteractionLog, max_len: int = 100) -> list[UserSequence]:
    """One time-ordered sequence per user, keeping the ``max_len`` most recent items."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    order = np.lexsort((log.timestamps, log.users))
    users = log.users[order]
    items = log.items[order]
    bounds = np.flatnonzero(np.diff(users)) + 1
    out = []
    for chunk_users, chunk_items in zip(np.split(users, bounds), np.split(items, bounds)):
        if len(chunk_users) == 0:
            continue
        out.append(UserSequence(int(chunk_users[0]), tuple(int(i) for i in chunk_items[-max_len:])))
    return out


def sample_size(length: int, mu: float, max_len: int) -> int:
    return max(1, min(int(math.floor(mu * length + 1e-9)), max_len))


def augment_sequence(seq: UserSequence, mu: float, max_len: int, rng) -> AugmentedPair:
    """Two independent order-preserving random subsamples of ``seq``."""
    if not 0.0 < mu <= 1.0:
        raise ValueError("mu must be in (0, 1]")
    n = len(seq)
    k = sample_size(n, mu, max_len)
    # two independent uniform k-subsets: first k of a random ordering per view
    pos = np.sort(np.argsort(rng.random((2, n)), axis=1)[:, :k], axis=1)
    items = np.asarray(seq.items)[pos]
    return AugmentedPair(UserSequence(seq.user_id, tuple(items[0].tolist())),
                         UserSequence(seq.user_id, tuple(items[1].tolist())))


def generate_synthetic(spec: SyntheticSpec) -> SyntheticDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_cat = spec.num_planted_categories
    # categories are contiguous ranges of a random permutation of item IDs
    perm = rng.permutation(spec.num_items)
    members = np.array_split(perm, n_cat)
    item_category = np.empty(spec.num_items, dtype=np.int64)
    for c, ids in enumerate(members):
        item_category[ids] = c

    horizon = spec.span_days * spec.day_length
    users, items, stamps = [], [], []
    user_categories = []
    for u in range(spec.num_users):
        cats = np.sort(rng.choice(n_cat, size=spec.interests_per_user, replace=False))
        user_categories.append(tuple(int(c) for c in cats))
        windows = []
        for c in cats:
            ring = members[c]
            width = max(1, int(round(spec.interest_width * len(ring))))
            start = rng.integers(len(ring))
            windows.append(ring[(start + np.arange(width)) % len(ring)])
        weights = rng.dirichlet(np.full(len(cats), 2.0))
        used = np.zeros(spec.num_items, dtype=bool)
        chosen = []
        for k in range(spec.interactions_per_user):
            if rng.random() < spec.noise_rate:
                pool = None
            else:
                j = k if k < len(cats) else rng.choice(len(cats), p=weights)
                ring = members[cats[j]]
                wide = spec.window_share < 1.0 and rng.random() >= spec.window_share
                pool = ring[~used[ring]] if wide else windows[j][~used[windows[j]]]
                if not len(pool):
                    pool = ring[~used[ring]]
            if pool is not None and len(pool):
                item = int(pool[rng.integers(len(pool))])
            else:
                item = int(rng.integers(spec.num_items))
                while used[item]:
                    item = int(rng.integers(spec.num_items))
            used[item] = True
            chosen.append(item)
        ts = np.sort(rng.integers(0, horizon, size=len(chosen)))
        users.extend([u] * len(chosen))
        items.extend(chosen)
        stamps.extend(ts.tolist())
    log = InteractionLog(np.array(users), np.array(items), np.array(stamps),
                         spec.num_users, spec.num_items)
    return SyntheticDataset(log, item_category, user_categories)


def write_ground_truth(dataset: SyntheticDataset, item_path, user_path):
    with open(item_path, "w", encoding="utf-8") as fh:
        for item, cat in enumerate(dataset.item_category):
            fh.write(f"{item}\t{cat}\n")
    with open(user_path, "w", encoding="utf-8") as fh:
        for user, cats in enumerate(dataset.user_categories):
            fh.write(f"{user}\t{','.join(str(c) for c in cats)}\n")
