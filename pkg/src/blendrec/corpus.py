"""Interaction corpus: ingestion, filtering, splits, and triplet sampling.

Interactions are binary: any recorded (user, item) event counts as one
positive regardless of rating value. Raw string IDs are mapped to dense
contiguous indices in first-appearance order, which keeps every run
reproducible from the input file alone.
"""

from __future__ import annotations

import gzip
import logging
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

PROTOCOLS = ("random-half", "per-user-holdout", "leave-one-out")


class Triplet(NamedTuple):
    user: int
    pos_item: int
    neg_item: int


@dataclass
class FileFormat:
    """Column layout of a delimited interaction log.

    ``columns`` names the fields in file order; ``user`` and ``item`` are
    required, ``rating`` and ``timestamp`` are optional and ignored except
    that timestamps drive leave-one-out ordering.
    """

    delimiter: str = "\t"
    columns: tuple[str, ...] = ("user", "item", "rating", "timestamp")

    def __post_init__(self) -> None:
        if "user" not in self.columns or "item" not in self.columns:
            raise DataError("file format must name 'user' and 'item' columns")


@dataclass
class SplitSpec:
    """Train/test split protocol with its determinism seed."""

    protocol: str = "random-half"
    n_test: int = 0
    seed: int = 0
    min_interactions: int = 0

    def __post_init__(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise DataError(f"unknown split protocol {self.protocol!r}")
        if self.protocol == "per-user-holdout" and self.n_test < 1:
            raise DataError("per-user-holdout needs n_test >= 1")


class InteractionMatrix:
    """Binary user-item interactions with dense ID vocabularies.

    Stores the deduplicated interaction list in file order (needed for the
    leave-one-out fallback) plus optional timestamps. Membership queries and
    per-user item lists are computed lazily and cached.
    """

    def __init__(
        self,
        user_count: int,
        item_count: int,
        users: np.ndarray,
        items: np.ndarray,
        user_vocab: dict[str, int],
        item_vocab: dict[str, int],
        timestamps: np.ndarray | None = None,
    ) -> None:
        if user_count < 1 or item_count < 1:
            raise DataError("matrix needs at least one user and one item")
        self.user_count = int(user_count)
        self.item_count = int(item_count)
        self.users = np.asarray(users, dtype=np.int64)
        self.items = np.asarray(items, dtype=np.int64)
        self.user_vocab = user_vocab
        self.item_vocab = item_vocab
        self.timestamps = None if timestamps is None else np.asarray(timestamps, dtype=np.float64)
        if self.users.shape != self.items.shape:
            raise DataError("user and item arrays differ in length")
        if len(self.users) and (
            self.users.min() < 0
            or self.users.max() >= user_count
            or self.items.min() < 0
            or self.items.max() >= item_count
        ):
            raise DataError("interaction index out of range")
        self._keys: np.ndarray | None = None
        self._by_user: list[np.ndarray] | None = None

    # -- derived views -------------------------------------------------

    def __len__(self) -> int:
        return len(self.users)

    @property
    def density(self) -> float:
        return len(self.users) / (self.user_count * self.item_count)

    @property
    def positives(self) -> set[tuple[int, int]]:
        return set(zip(self.users.tolist(), self.items.tolist()))

    def _key_array(self) -> np.ndarray:
        if self._keys is None:
            self._keys = np.sort(self.users * self.item_count + self.items)
        return self._keys

    def contains(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Vectorized membership test for (user, item) pairs."""
        keys = self._key_array()
        probe = np.asarray(users, dtype=np.int64) * self.item_count + np.asarray(items, dtype=np.int64)
        if len(keys) == 0:
            return np.zeros(probe.shape, dtype=bool)
        pos = np.minimum(np.searchsorted(keys, probe), len(keys) - 1)
        return keys[pos] == probe

    def items_of_user(self, user: int) -> np.ndarray:
        """Sorted item indices the user interacted with."""
        if self._by_user is None:
            order = np.argsort(self.users, kind="stable")
            bounds = np.searchsorted(self.users[order], np.arange(self.user_count + 1))
            self._by_user = [
                np.sort(self.items[order[bounds[u]: bounds[u + 1]]])
                for u in range(self.user_count)
            ]
        return self._by_user[user]

    def user_interaction_counts(self) -> np.ndarray:
        return np.bincount(self.users, minlength=self.user_count)


def _open_text(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt", encoding="utf-8")
    return open(path, "r", encoding="utf-8")


def load_interactions(path, fmt: FileFormat | None = None) -> InteractionMatrix:
    """Parse a delimited interaction log into a binary matrix.

    Duplicate (user, item) events collapse to a single positive; the first
    occurrence fixes file order and timestamp. Raises DataError with the
    offending line number on malformed rows and on empty files.
    """
    fmt = fmt or FileFormat()
    ucol = fmt.columns.index("user")
    icol = fmt.columns.index("item")
    tcol = fmt.columns.index("timestamp") if "timestamp" in fmt.columns else None
    min_fields = max(ucol, icol) + 1

    user_vocab: dict[str, int] = {}
    item_vocab: dict[str, int] = {}
    users: list[int] = []
    items: list[int] = []
    stamps: list[float] = []
    seen: set[tuple[int, int]] = set()
    has_stamps = True

    with _open_text(path) as handle:
        for lineno, line in enumerate(handle, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split(fmt.delimiter) if fmt.delimiter else line.split()
            if len(parts) < min_fields:
                raise DataError(f"{path}:{lineno}: expected >= {min_fields} fields, got {len(parts)}")
            raw_u, raw_i = parts[ucol].strip(), parts[icol].strip()
            if not raw_u or not raw_i:
                raise DataError(f"{path}:{lineno}: empty user or item field")
            u = user_vocab.setdefault(raw_u, len(user_vocab))
            i = item_vocab.setdefault(raw_i, len(item_vocab))
            if (u, i) in seen:
                continue
            seen.add((u, i))
            users.append(u)
            items.append(i)
            if tcol is not None and len(parts) > tcol and parts[tcol].strip():
                try:
                    stamps.append(float(parts[tcol]))
                except ValueError as exc:
                    raise DataError(f"{path}:{lineno}: bad timestamp {parts[tcol]!r}") from exc
            else:
                has_stamps = False

    if not users:
        raise DataError(f"{path}: no interactions found")
    return InteractionMatrix(
        user_count=len(user_vocab),
        item_count=len(item_vocab),
        users=np.array(users, dtype=np.int64),
        items=np.array(items, dtype=np.int64),
        user_vocab=user_vocab,
        item_vocab=item_vocab,
        timestamps=np.array(stamps) if has_stamps and stamps else None,
    )


def filter_min_interactions(m: InteractionMatrix, threshold: int) -> InteractionMatrix:
    """Drop users with fewer than ``threshold`` interactions.

    Single pass: items left without any interaction afterwards are dropped
    and both vocabularies re-densified, but no further user re-filtering
    cascades from that.
    """
    if threshold < 0:
        raise DataError("threshold must be >= 0")
    if threshold == 0:
        return m
    counts = m.user_interaction_counts()
    keep_user = counts >= threshold
    if not keep_user.any():
        raise DataError(f"min-interactions filter {threshold} removed every user")
    row_keep = keep_user[m.users]
    users = m.users[row_keep]
    items = m.items[row_keep]
    stamps = m.timestamps[row_keep] if m.timestamps is not None else None

    new_user = np.full(m.user_count, -1, dtype=np.int64)
    new_user[keep_user] = np.arange(int(keep_user.sum()))
    keep_item = np.zeros(m.item_count, dtype=bool)
    keep_item[items] = True
    new_item = np.full(m.item_count, -1, dtype=np.int64)
    new_item[keep_item] = np.arange(int(keep_item.sum()))

    dropped_items = int(m.item_count - keep_item.sum())
    if dropped_items:
        log.info("filter: dropped %d items left without interactions", dropped_items)

    user_vocab = {raw: int(new_user[idx]) for raw, idx in m.user_vocab.items() if keep_user[idx]}
    item_vocab = {raw: int(new_item[idx]) for raw, idx in m.item_vocab.items() if keep_item[idx]}
    return InteractionMatrix(
        user_count=int(keep_user.sum()),
        item_count=int(keep_item.sum()),
        users=new_user[users],
        items=new_item[items],
        user_vocab=user_vocab,
        item_vocab=item_vocab,
        timestamps=stamps,
    )


def _train_from_mask(m: InteractionMatrix, test_mask: np.ndarray) -> tuple[InteractionMatrix, dict[int, list[int]]]:
    """Split rows by mask, keeping the full vocabularies on the train side."""
    train = InteractionMatrix(
        user_count=m.user_count,
        item_count=m.item_count,
        users=m.users[~test_mask],
        items=m.items[~test_mask],
        user_vocab=m.user_vocab,
        item_vocab=m.item_vocab,
        timestamps=m.timestamps[~test_mask] if m.timestamps is not None else None,
    )
    test: dict[int, list[int]] = {}
    for u, i in zip(m.users[test_mask].tolist(), m.items[test_mask].tolist()):
        test.setdefault(u, []).append(i)
    return train, test


def split(m: InteractionMatrix, spec: SplitSpec) -> tuple[InteractionMatrix, dict[int, list[int]]]:
    """Partition interactions into train and a per-user test map.

    The train matrix keeps the original vocabularies and dimensions so that
    indices stay valid across the pipeline. Users that cannot satisfy the
    protocol are excluded from the test map (their rows stay in train) and
    reported in the log.
    """
    rng = np.random.default_rng(spec.seed)
    n = len(m.users)
    test_mask = np.zeros(n, dtype=bool)

    if spec.protocol == "random-half":
        order = rng.permutation(n)
        test_mask[order[: n // 2]] = True
    elif spec.protocol == "per-user-holdout":
        counts = m.user_interaction_counts()
        skipped = 0
        for u in range(m.user_count):
            rows = np.flatnonzero(m.users == u)
            if counts[u] <= spec.n_test:
                skipped += 1
                continue
            test_mask[rng.choice(rows, size=spec.n_test, replace=False)] = True
        if skipped:
            log.info("split: %d users had <= %d interactions and keep all rows in train", skipped, spec.n_test)
    else:  # leave-one-out
        singletons = 0
        for u in range(m.user_count):
            rows = np.flatnonzero(m.users == u)
            if len(rows) == 0:
                continue
            if len(rows) == 1:
                singletons += 1
            if m.timestamps is not None:
                latest = rows[int(np.argmax(m.timestamps[rows]))]
            else:
                latest = rows[-1]
            test_mask[latest] = True
        if singletons:
            log.info("split: %d users had a single interaction; they are test-only", singletons)

    return _train_from_mask(m, test_mask)


def write_split_manifest(path, train: InteractionMatrix, test: dict[int, list[int]]) -> None:
    """Persist a split as (user_index, item_index, fold) lines."""
    with open(path, "w", encoding="utf-8") as out:
        for u, i in zip(train.users.tolist(), train.items.tolist()):
            out.write(f"{u}\t{i}\ttrain\n")
        for u in sorted(test):
            for i in test[u]:
                out.write(f"{u}\t{i}\ttest\n")


def read_split_manifest(path, m: InteractionMatrix) -> tuple[InteractionMatrix, dict[int, list[int]]]:
    """Rebuild a (train, test) split from a manifest written against ``m``."""
    pair_rows = {(int(u), int(i)): r for r, (u, i) in enumerate(zip(m.users, m.items))}
    test_mask = np.zeros(len(m.users), dtype=bool)
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, line in enumerate(handle, start=1):
            parts = line.split()
            if len(parts) != 3:
                raise DataError(f"{path}:{lineno}: expected 'user item fold'")
            key = (int(parts[0]), int(parts[1]))
            if key not in pair_rows:
                raise DataError(f"{path}:{lineno}: pair {key} not in matrix")
            if parts[2] == "test":
                test_mask[pair_rows[key]] = True
    return _train_from_mask(m, test_mask)


def _draw_negatives(
    train: InteractionMatrix,
    users: np.ndarray,
    rng: np.random.Generator,
    rejection_rounds: int = 8,
) -> np.ndarray:
    """Uniform negatives for each user, re-drawn on positive collisions.

    After a few rejection rounds the stubborn rows (users with almost every
    item positive) fall back to sampling their exact complement.
    """
    neg = rng.integers(0, train.item_count, size=len(users))
    bad = train.contains(users, neg)
    for _ in range(rejection_rounds):
        if not bad.any():
            break
        neg[bad] = rng.integers(0, train.item_count, size=int(bad.sum()))
        bad = train.contains(users, neg)
    for row in np.flatnonzero(bad):
        mask = np.ones(train.item_count, dtype=bool)
        mask[train.items_of_user(int(users[row]))] = False
        pool = np.flatnonzero(mask)
        neg[row] = rng.choice(pool)
    return neg


def sample_triplet_arrays(
    train: InteractionMatrix,
    per_positive: int = 1,
    seed: int = 0,
    shuffle: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Array-valued triplet sample: one pass over positives, uniform negatives.

    Users who interacted with every item are skipped with a warning. Returns
    (users, positive items, negative items) of equal length.
    """
    if per_positive < 1:
        raise DataError("per_positive must be >= 1")
    counts = train.user_interaction_counts()
    saturated = np.flatnonzero(counts >= train.item_count)
    keep = ~np.isin(train.users, saturated)
    if saturated.size:
        log.warning("triplet sampling: skipped %d saturated users", saturated.size)
    users = np.repeat(train.users[keep], per_positive)
    pos = np.repeat(train.items[keep], per_positive)
    rng = np.random.default_rng(seed)
    if shuffle:
        order = rng.permutation(len(users))
        users, pos = users[order], pos[order]
    neg = _draw_negatives(train, users, rng)
    return users, pos, neg


def sample_global_triplets(
    train: InteractionMatrix,
    per_positive: int = 1,
    seed: int = 0,
) -> Iterator[Triplet]:
    """Stream (user, positive, negative) training triplets."""
    users, pos, neg = sample_triplet_arrays(train, per_positive, seed, shuffle=False)
    for u, p, q in zip(users.tolist(), pos.tolist(), neg.tolist()):
        yield Triplet(u, p, q)


def sample_loo_negatives(
    train: InteractionMatrix,
    user: int,
    count: int,
    seed: int = 0,
    exclude: Sequence[int] = (),
) -> list[int]:
    """Distinct items the user never interacted with, uniformly sampled.

    ``exclude`` removes additional items from the pool (the held-out test
    positive in the leave-one-out protocol).
    """
    if count < 0:
        raise DataError("count must be >= 0")
    if count == 0:
        return []
    observed = np.zeros(train.item_count, dtype=bool)
    observed[train.items_of_user(user)] = True
    for i in exclude:
        observed[i] = True
    pool = np.flatnonzero(~observed)
    if len(pool) < count:
        raise DataError(f"user {user}: only {len(pool)} unobserved items, need {count}")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(pool, size=count, replace=False)).tolist()
