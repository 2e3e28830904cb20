"""Item clustering, the inverted-file index, and cluster-local triplet mining.

Items are clustered with k-means in one frozen global representation space.
The index stores centroids plus per-cluster inverted lists and answers
nearest-cluster queries for user vectors. Local training triplets are mined
inside a user's nearest candidate clusters: same-cluster pairs must have the
positive farther from the user than the negative, cross-cluster pairs must
have the positive's cluster farther than the negative's.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass

import numpy as np

from .corpus import InteractionMatrix
from .errors import DataError
from .towers import RepresentationModel, TrainConfig, _TripletTrainer, new_representation_model

log = logging.getLogger(__name__)

KMEANS_MAX_ITER = 50
KMEANS_REL_TOL = 1e-4
INDEX_FORMAT = "blendrec-index/1"


@dataclass
class KMeansResult:
    centroids: np.ndarray
    assignments: np.ndarray
    objective_history: list[float]


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, clamped at zero."""
    p2 = np.sum(points * points, axis=1)[:, None]
    c2 = np.sum(centroids * centroids, axis=1)[None, :]
    d2 = p2 + c2 - 2.0 * points @ centroids.T
    return np.maximum(d2, 0.0)


def _plus_plus_seeds(points: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    n = len(points)
    chosen = np.empty(M, dtype=np.int64)
    chosen[0] = rng.integers(n)
    d2 = np.sum(np.square(points - points[chosen[0]]), axis=1)
    for k in range(1, M):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            remaining = np.setdiff1d(np.arange(n), chosen[:k])
            idx = rng.choice(remaining)
        chosen[k] = idx
        d2 = np.minimum(d2, np.sum(np.square(points - points[idx]), axis=1))
    return points[chosen].copy()


def _fix_empty_clusters(points, centroids, assignments, d2) -> None:
    """Reseed empty clusters to the point farthest from its own centroid.

    Reseeding can only lower a point's cost, so the recorded objective stays
    non-increasing. Bounded at M rounds to survive degenerate duplicates.
    """
    for _ in range(len(centroids)):
        counts = np.bincount(assignments, minlength=len(centroids))
        empty = np.flatnonzero(counts == 0)
        if len(empty) == 0:
            return
        j = int(empty[0])
        owned = d2[np.arange(len(points)), assignments]
        far = int(np.argmax(owned))
        centroids[j] = points[far]
        assignments[far] = j
        d2[:, j] = np.sum(np.square(points - centroids[j]), axis=1)


def kmeans(points: np.ndarray, M: int, seed: int = 0) -> KMeansResult:
    """Lloyd iterations with k-means++ seeding.

    Stops when the relative centroid movement drops below 1e-4 or after 50
    iterations. The recorded objective (sum of squared distances after each
    assignment) is non-increasing; empty clusters are reseeded to the point
    currently farthest from its assigned centroid.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if M < 1 or M > n:
        raise DataError(f"cluster count {M} must be in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = _plus_plus_seeds(points, M, rng)
    history: list[float] = []

    for _ in range(KMEANS_MAX_ITER):
        d2 = _sq_distances(points, centroids)
        assignments = np.argmin(d2, axis=1)
        _fix_empty_clusters(points, centroids, assignments, d2)
        history.append(float(d2[np.arange(n), assignments].sum()))
        new_centroids = centroids.copy()
        for j in range(M):
            members = points[assignments == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        movement = np.linalg.norm(new_centroids - centroids) / (np.linalg.norm(centroids) + 1e-12)
        centroids = new_centroids
        if movement < KMEANS_REL_TOL:
            break

    d2 = _sq_distances(points, centroids)
    assignments = np.argmin(d2, axis=1)
    _fix_empty_clusters(points, centroids, assignments, d2)
    history.append(float(d2[np.arange(n), assignments].sum()))
    return KMeansResult(centroids, assignments, history)


class ClusterIndex:
    """Centroids plus inverted item lists in one representation space."""

    def __init__(self, centroids: np.ndarray, inverted_lists: list[np.ndarray],
                 space_tag: str, seed: int = 0) -> None:
        self.centroids = np.asarray(centroids, dtype=np.float64)
        self.inverted_lists = [np.asarray(lst, dtype=np.int64) for lst in inverted_lists]
        self.space_tag = space_tag
        self.seed = seed
        self.objective_history: list[float] | None = None
        sizes = sum(len(lst) for lst in self.inverted_lists)
        joined = np.sort(np.concatenate(self.inverted_lists)) if self.inverted_lists else np.empty(0, dtype=np.int64)
        if sizes == 0 or not np.array_equal(joined, np.arange(sizes)):
            raise DataError("inverted lists must partition the item index range")
        self.item_count = sizes
        self._cluster_of = np.empty(sizes, dtype=np.int64)
        for j, lst in enumerate(self.inverted_lists):
            self._cluster_of[lst] = j

    @property
    def M(self) -> int:
        return len(self.inverted_lists)

    def cluster_of(self, item) -> np.ndarray:
        return self._cluster_of[item]

    def candidate_items(self, cluster_ids) -> np.ndarray:
        """Sorted union of the inverted lists for the given clusters."""
        if len(cluster_ids) == 0:
            return np.empty(0, dtype=np.int64)
        return np.sort(np.concatenate([self.inverted_lists[int(c)] for c in cluster_ids]))


def build_index(model: RepresentationModel, M: int, seed: int = 0) -> ClusterIndex:
    """Embed every item in the model's space, cluster, and fill the lists."""
    points = model.embed_all_items().astype(np.float64)
    result = kmeans(points, M, seed)
    lists = [np.flatnonzero(result.assignments == j) for j in range(M)]
    index = ClusterIndex(result.centroids, lists, space_tag=model.tag, seed=seed)
    index.objective_history = result.objective_history
    return index


def top_k_clusters(index: ClusterIndex, u_vec: np.ndarray, K: int) -> np.ndarray:
    """IDs of the K nearest clusters by Euclidean distance, ties to lower id."""
    if K < 1 or K > index.M:
        raise DataError(f"K={K} out of range [1, {index.M}]")
    d2 = np.sum(np.square(index.centroids - np.asarray(u_vec, dtype=np.float64)), axis=1)
    return np.argsort(d2, kind="stable")[:K]


class TripletArrays:
    """Column-oriented triplet storage (users, positives, negatives)."""

    __slots__ = ("users", "pos", "neg")

    def __init__(self, users, pos, neg) -> None:
        self.users = np.asarray(users, dtype=np.int64)
        self.pos = np.asarray(pos, dtype=np.int64)
        self.neg = np.asarray(neg, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.users)

    def as_tuples(self) -> list[tuple[int, int, int]]:
        return list(zip(self.users.tolist(), self.pos.tolist(), self.neg.tolist()))

    @classmethod
    def empty(cls) -> "TripletArrays":
        return cls(np.empty(0), np.empty(0), np.empty(0))

    @classmethod
    def concatenate(cls, parts: list["TripletArrays"]) -> "TripletArrays":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty()
        return cls(
            np.concatenate([p.users for p in parts]),
            np.concatenate([p.pos for p in parts]),
            np.concatenate([p.neg for p in parts]),
        )

    def take(self, idx: np.ndarray) -> "TripletArrays":
        return TripletArrays(self.users[idx], self.pos[idx], self.neg[idx])


@dataclass
class LocalTripletSets:
    intra: TripletArrays
    inter: TripletArrays
    skipped_users: int = 0

    def __len__(self) -> int:
        return len(self.intra) + len(self.inter)


def mine_local_triplets(
    global_model: RepresentationModel,
    index: ClusterIndex,
    train: InteractionMatrix,
    J: int = 5,
    seed: int = 0,
    per_positive: int = 1,
    exhaustive: bool = False,
) -> LocalTripletSets:
    """Mine intra/inter triplets inside each user's J nearest clusters.

    Every candidate pair takes the positive from the user's interactions and
    the negative from non-interacted items of the candidate clusters. Pairs
    inside one cluster are kept when the positive item is strictly farther
    from the user than the negative item; pairs across clusters are kept
    when the positive's centroid is strictly farther than the negative's.
    ``exhaustive`` enumerates every legal pair instead of sampling.
    """
    if index.space_tag != global_model.tag:
        raise DataError(f"index space {index.space_tag!r} != model {global_model.tag!r}")
    if J < 1 or J > index.M:
        raise DataError(f"J={J} out of range [1, {index.M}]")
    rng = np.random.default_rng(seed)
    user_vecs = global_model.embed_all_users().astype(np.float64)
    item_vecs = global_model.embed_all_items().astype(np.float64)

    cluster_d2 = _sq_distances(user_vecs, index.centroids)
    intra_parts: list[TripletArrays] = []
    inter_parts: list[TripletArrays] = []
    skipped = 0

    for u in range(train.user_count):
        cand_clusters = np.argsort(cluster_d2[u], kind="stable")[:J]
        cand_mask = np.zeros(index.M, dtype=bool)
        cand_mask[cand_clusters] = True
        positives = train.items_of_user(u)
        pos_cand = positives[cand_mask[index.cluster_of(positives)]]
        if len(pos_cand) == 0:
            skipped += 1
            continue
        pool_mask = np.zeros(train.item_count, dtype=bool)
        for c in cand_clusters:
            pool_mask[index.inverted_lists[c]] = True
        pool_mask[positives] = False
        pool = np.flatnonzero(pool_mask)
        if len(pool) == 0:
            skipped += 1
            continue

        if exhaustive:
            pos_rep = np.repeat(pos_cand, len(pool))
            neg_rep = np.tile(pool, len(pos_cand))
        else:
            pos_rep = np.repeat(pos_cand, per_positive)
            neg_rep = rng.choice(pool, size=len(pos_rep), replace=True)

        item_d2 = np.sum(np.square(item_vecs[np.concatenate([pos_rep, neg_rep])] - user_vecs[u]), axis=1)
        pos_d2, neg_d2 = item_d2[: len(pos_rep)], item_d2[len(pos_rep):]
        pos_cl = index.cluster_of(pos_rep)
        neg_cl = index.cluster_of(neg_rep)
        same = pos_cl == neg_cl

        keep_intra = same & (pos_d2 > neg_d2)
        cent_pos = cluster_d2[u][pos_cl]
        cent_neg = cluster_d2[u][neg_cl]
        keep_inter = ~same & (cent_pos > cent_neg)

        if keep_intra.any():
            intra_parts.append(TripletArrays(np.full(int(keep_intra.sum()), u), pos_rep[keep_intra], neg_rep[keep_intra]))
        if keep_inter.any():
            inter_parts.append(TripletArrays(np.full(int(keep_inter.sum()), u), pos_rep[keep_inter], neg_rep[keep_inter]))

    if skipped:
        log.info("mining: skipped %d users without positives or pool in candidate clusters", skipped)
    return LocalTripletSets(
        TripletArrays.concatenate(intra_parts),
        TripletArrays.concatenate(inter_parts),
        skipped_users=skipped,
    )


class _LocalTrainer(_TripletTrainer):
    """Epochs draw a balanced 1:1 interleave from the mined pools."""

    hard_mining = False

    def __init__(self, model, train, cfg, pools, val: TripletArrays, epoch_size: int) -> None:
        super().__init__(model, train, cfg)
        self.pools = pools
        self.val = val
        self.epoch_size = epoch_size

    def epoch_triplets(self, rng):
        intra, inter = self.pools
        half = max(1, self.epoch_size // 2)
        parts = []
        for pool in (intra, inter):
            if len(pool) == 0:
                continue
            idx = rng.integers(0, len(pool), size=half) if len(pool) < half else rng.choice(len(pool), size=half, replace=False)
            parts.append(pool.take(idx))
        drawn = TripletArrays.concatenate(parts)
        order = rng.permutation(len(drawn))
        drawn = drawn.take(order)
        return drawn.users, drawn.pos, drawn.neg

    def fixed_validation(self, rng):
        return self.val.users, self.val.pos, self.val.neg


def train_local(
    m: InteractionMatrix,
    sets: LocalTripletSets,
    loss_kind: str,
    cfg: TrainConfig | None = None,
    dim: int = 64,
) -> RepresentationModel:
    """Train a fresh two-tower model on the mined local triplet sets."""
    cfg = cfg or TrainConfig()
    if len(sets) == 0:
        raise DataError("local triplet sets are empty")
    model = new_representation_model(m.user_count, m.item_count, loss_kind,
                                     source_kind="local", dim=dim, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    # Fixed validation slice: 5% of each pool, remainder is the sampling pool.
    train_pools = []
    val_parts = []
    for pool in (sets.intra, sets.inter):
        if len(pool) == 0:
            train_pools.append(pool)
            continue
        n_val = max(1, int(round(0.05 * len(pool)))) if len(pool) > 1 else 0
        idx = rng.permutation(len(pool))
        val_parts.append(pool.take(idx[:n_val]))
        train_pools.append(pool.take(idx[n_val:]))
    val = TripletArrays.concatenate(val_parts) if val_parts else TripletArrays.concatenate([sets.intra, sets.inter])
    epoch_size = max(len(train_pools[0]) + len(train_pools[1]), 2)

    trainer = _LocalTrainer(model, m, cfg, (train_pools[0], train_pools[1]), val, epoch_size)
    trainer.run()
    return model


def save_index(index: ClusterIndex, prefix: str) -> None:
    """Write manifest JSON plus centroid floats and length-prefixed lists."""
    with open(f"{prefix}.bin", "wb") as blob:
        blob.write(np.ascontiguousarray(index.centroids, dtype="<f4").tobytes())
        for lst in index.inverted_lists:
            blob.write(struct.pack("<I", len(lst)))
            blob.write(np.ascontiguousarray(lst, dtype="<u4").tobytes())
    manifest = {
        "format": INDEX_FORMAT,
        "M": index.M,
        "dim": int(index.centroids.shape[1]),
        "space_tag": index.space_tag,
        "seed": index.seed,
        "item_count": index.item_count,
    }
    with open(f"{prefix}.json", "w", encoding="utf-8") as out:
        json.dump(manifest, out, indent=1, sort_keys=True)


def load_index(prefix: str) -> ClusterIndex:
    with open(f"{prefix}.json", "r", encoding="utf-8") as handle:
        manifest = json.load(handle)
    if manifest.get("format") != INDEX_FORMAT:
        raise DataError(f"unknown index format {manifest.get('format')!r}")
    M, dim = manifest["M"], manifest["dim"]
    with open(f"{prefix}.bin", "rb") as blob:
        centroids = np.frombuffer(blob.read(M * dim * 4), dtype="<f4").reshape(M, dim).astype(np.float64)
        lists = []
        for _ in range(M):
            (length,) = struct.unpack("<I", blob.read(4))
            lists.append(np.frombuffer(blob.read(4 * length), dtype="<u4").astype(np.int64))
    return ClusterIndex(centroids, lists, manifest["space_tag"], manifest["seed"])
