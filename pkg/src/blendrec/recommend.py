"""Coarse-to-fine top-N recommendation over the cluster index.

The coarse step embeds the user in the index's representation space and
shortlists the K nearest item clusters; the fine step scores the union of
their inverted lists with the attention scorer (or a single representation
model) and returns the N best. Ties always break toward the lower item id,
and for distance-style scorers the reported score is the negated squared
Euclidean distance so that higher is uniformly better.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .clusterindex import ClusterIndex, top_k_clusters
from .corpus import InteractionMatrix
from .errors import ConfigError, DataError
from .fusion import AttentionModel, AttentionScorer
from .towers import RepresentationModel

log = logging.getLogger(__name__)

SCORER_FOR_LOSS = {"product": "dot", "distance": "euclidean"}


@dataclass
class RecommendConfig:
    K: int = 2
    N: int = 10
    scorer: str = "euclidean"
    exclude_train_positives: bool = True

    def __post_init__(self) -> None:
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if self.scorer not in ("dot", "euclidean"):
            raise ConfigError(f"unknown scorer {self.scorer!r}")


@dataclass
class RecommendationList:
    user: int
    items: list[tuple[int, float]]
    candidate_count: int

    def item_ids(self) -> list[int]:
        return [i for i, _ in self.items]


class RepresentationScorer:
    """Scores a single representation space: dot product or negated distance."""

    def __init__(self, model: RepresentationModel) -> None:
        self.model = model
        self.kind = SCORER_FOR_LOSS[model.loss_kind]
        self.item_embs = model.embed_all_items().astype(np.float64)
        self.user_embs = model.embed_all_users().astype(np.float64)

    def score_items(self, user: int, items: np.ndarray) -> np.ndarray:
        u = self.user_embs[user]
        vecs = self.item_embs[np.asarray(items, dtype=np.int64)]
        if self.kind == "dot":
            return vecs @ u
        return -np.sum(np.square(vecs - u), axis=-1)


def make_scorer(model) -> "AttentionScorer | RepresentationScorer":
    if isinstance(model, AttentionModel):
        return AttentionScorer(model)
    if isinstance(model, RepresentationModel):
        return RepresentationScorer(model)
    raise ConfigError(f"cannot build a scorer from {type(model).__name__}")


def rank_items(scorer, user: int, candidates: np.ndarray) -> list[tuple[int, float]]:
    """Score candidates and sort by descending score, lower item id on ties."""
    candidates = np.asarray(candidates, dtype=np.int64)
    scores = scorer.score_items(user, candidates)
    order = np.lexsort((candidates, -scores))
    return [(int(candidates[k]), float(scores[k])) for k in order]


class Recommender:
    """Frozen retrieval artifacts bundled for serving and evaluation."""

    def __init__(self, index: ClusterIndex, coarse_model: RepresentationModel,
                 scorer_model, train: InteractionMatrix | None = None) -> None:
        if index.space_tag != coarse_model.tag:
            raise ConfigError(
                f"index built in space {index.space_tag!r}, got coarse model {coarse_model.tag!r}"
            )
        self.index = index
        self.scorer = make_scorer(scorer_model)
        self.coarse_user_embs = coarse_model.embed_all_users().astype(np.float64)
        self.train = train
        self.scored_items_total = 0

    def candidate_items(self, user: int, K: int) -> np.ndarray:
        clusters = top_k_clusters(self.index, self.coarse_user_embs[user], K)
        return self.index.candidate_items(clusters)

    def recommend(self, user: int, cfg: RecommendConfig) -> RecommendationList:
        """Coarse-to-fine top-N for one user."""
        if cfg.K > self.index.M:
            raise ConfigError(f"K={cfg.K} exceeds cluster count {self.index.M}")
        if cfg.scorer != self.scorer.kind:
            raise ConfigError(f"config scorer {cfg.scorer!r} != model scorer {self.scorer.kind!r}")
        candidates = self.candidate_items(user, cfg.K)
        if cfg.exclude_train_positives:
            if self.train is None:
                raise ConfigError("exclude_train_positives needs the training matrix")
            candidates = np.setdiff1d(candidates, self.train.items_of_user(user), assume_unique=False)
        if len(candidates) == 0:
            log.warning("user %d: empty candidate set", user)
            return RecommendationList(user, [], 0)
        self.scored_items_total += len(candidates)
        ranked = rank_items(self.scorer, user, candidates)
        return RecommendationList(user, ranked[: cfg.N], len(candidates))

    def rank_fixed_candidates(self, user: int, candidates) -> list[tuple[int, float]]:
        """Attentive ranking of an explicit candidate list (no coarse step)."""
        candidates = np.asarray(candidates, dtype=np.int64)
        if len(candidates) == 0:
            raise DataError("candidate list is empty")
        return rank_items(self.scorer, user, candidates)


def write_recommendations(path, lists: list[RecommendationList], id_of_item=None, id_of_user=None) -> None:
    """Batch output: one line per (user, rank, item, score)."""
    id_of_item = id_of_item or (lambda i: i)
    id_of_user = id_of_user or (lambda u: u)
    with open(path, "w", encoding="utf-8") as out:
        for rl in lists:
            for rank, (item, score) in enumerate(rl.items, start=1):
                out.write(f"{id_of_user(rl.user)}\t{rank}\t{id_of_item(item)}\t{score:.6f}\n")
