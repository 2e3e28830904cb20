"""Top-N accuracy metrics and the evaluation protocol drivers.

Per-user metrics take the ordered recommendation list Q and the ground
truth set G. NDCG uses the hit-restricted discounted sum (1/log2(rank+1)
over recommended items that are in G); with a single test positive this
is the usual 0-or-1/log2(rank+1) value. Users with empty ground truth are
skipped and counted, never averaged as zeros.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import InteractionMatrix, sample_loo_negatives
from .errors import DataError
from .recommend import RecommendConfig, Recommender

log = logging.getLogger(__name__)

METRIC_NAMES = ("recall", "precision", "hit_rate", "arhr", "ndcg")


def recall(recommended, relevant) -> float:
    """|Q ∩ G| / |G|; the caller must skip users with empty G."""
    relevant = set(relevant)
    if not relevant:
        raise DataError("recall undefined for empty ground truth")
    hits = sum(1 for i in recommended if i in relevant)
    return hits / len(relevant)


def precision(recommended, relevant) -> float:
    """|Q ∩ G| / |Q|; an empty Q scores 0 with a warning."""
    if len(recommended) == 0:
        log.warning("precision of an empty recommendation list is 0")
        return 0.0
    relevant = set(relevant)
    hits = sum(1 for i in recommended if i in relevant)
    return hits / len(recommended)


def hit_rate(recommended, relevant) -> int:
    """1 when at least one recommended item is relevant, else 0."""
    relevant = set(relevant)
    return 1 if any(i in relevant for i in recommended) else 0


def arhr(recommended, relevant) -> float:
    """Sum of reciprocal ranks over hits; ranks start at 1."""
    relevant = set(relevant)
    return sum(1.0 / rank for rank, i in enumerate(recommended, start=1) if i in relevant)


def ndcg_hits(recommended, relevant) -> float:
    """Sum of 1/log2(rank+1) over hits; ranks start at 1."""
    relevant = set(relevant)
    return sum(1.0 / math.log2(rank + 1) for rank, i in enumerate(recommended, start=1) if i in relevant)


def all_metrics(recommended, relevant) -> dict[str, float]:
    return {
        "recall": recall(recommended, relevant),
        "precision": precision(recommended, relevant),
        "hit_rate": float(hit_rate(recommended, relevant)),
        "arhr": arhr(recommended, relevant),
        "ndcg": ndcg_hits(recommended, relevant),
    }


@dataclass
class EvalResult:
    """Mean metrics per (representation tag, N) cell plus the config echo."""

    tag: str
    N: int
    K: int
    means: dict[str, float]
    user_count: int
    skipped_users: int
    config: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"tag": self.tag, "N": self.N, "K": self.K,
               "users": self.user_count, "skipped": self.skipped_users}
        out.update({k: self.means[k] for k in METRIC_NAMES})
        return out


def evaluate_topn(
    test: dict[int, list[int]],
    recommender: Recommender,
    tag: str,
    Ns: tuple[int, ...] = (5, 10, 15, 20, 25, 30),
    K: int = 2,
    exclude_train_positives: bool = True,
) -> list[EvalResult]:
    """Mean per-user metrics for every N, scoring each user's top max(N) once.

    Users whose entire ground truth falls outside the candidate clusters
    still contribute zeros; only users with no test items at all are skipped.
    """
    Ns = tuple(sorted(Ns))
    top = max(Ns)
    cfg = RecommendConfig(K=K, N=top, scorer=recommender.scorer.kind,
                          exclude_train_positives=exclude_train_positives)
    sums = {n: {name: 0.0 for name in METRIC_NAMES} for n in Ns}
    counted = 0
    skipped = 0
    for user in sorted(test):
        relevant = set(test[user])
        if not relevant:
            skipped += 1
            continue
        counted += 1
        full = recommender.recommend(user, cfg).item_ids()
        for n in Ns:
            for name, value in all_metrics(full[:n], relevant).items():
                sums[n][name] += value
    if counted == 0:
        raise DataError("no users with ground truth to evaluate")
    if skipped:
        log.info("evaluate_topn: skipped %d users with empty ground truth", skipped)
    return [
        EvalResult(tag=tag, N=n, K=K,
                   means={name: sums[n][name] / counted for name in METRIC_NAMES},
                   user_count=counted, skipped_users=skipped)
        for n in Ns
    ]


def evaluate_loo(
    test: dict[int, list[int]],
    recommender: Recommender,
    train: InteractionMatrix,
    negatives: int = 99,
    topk: int = 10,
    seed: int = 0,
) -> tuple[float, float]:
    """Leave-one-out HR@topk and NDCG@topk over sampled negative candidates.

    Each user's held-out positive is ranked among ``negatives`` sampled
    unobserved items; users without enough unobserved items are skipped.
    """
    hr_sum = 0.0
    ndcg_sum = 0.0
    counted = 0
    for user in sorted(test):
        if not test[user]:
            continue
        positive = test[user][0]
        try:
            negs = sample_loo_negatives(train, user, negatives,
                                        seed=seed * 1_000_003 + user, exclude=test[user])
        except DataError:
            continue
        candidates = np.array(negs + [positive], dtype=np.int64)
        ranked = recommender.rank_fixed_candidates(user, candidates)
        rank = 1 + next(k for k, (item, _) in enumerate(ranked) if item == positive)
        counted += 1
        if rank <= topk:
            hr_sum += 1.0
            ndcg_sum += 1.0 / math.log2(rank + 1)
    if counted == 0:
        raise DataError("leave-one-out evaluation had no usable users")
    return hr_sum / counted, ndcg_sum / counted


def coverage_recall(
    test: dict[int, list[int]],
    recommender: Recommender,
    tag: str,
    Ks: tuple[int, ...] = (1, 2, 3, 4, 5),
    N: int = 20,
    exclude_train_positives: bool = True,
) -> list[tuple[int, float]]:
    """Recall@N restricted to the top-K candidate clusters, per K."""
    curve = []
    for K in Ks:
        result = evaluate_topn(test, recommender, tag, Ns=(N,), K=K,
                               exclude_train_positives=exclude_train_positives)[0]
        curve.append((K, result.means["recall"]))
    return curve


def write_results_table(path, results: list[EvalResult]) -> None:
    """Delimited table: one row per (tag, N) cell."""
    cols = ["tag", "N", "K", "users", "skipped", *METRIC_NAMES]
    with open(path, "w", encoding="utf-8") as out:
        out.write("\t".join(cols) + "\n")
        for res in results:
            row = res.row()
            out.write("\t".join(
                f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c]) for c in cols
            ) + "\n")
