"""Shared fixtures: toy corpora and small trained artifact bundles."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import pytest

from blendrec import clusterindex, corpus, fusion, towers

REPO_ROOT = Path(__file__).resolve().parents[1]
ML100K_PATH = REPO_ROOT / "data" / "ml-100k" / "u.data"
AMAZON_PATH = REPO_ROOT / "data" / "amazon" / "movies_tv_slice.tsv.gz"
CACHE_DIR = REPO_ROOT / ".acceptance_cache"


def make_block_matrix(n_users=40, n_items=48, blocks=4, extra=3, seed=0) -> corpus.InteractionMatrix:
    """Synthetic matrix with planted block structure (learnable preferences).

    Users in block b interact mostly with items in block b plus a few
    uniform off-block items, which gives triplet training a real signal.
    """
    rng = np.random.default_rng(seed)
    users, items = [], []
    seen = set()
    per_block_items = n_items // blocks
    for u in range(n_users):
        b = u % blocks
        block_items = np.arange(b * per_block_items, (b + 1) * per_block_items)
        picks = rng.choice(block_items, size=min(6, per_block_items), replace=False)
        off = rng.choice(n_items, size=extra, replace=False)
        for i in np.concatenate([picks, off]):
            if (u, int(i)) not in seen:
                seen.add((u, int(i)))
                users.append(u)
                items.append(int(i))
    return corpus.InteractionMatrix(
        user_count=n_users,
        item_count=n_items,
        users=np.array(users),
        items=np.array(items),
        user_vocab={f"u{u}": u for u in range(n_users)},
        item_vocab={f"i{i}": i for i in range(n_items)},
    )


def write_matrix_tsv(m: corpus.InteractionMatrix, path, with_timestamps=True, seed=0) -> None:
    rng = np.random.default_rng(seed)
    rev_u = {v: k for k, v in m.user_vocab.items()}
    rev_i = {v: k for k, v in m.item_vocab.items()}
    with open(path, "w", encoding="utf-8") as out:
        for u, i in zip(m.users.tolist(), m.items.tolist()):
            stamp = f"\t{rng.integers(1, 10_000)}" if with_timestamps else ""
            out.write(f"{rev_u[u]}\t{rev_i[i]}\t1{stamp}\n")


@pytest.fixture(scope="session")
def block_matrix() -> corpus.InteractionMatrix:
    return make_block_matrix()


@pytest.fixture(scope="session")
def block_split(block_matrix):
    return corpus.split(block_matrix, corpus.SplitSpec("random-half", seed=5))


@pytest.fixture(scope="session")
def tiny_cfg() -> towers.TrainConfig:
    return towers.TrainConfig(batch_size=64, max_epochs=12, patience=4, seed=3)


@pytest.fixture(scope="session")
def tiny_bundle(block_split, tiny_cfg):
    """Small trained artifact set: models, index, mined sets, attention."""
    train, test = block_split
    gd = towers.train_global(train, "distance", tiny_cfg, dim=16)
    gp = towers.train_global(train, "product", tiny_cfg, dim=16)
    index = clusterindex.build_index(gd, M=4, seed=9)
    sets = clusterindex.mine_local_triplets(gd, index, train, J=2, seed=9)
    ld = clusterindex.train_local(train, sets, "distance", tiny_cfg, dim=16)
    lp = clusterindex.train_local(train, sets, "product", tiny_cfg, dim=16)
    ad = fusion.train_attention(train, [gd, gp, ld, lp], sets, "distance", tiny_cfg, tag="AD")
    ap = fusion.train_attention(train, [gd, gp, ld, lp], sets, "product", tiny_cfg, tag="AP")
    return {
        "train": train, "test": test, "GD": gd, "GP": gp, "LD": ld, "LP": lp,
        "index": index, "sets": sets, "AD": ad, "AP": ap,
    }


def require_ml100k():
    if not ML100K_PATH.exists():
        pytest.skip(f"MovieLens-100k file missing at {ML100K_PATH}")


def require_amazon():
    if not AMAZON_PATH.exists():
        pytest.skip(f"Amazon slice missing at {AMAZON_PATH}")
