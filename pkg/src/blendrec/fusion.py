"""Representation-level attention: per-channel transforms and softmax fusion.

Each channel wraps one frozen representation model and owns a single
affine d x d map with ReLU. For a user-item pair the channel compatibility
is the dot product of the transformed user and item vectors; a softmax over
channels turns compatibilities into weights, and the blended user/item
vectors are the weight-averaged channel embeddings. Only the transform
parameters train; channel models stay frozen.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .clusterindex import LocalTripletSets, TripletArrays
from .corpus import InteractionMatrix, _draw_negatives
from .errors import DataError
from .tensornet import ParamTensor, glorot_uniform, load_tensors, save_tensors
from .towers import (
    LOSS_KINDS,
    RepresentationModel,
    TrainConfig,
    _TripletTrainer,
    loss_batch,
)

log = logging.getLogger(__name__)


@dataclass
class AttentiveTriple:
    user_blend: np.ndarray
    pos_blend: np.ndarray
    neg_blend: np.ndarray
    weights: np.ndarray


class AttentionModel:
    """Ordered frozen channels plus their trainable transforms."""

    def __init__(self, channels: list[RepresentationModel], loss_kind: str,
                 tag: str | None = None, seed: int = 0, dtype=np.float32) -> None:
        if len(channels) < 2:
            raise DataError("attention needs at least two channels")
        if loss_kind not in LOSS_KINDS:
            raise DataError(f"unknown loss kind {loss_kind!r}")
        dims = {ch.dim for ch in channels}
        if len(dims) != 1:
            raise DataError(f"channels disagree on dimension: {sorted(dims)}")
        self.channels = list(channels)
        self.loss_kind = loss_kind
        self.dim = channels[0].dim
        self.tag = tag or ("A" + loss_kind[0].upper())
        rng = np.random.default_rng(seed)
        self.transforms: list[ParamTensor] = []
        for r in range(len(channels)):
            w = ParamTensor(f"attn.w{r}", glorot_uniform(rng, self.dim, self.dim, dtype))
            b = ParamTensor(f"attn.b{r}", np.zeros(self.dim, dtype=dtype))
            self.transforms += [w, b]
        self.history = None

    @property
    def R(self) -> int:
        return len(self.channels)

    @property
    def params(self) -> list[ParamTensor]:
        """Trainable parameters: the transforms only, never the channels."""
        return self.transforms

    @property
    def channel_tags(self) -> list[str]:
        return [ch.tag for ch in self.channels]

    def transform_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (R, d, d) weights and (R, d) biases."""
        W = np.stack([self.transforms[2 * r].values for r in range(self.R)])
        b = np.stack([self.transforms[2 * r + 1].values for r in range(self.R)])
        return W, b

    # -- single-pair operations ----------------------------------------

    def channel_transform(self, r: int, vec: np.ndarray) -> np.ndarray:
        """Affine + ReLU of one channel's transform applied to ``vec``."""
        if not 0 <= r < self.R:
            raise DataError(f"channel index {r} out of range")
        vec = np.asarray(vec)
        if vec.shape[-1] != self.dim:
            raise DataError("vector dimension mismatch")
        W, b = self.transforms[2 * r].values, self.transforms[2 * r + 1].values
        return np.maximum(vec @ W + b, 0.0)

    def _pair_weights(self, gu: np.ndarray, gi: np.ndarray) -> np.ndarray:
        compat = np.empty(self.R, dtype=np.float64)
        for r in range(self.R):
            compat[r] = float(self.channel_transform(r, gu[r]) @ self.channel_transform(r, gi[r]))
        compat -= compat.max()
        e = np.exp(compat)
        return e / e.sum()

    def attention_weights(self, user: int, item: int) -> np.ndarray:
        """Softmax channel weights for a (user, candidate item) pair."""
        gu = np.stack([ch.embed_user(user) for ch in self.channels])
        gi = np.stack([ch.embed_item(item) for ch in self.channels])
        return self._pair_weights(gu, gi)

    def blend(self, user: int, pos_item: int, neg_item: int) -> AttentiveTriple:
        """Blend all three inputs with weights computed from (user, positive)."""
        gu = np.stack([ch.embed_user(user) for ch in self.channels])
        gp = np.stack([ch.embed_item(pos_item) for ch in self.channels])
        gn = np.stack([ch.embed_item(neg_item) for ch in self.channels])
        weights = self._pair_weights(gu, gp)
        return AttentiveTriple(weights @ gu, weights @ gp, weights @ gn, weights)


def _softmax_rows(c: np.ndarray) -> np.ndarray:
    """Softmax over the channel axis (axis 0) of a (R, B) array."""
    z = c - c.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


class _BatchAttention:
    """Vectorized forward/backward over (R, B, d) channel embeddings."""

    def __init__(self, model: AttentionModel) -> None:
        self.model = model

    def forward(self, gu, gp, gn=None):
        W, b = self.model.transform_arrays()
        pre_u = np.einsum("rbd,rde->rbe", gu, W, optimize=True) + b[:, None, :]
        pre_p = np.einsum("rbd,rde->rbe", gp, W, optimize=True) + b[:, None, :]
        tu = np.maximum(pre_u, 0.0)
        tp = np.maximum(pre_p, 0.0)
        compat = np.sum(tu * tp, axis=-1)
        alpha = _softmax_rows(compat)
        ub = np.einsum("rb,rbd->bd", alpha, gu, optimize=True)
        pb = np.einsum("rb,rbd->bd", alpha, gp, optimize=True)
        nb = None if gn is None else np.einsum("rb,rbd->bd", alpha, gn, optimize=True)
        cache = (gu, gp, gn, pre_u, pre_p, tu, tp, alpha)
        return ub, pb, nb, cache

    def backward(self, cache, d_ub, d_pb, d_nb, scale: float) -> None:
        model = self.model
        gu, gp, gn, pre_u, pre_p, tu, tp, alpha = cache
        d_alpha = np.einsum("bd,rbd->rb", d_ub, gu, optimize=True)
        d_alpha += np.einsum("bd,rbd->rb", d_pb, gp, optimize=True)
        if gn is not None and d_nb is not None:
            d_alpha += np.einsum("bd,rbd->rb", d_nb, gn, optimize=True)
        inner = np.sum(alpha * d_alpha, axis=0, keepdims=True)
        d_compat = alpha * (d_alpha - inner)
        d_tu = d_compat[:, :, None] * tp
        d_tp = d_compat[:, :, None] * tu
        d_pre_u = np.where(pre_u > 0.0, d_tu, 0.0)
        d_pre_p = np.where(pre_p > 0.0, d_tp, 0.0)
        dW = np.einsum("rbd,rbe->rde", gu, d_pre_u, optimize=True)
        dW += np.einsum("rbd,rbe->rde", gp, d_pre_p, optimize=True)
        db = d_pre_u.sum(axis=1) + d_pre_p.sum(axis=1)
        for r in range(model.R):
            model.transforms[2 * r].grad += dW[r] * scale
            model.transforms[2 * r + 1].grad += db[r] * scale


class _AttentionTrainer(_TripletTrainer):
    """Early-stopped loop drawing uniformly from the pooled triplet sources."""

    hard_mining = False

    def __init__(self, model: AttentionModel, train: InteractionMatrix, cfg: TrainConfig,
                 local_sets: LocalTripletSets | None) -> None:
        super().__init__(model, train, cfg)
        self.batch = _BatchAttention(model)
        self.user_embs = np.stack([ch.embed_all_users() for ch in model.channels]).astype(np.float64)
        self.item_embs = np.stack([ch.embed_all_items() for ch in model.channels]).astype(np.float64)
        rng = np.random.default_rng(cfg.seed)
        n = len(train)
        holdout = np.zeros(n, dtype=bool)
        n_val = max(1, int(round(0.05 * n)))
        if n_val < n:
            holdout[rng.choice(n, size=n_val, replace=False)] = True
        self._train_rows = ~holdout
        self._val_rows = holdout
        self._local_pools: list[TripletArrays] = []
        self._local_val: list[TripletArrays] = []
        for pool in ((local_sets.intra, local_sets.inter) if local_sets else ()):
            if len(pool) == 0:
                continue
            idx = rng.permutation(len(pool))
            n_pool_val = max(1, int(round(0.05 * len(pool)))) if len(pool) > 1 else 0
            self._local_val.append(pool.take(idx[:n_pool_val]))
            self._local_pools.append(pool.take(idx[n_pool_val:]))

    def epoch_triplets(self, rng):
        users = self.train.users[self._train_rows]
        pos = self.train.items[self._train_rows]
        neg = _draw_negatives(self.train, users, rng)
        pool = TripletArrays.concatenate(
            [TripletArrays(users, pos, neg)] + self._local_pools
        )
        budget = min(len(users), len(pool))
        take = rng.choice(len(pool), size=budget, replace=False)
        drawn = pool.take(take)
        return drawn.users, drawn.pos, drawn.neg

    def fixed_validation(self, rng):
        users = self.train.users[self._val_rows]
        pos = self.train.items[self._val_rows]
        neg = _draw_negatives(self.train, users, rng)
        val = TripletArrays.concatenate([TripletArrays(users, pos, neg)] + self._local_val)
        return val.users, val.pos, val.neg

    def _forward_loss(self, users, pos, neg):
        gu = self.user_embs[:, users, :]
        gp = self.item_embs[:, pos, :]
        gn = self.item_embs[:, neg, :]
        ub, pb, nb, cache = self.batch.forward(gu, gp, gn)
        losses, d_ub, d_pb, d_nb = loss_batch(self.model.loss_kind, ub, pb, nb, self.cfg.margin)
        return losses, (cache, d_ub, d_pb, d_nb)

    def validation_loss(self, val) -> float:
        losses, _ = self._forward_loss(*val)
        return float(np.mean(losses, dtype=np.float64))

    def _train_batch(self, users, pos, neg, rng) -> float:
        if len(users) == 0:
            return 0.0
        losses, (cache, d_ub, d_pb, d_nb) = self._forward_loss(users, pos, neg)
        scale = 1.0 / len(users)
        self.batch.backward(cache, d_ub, d_pb, d_nb, scale)
        self.optimizer.step()
        return float(np.mean(losses, dtype=np.float64))


def train_attention(
    m: InteractionMatrix,
    channels: list[RepresentationModel],
    local_sets: LocalTripletSets | None,
    loss_kind: str,
    cfg: TrainConfig | None = None,
    tag: str | None = None,
) -> AttentionModel:
    """Fit the transforms over frozen channels on pooled triplet sources."""
    cfg = cfg or TrainConfig()
    model = AttentionModel(channels, loss_kind, tag=tag, seed=cfg.seed)
    trainer = _AttentionTrainer(model, m, cfg, local_sets)
    trainer.run()
    return model


class AttentionScorer:
    """Frozen-model scorer for retrieval: one user against many items.

    Precomputes channel item embeddings and their transforms once; each
    (user, item) pair gets its own softmax weights with the candidate item
    in the positive slot, then the blended vectors are scored by dot
    product (product loss) or negated squared distance (distance loss).
    """

    def __init__(self, model: AttentionModel) -> None:
        self.model = model
        self.kind = "dot" if model.loss_kind == "product" else "euclidean"
        W, b = model.transform_arrays()
        self._W = W.astype(np.float64)
        self._b = b.astype(np.float64)
        self.item_embs = np.stack([ch.embed_all_items() for ch in model.channels]).astype(np.float64)
        self.item_trans = np.maximum(
            np.einsum("rmd,rde->rme", self.item_embs, self._W, optimize=True) + self._b[:, None, :], 0.0
        )
        self.user_embs = np.stack([ch.embed_all_users() for ch in model.channels]).astype(np.float64)
        self.user_trans = np.maximum(
            np.einsum("rnd,rde->rne", self.user_embs, self._W, optimize=True) + self._b[:, None, :], 0.0
        )

    def score_items(self, user: int, items: np.ndarray) -> np.ndarray:
        """Attentive scores of the given items for the user (higher = better)."""
        items = np.asarray(items, dtype=np.int64)
        gu = self.user_embs[:, user, :]
        tu = self.user_trans[:, user, :]
        ti = self.item_trans[:, items, :]
        gi = self.item_embs[:, items, :]
        compat = np.einsum("rcd,rd->rc", ti, tu, optimize=True)
        alpha = _softmax_rows(compat)
        ub = np.einsum("rc,rd->cd", alpha, gu, optimize=True)
        ib = np.einsum("rc,rcd->cd", alpha, gi, optimize=True)
        if self.kind == "dot":
            return np.sum(ub * ib, axis=-1)
        return -np.sum(np.square(ub - ib), axis=-1)


def save_attention(model: AttentionModel, prefix: str, channel_refs: list[dict] | None = None,
                   cfg: TrainConfig | None = None) -> None:
    """Persist transforms plus channel references (tag, path, content hash)."""
    meta = {
        "kind": "attention",
        "loss_kind": model.loss_kind,
        "tag": model.tag,
        "dim": model.dim,
        "channel_tags": model.channel_tags,
        "channel_refs": channel_refs or [],
        "train_config": vars(cfg) if cfg else None,
    }
    save_tensors(prefix, model.transforms, meta)


def load_attention(prefix: str, channels: list[RepresentationModel]) -> AttentionModel:
    """Rebuild an attention model over already-loaded channel models."""
    tensors, meta = load_tensors(prefix)
    if meta.get("kind") != "attention":
        raise DataError(f"{prefix}: not an attention container")
    if [ch.tag for ch in channels] != meta["channel_tags"]:
        raise DataError(
            f"channel order {[ch.tag for ch in channels]} != saved {meta['channel_tags']}"
        )
    model = AttentionModel(channels, meta["loss_kind"], tag=meta.get("tag"))
    by_name = {t.name: t for t in tensors}
    for p in model.transforms:
        if p.name not in by_name:
            raise DataError(f"missing tensor {p.name!r} in container")
        p.values[...] = by_name[p.name].values
    return model


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
