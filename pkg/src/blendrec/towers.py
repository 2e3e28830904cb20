"""Two-tower representation networks and the triplet training loop.

A representation model embeds user and item IDs into a shared
L2-normalized space through separate towers (no parameter sharing).
Training minimizes either the logistic ranking loss on dot products
("product") or a squared-Euclidean hinge with margin ("distance") over
sampled triplets, with simple hard-negative re-drawing, Adam updates and
early stopping on a held-out triplet slice.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .corpus import InteractionMatrix, _draw_negatives
from .errors import DataError, NumericError
from .tensornet import Adam, ParamTensor, Tower, TowerSpec, load_tensors, save_tensors, attach_tensors

log = logging.getLogger(__name__)

LOSS_KINDS = ("product", "distance")
SOURCE_KINDS = ("global", "local")

VAL_FRACTION = 0.05
HARD_MINING_DRAWS = 5


@dataclass
class TrainConfig:
    batch_size: int = 512
    max_epochs: int = 200
    margin: float = 0.5
    learning_rate: float = 0.00017
    patience: int = 10
    l2_reg: float = 1e-6
    seed: int = 0

    def __post_init__(self) -> None:
        if self.margin <= 0:
            raise DataError("margin must be positive")
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")


def _softplus(z: np.ndarray) -> np.ndarray:
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def product_loss_batch(u: np.ndarray, ip: np.ndarray, in_: np.ndarray):
    """Per-row -ln sigmoid(<u,ip> - <u,in_>) and its gradients."""
    x = np.sum(u * ip, axis=-1) - np.sum(u * in_, axis=-1)
    losses = _softplus(-x)
    dx = (_sigmoid(x) - 1.0)[:, None]
    return losses, dx * (ip - in_), dx * u, -dx * u


def distance_loss_batch(u: np.ndarray, ip: np.ndarray, in_: np.ndarray, margin: float):
    """Per-row hinge on squared Euclidean distances with the given margin."""
    dp = np.sum(np.square(u - ip), axis=-1)
    dn = np.sum(np.square(u - in_), axis=-1)
    raw = dp - dn + margin
    losses = np.maximum(raw, 0.0)
    active = (raw > 0.0)[:, None]
    du = 2.0 * (in_ - ip) * active
    dip = 2.0 * (ip - u) * active
    din = 2.0 * (u - in_) * active
    return losses, du, dip, din


def product_loss(u, ip, in_) -> float:
    """Single-triplet logistic ranking loss."""
    losses, *_ = product_loss_batch(np.atleast_2d(u), np.atleast_2d(ip), np.atleast_2d(in_))
    return float(losses[0])


def distance_loss(u, ip, in_, margin: float = 0.5) -> float:
    """Single-triplet squared-distance hinge loss."""
    if margin <= 0:
        raise DataError("margin must be positive")
    losses, *_ = distance_loss_batch(np.atleast_2d(u), np.atleast_2d(ip), np.atleast_2d(in_), margin)
    return float(losses[0])


def loss_batch(kind: str, u, ip, in_, margin: float):
    if kind == "product":
        return product_loss_batch(u, ip, in_)
    if kind == "distance":
        return distance_loss_batch(u, ip, in_, margin)
    raise DataError(f"unknown loss kind {kind!r}")


@dataclass
class TrainHistory:
    train_loss: list[float]
    val_loss: list[float]
    best_epoch: int
    stopped_epoch: int


class RepresentationModel:
    """Frozen or in-training pair of towers tagged with its provenance."""

    def __init__(self, user_tower: Tower, item_tower: Tower, loss_kind: str,
                 source_kind: str, tag: str | None = None) -> None:
        if loss_kind not in LOSS_KINDS:
            raise DataError(f"unknown loss kind {loss_kind!r}")
        if source_kind not in SOURCE_KINDS:
            raise DataError(f"unknown source kind {source_kind!r}")
        if user_tower.out_dim != item_tower.out_dim:
            raise DataError("towers must share the output dimension")
        self.user_tower = user_tower
        self.item_tower = item_tower
        self.loss_kind = loss_kind
        self.source_kind = source_kind
        self.tag = tag or f"{source_kind[0]}{loss_kind[0]}".upper()
        self.history: TrainHistory | None = None

    @property
    def dim(self) -> int:
        return self.user_tower.out_dim

    @property
    def params(self) -> list[ParamTensor]:
        return self.user_tower.params + self.item_tower.params

    def embed_user(self, user) -> np.ndarray:
        out, _ = self.user_tower.forward(user)
        return out

    def embed_item(self, item) -> np.ndarray:
        out, _ = self.item_tower.forward(item)
        return out

    def embed_all_users(self, chunk: int = 8192) -> np.ndarray:
        return _embed_all(self.user_tower, chunk)

    def embed_all_items(self, chunk: int = 8192) -> np.ndarray:
        return _embed_all(self.item_tower, chunk)


def _embed_all(tower: Tower, chunk: int) -> np.ndarray:
    n = tower.spec.vocab_size
    out = np.empty((n, tower.out_dim), dtype=tower.dtype)
    for start in range(0, n, chunk):
        ids = np.arange(start, min(start + chunk, n))
        out[ids], _ = tower.forward(ids)
    return out


def new_representation_model(
    user_count: int,
    item_count: int,
    loss_kind: str,
    source_kind: str = "global",
    dim: int = 64,
    seed: int = 0,
    hidden: tuple[int, ...] = (64, 64),
    embed_dim: int = 64,
    dtype=np.float32,
) -> RepresentationModel:
    rng = np.random.default_rng(seed)
    user_spec = TowerSpec(user_count, embed_dim=embed_dim, hidden_dims=hidden, out_dim=dim)
    item_spec = TowerSpec(item_count, embed_dim=embed_dim, hidden_dims=hidden, out_dim=dim)
    user_tower = Tower(user_spec, rng, prefix="user", dtype=dtype)
    item_tower = Tower(item_spec, rng, prefix="item", dtype=dtype)
    return RepresentationModel(user_tower, item_tower, loss_kind, source_kind)


def mean_triplet_loss(model: RepresentationModel, users, pos, neg, margin: float = 0.5) -> float:
    """Average loss of the model on the given triplet arrays (forward only)."""
    u, _ = model.user_tower.forward(np.asarray(users))
    p, _ = model.item_tower.forward(np.asarray(pos))
    q, _ = model.item_tower.forward(np.asarray(neg))
    losses, *_ = loss_batch(model.loss_kind, u, p, q, margin)
    return float(np.mean(losses, dtype=np.float64))


class _TripletTrainer:
    """Shared mini-batch loop: hard-negative draws, Adam, early stopping."""

    hard_mining = True

    def __init__(self, model: RepresentationModel, train: InteractionMatrix, cfg: TrainConfig) -> None:
        self.model = model
        self.train = train
        self.cfg = cfg
        self.optimizer = Adam(model.params, learning_rate=cfg.learning_rate)

    def epoch_triplets(self, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        raise NotImplementedError

    def fixed_validation(self, rng: np.random.Generator):
        raise NotImplementedError

    def validation_loss(self, val) -> float:
        return mean_triplet_loss(self.model, *val, margin=self.cfg.margin)

    def run(self) -> TrainHistory:
        cfg = self.cfg
        model = self.model
        rng = np.random.default_rng(cfg.seed)
        val = self.fixed_validation(rng)
        best_val = np.inf
        best_state = None
        best_epoch = -1
        bad_epochs = 0
        train_hist: list[float] = []
        val_hist: list[float] = []

        for epoch in range(cfg.max_epochs):
            users, pos, neg = self.epoch_triplets(rng)
            epoch_loss = 0.0
            seen = 0
            for start in range(0, len(users), cfg.batch_size):
                sl = slice(start, start + cfg.batch_size)
                batch_loss = self._train_batch(users[sl], pos[sl], neg[sl], rng)
                if not np.isfinite(batch_loss):
                    raise NumericError(
                        f"{model.tag}: non-finite loss at epoch {epoch}, batch {start // cfg.batch_size}"
                    )
                n_rows = len(users[sl])
                epoch_loss += batch_loss * n_rows
                seen += n_rows
            train_hist.append(epoch_loss / max(seen, 1))

            val_loss = self.validation_loss(val)
            val_hist.append(val_loss)
            if val_loss < best_val - 1e-7:
                best_val = val_loss
                best_state = [p.values.copy() for p in model.params]
                best_epoch = epoch
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.patience:
                    break

        if best_state is not None:
            for p, values in zip(model.params, best_state):
                p.values[...] = values
        history = TrainHistory(train_hist, val_hist, best_epoch, len(train_hist) - 1)
        model.history = history
        return history

    def _train_batch(self, users, pos, neg, rng) -> float:
        model, cfg = self.model, self.cfg
        if len(users) == 0:
            return 0.0
        u_out, u_cache, u_pre = model.user_tower.forward(users, with_prenorm=True)
        neg = self._mine_negatives(u_out, users, pos, neg, rng)
        stacked = np.concatenate([pos, neg])
        i_out, i_cache, i_pre = model.item_tower.forward(stacked, with_prenorm=True)
        p_out, n_out = i_out[: len(pos)], i_out[len(pos):]

        losses, du, dp, dn = loss_batch(model.loss_kind, u_out, p_out, n_out, cfg.margin)
        scale = 1.0 / len(users)
        grad_item = np.concatenate([dp, dn]) * scale
        grad_user = du * scale

        mean_loss = float(np.mean(losses, dtype=np.float64))
        grad_u_pre = None
        grad_i_pre = None
        if model.loss_kind == "product" and cfg.l2_reg > 0.0:
            # Penalize pre-normalization magnitude; the normalized outputs
            # themselves have constant norm, so the penalty must act before
            # the normalization to have any effect.
            grad_u_pre = 2.0 * cfg.l2_reg * u_pre * scale
            grad_i_pre = 2.0 * cfg.l2_reg * i_pre * scale
            mean_loss += cfg.l2_reg * float(
                np.mean(np.sum(np.square(u_pre), axis=-1), dtype=np.float64)
                + np.mean(np.sum(np.square(i_pre), axis=-1), dtype=np.float64)
            )

        model.user_tower.backward(u_cache, grad_user, grad_prenorm=grad_u_pre)
        model.item_tower.backward(i_cache, grad_item, grad_prenorm=grad_i_pre)
        self.optimizer.step()
        return mean_loss

    def _mine_negatives(self, u_out, users, pos, neg, rng) -> np.ndarray:
        """Re-draw easy negatives up to a draw budget, keeping the last draw.

        Product-loss triplets always have positive loss, so the first draw
        is always kept there; only the hinge loss benefits from mining.
        """
        if not self.hard_mining or self.model.loss_kind != "distance":
            return neg
        p_out, _ = self.model.item_tower.forward(pos)
        pending = np.arange(len(users))
        for _ in range(HARD_MINING_DRAWS - 1):
            n_out, _ = self.model.item_tower.forward(neg[pending])
            losses, *_ = distance_loss_batch(u_out[pending], p_out[pending], n_out, self.cfg.margin)
            easy = losses <= 0.0
            if not easy.any():
                return neg
            pending = pending[easy]
            neg = neg.copy()
            neg[pending] = _draw_negatives(self.train, users[pending], rng)
        return neg


class _GlobalTrainer(_TripletTrainer):
    """Epochs resample one uniform negative per training positive."""

    def __init__(self, model, train, cfg, holdout_mask: np.ndarray) -> None:
        super().__init__(model, train, cfg)
        self._train_rows = ~holdout_mask
        self._val_rows = holdout_mask

    def epoch_triplets(self, rng):
        users = self.train.users[self._train_rows]
        pos = self.train.items[self._train_rows]
        order = rng.permutation(len(users))
        users, pos = users[order], pos[order]
        neg = _draw_negatives(self.train, users, rng)
        return users, pos, neg

    def fixed_validation(self, rng):
        users = self.train.users[self._val_rows]
        pos = self.train.items[self._val_rows]
        neg = _draw_negatives(self.train, users, rng)
        return users, pos, neg


def train_global(
    m: InteractionMatrix,
    loss_kind: str,
    cfg: TrainConfig | None = None,
    dim: int = 64,
) -> RepresentationModel:
    """Train a global representation model on uniformly sampled triplets."""
    cfg = cfg or TrainConfig()
    if len(m) == 0:
        raise DataError("cannot train on an empty matrix")
    model = new_representation_model(m.user_count, m.item_count, loss_kind,
                                     source_kind="global", dim=dim, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    holdout = np.zeros(len(m), dtype=bool)
    n_val = max(1, int(round(VAL_FRACTION * len(m))))
    if n_val < len(m):
        holdout[rng.choice(len(m), size=n_val, replace=False)] = True
    trainer = _GlobalTrainer(model, m, cfg, holdout)
    trainer.run()
    return model


def save_model(model: RepresentationModel, prefix: str, cfg: TrainConfig | None = None) -> None:
    """Persist a representation model: tensor container + identity manifest."""
    meta = {
        "kind": "representation",
        "loss_kind": model.loss_kind,
        "source_kind": model.source_kind,
        "tag": model.tag,
        "dim": model.dim,
        "user_count": model.user_tower.spec.vocab_size,
        "item_count": model.item_tower.spec.vocab_size,
        "embed_dim": model.user_tower.spec.embed_dim,
        "hidden_dims": list(model.user_tower.spec.hidden_dims),
        "train_config": vars(cfg) if cfg else None,
    }
    save_tensors(prefix, model.params, meta)


def load_model(prefix: str) -> RepresentationModel:
    tensors, meta = load_tensors(prefix)
    if meta.get("kind") != "representation":
        raise DataError(f"{prefix}: not a representation model container")
    model = new_representation_model(
        user_count=meta["user_count"],
        item_count=meta["item_count"],
        loss_kind=meta["loss_kind"],
        source_kind=meta["source_kind"],
        dim=meta["dim"],
        hidden=tuple(meta["hidden_dims"]),
        embed_dim=meta["embed_dim"],
    )
    model.tag = meta.get("tag", model.tag)
    attach_tensors(model.user_tower, tensors)
    attach_tensors(model.item_tower, tensors)
    return model
