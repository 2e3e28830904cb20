"""FastAPI application serving recommendations from a run directory.

The service is read-only: it loads the trained artifacts written by the
pipeline (dataset, split, index, representation and attention models) and
answers per-user recommendation and candidate-ranking queries in terms of
raw dataset IDs.
"""

from __future__ import annotations

import logging

from fastapi import FastAPI, HTTPException

from .. import pipeline
from ..errors import BlendrecError, ConfigError
from ..recommend import RecommendConfig
from .schemas import (
    DatasetInfo,
    HealthResponse,
    InfoResponse,
    RankRequest,
    RankResponse,
    RecommendRequest,
    RecommendResponse,
    ScoredItem,
)

log = logging.getLogger(__name__)


class RunService:
    """Lazy artifact loader shared by the endpoint handlers."""

    def __init__(self, run_dir: str) -> None:
        cfg = pipeline.RunConfig(**{
            k: tuple(v) if isinstance(v, list) else v
            for k, v in self._manifest_config(run_dir).items()
        })
        base = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
        base["out_dir"] = run_dir
        self.cfg = pipeline.RunConfig(**base)
        self.run = pipeline.Run(self.cfg)
        self.matrix, self.train, _ = pipeline.ensure_ingest(self.run)
        self.rev_users = {v: k for k, v in self.matrix.user_vocab.items()}
        self.rev_items = {v: k for k, v in self.matrix.item_vocab.items()}

    @staticmethod
    def _manifest_config(run_dir: str) -> dict:
        import json
        from pathlib import Path

        path = Path(run_dir) / "run_manifest.json"
        if not path.exists():
            raise ConfigError(f"{run_dir}: no run_manifest.json; run the pipeline first")
        return json.loads(path.read_text())["config"]

    def available_models(self) -> list[str]:
        tags = [t for t in self.cfg.representations if self.run.path(f"{t.lower()}.bin").exists()]
        tags += [t for t in self.cfg.attention if self.run.path(f"{t.lower()}.bin").exists()]
        return tags

    def default_model(self) -> str:
        return pipeline.default_scorer_tag(self.cfg)

    def recommender(self, tag: str):
        if tag not in self.available_models():
            raise HTTPException(status_code=404, detail=f"model {tag!r} not available")
        return pipeline.build_recommender(self.run, tag)

    def user_index(self, raw_user: str) -> int:
        if raw_user not in self.matrix.user_vocab:
            raise HTTPException(status_code=404, detail=f"unknown user {raw_user!r}")
        return self.matrix.user_vocab[raw_user]

    def item_index(self, raw_item: str) -> int:
        if raw_item not in self.matrix.item_vocab:
            raise HTTPException(status_code=404, detail=f"unknown item {raw_item!r}")
        return self.matrix.item_vocab[raw_item]


def create_app(run_dir: str) -> FastAPI:
    service = RunService(run_dir)
    app = FastAPI(title="blendrec", version="0.1.0",
                  description="cluster-pruned attentive collaborative filtering")

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse()

    @app.get("/info", response_model=InfoResponse)
    def info() -> InfoResponse:
        m = service.matrix
        return InfoResponse(
            dataset=DatasetInfo(users=m.user_count, items=m.item_count,
                                interactions=len(m), density=m.density),
            models=service.available_models(),
            clusters=service.cfg.clusters,
            dim=service.cfg.dim,
            protocol=service.cfg.protocol,
            default_model=service.default_model(),
        )

    @app.post("/recommend", response_model=RecommendResponse)
    def recommend(req: RecommendRequest) -> RecommendResponse:
        tag = req.model or service.default_model()
        rec = service.recommender(tag)
        user = service.user_index(req.user)
        k = req.k_clusters or service.cfg.candidate_clusters
        try:
            cfg = RecommendConfig(K=k, N=req.n, scorer=rec.scorer.kind,
                                  exclude_train_positives=req.exclude_seen)
            result = rec.recommend(user, cfg)
        except BlendrecError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return RecommendResponse(
            user=req.user,
            model=tag,
            candidate_count=result.candidate_count,
            items=[
                ScoredItem(rank=r, item=service.rev_items[i], score=s)
                for r, (i, s) in enumerate(result.items, start=1)
            ],
        )

    @app.post("/rank", response_model=RankResponse)
    def rank(req: RankRequest) -> RankResponse:
        tag = req.model or service.default_model()
        rec = service.recommender(tag)
        user = service.user_index(req.user)
        candidates = [service.item_index(c) for c in req.candidates]
        try:
            ranked = rec.rank_fixed_candidates(user, candidates)
        except BlendrecError as exc:
            raise HTTPException(status_code=400, detail=str(exc)) from exc
        return RankResponse(
            user=req.user,
            model=tag,
            items=[
                ScoredItem(rank=r, item=service.rev_items[i], score=s)
                for r, (i, s) in enumerate(ranked, start=1)
            ],
        )

    return app
