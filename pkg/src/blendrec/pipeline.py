"""Config-driven experiment pipeline with resumable, content-hashed stages.

A run directory accumulates stage artifacts (dataset, split, models, index,
attention, metric tables) plus a manifest recording input/output hashes,
per-stage wall clock and derived seeds. Re-running a completed stage with
unchanged inputs is a no-op. All randomness flows from the single config
seed through named per-stage seeds.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import corpus
from .clusterindex import ClusterIndex, LocalTripletSets, build_index, load_index, mine_local_triplets, save_index, train_local
from .corpus import FileFormat, InteractionMatrix, SplitSpec
from .errors import ConfigError, DataError
from .fusion import AttentionModel, file_sha256, load_attention, save_attention, train_attention
from .metrics import EvalResult, coverage_recall, evaluate_loo, evaluate_topn, write_results_table
from .recommend import RecommendConfig, RecommendationList, Recommender, write_recommendations
from .towers import RepresentationModel, TrainConfig, load_model, save_model, train_global

log = logging.getLogger(__name__)

REPRESENTATION_TAGS = ("GD", "GP", "LD", "LP")
ATTENTION_TAGS = ("GAD", "GAP", "LAD", "LAP", "AD", "AP")
ATTENTION_CHANNELS = {
    "AD": (("GD", "GP", "LD", "LP"), "distance"),
    "AP": (("GD", "GP", "LD", "LP"), "product"),
    "GAD": (("GD", "GP"), "distance"),
    "GAP": (("GD", "GP"), "product"),
    "LAD": (("LD", "LP"), "distance"),
    "LAP": (("LD", "LP"), "product"),
}
LOSS_OF_TAG = {"GD": "distance", "GP": "product", "LD": "distance", "LP": "product"}
INDEX_SPACE_TAG = "GD"
DELIMITERS = {"tab": "\t", "comma": ",", "space": " ", "pipe": "|", "whitespace": None}


@dataclass
class RunConfig:
    """Flat key-value run configuration; every field owns a documented key."""

    dataset_path: str = ""
    delimiter: str = "tab"
    columns: tuple[str, ...] = ("user", "item", "rating", "timestamp")
    protocol: str = "random-half"
    n_test: int = 0
    min_interactions: int = 0
    dim: int = 64
    clusters: int = 20
    candidate_clusters: int = 2
    mining_clusters: int = 5
    topn_sweep: tuple[int, ...] = (5, 10, 15, 20, 25, 30)
    representations: tuple[str, ...] = ("GD", "GP", "LD", "LP")
    attention: tuple[str, ...] = ("AD", "AP")
    batch_size: int = 512
    max_epochs: int = 200
    margin: float = 0.5
    learning_rate: float = 0.00017
    patience: int = 10
    l2_reg: float = 1e-6
    loo_negatives: int = 99
    loo_topk: int = 10
    seed: int = 1
    out_dir: str = "run"
    single_thread: bool = False

    def __post_init__(self) -> None:
        if self.dim not in (32, 64, 128):
            raise ConfigError(f"dim must be one of 32/64/128, got {self.dim}")
        if self.delimiter not in DELIMITERS:
            raise ConfigError(f"delimiter must be one of {sorted(DELIMITERS)}")
        if self.protocol not in corpus.PROTOCOLS:
            raise ConfigError(f"unknown protocol {self.protocol!r}")
        for tag in self.representations:
            if tag not in REPRESENTATION_TAGS:
                raise ConfigError(f"unknown representation {tag!r}")
        for tag in self.attention:
            if tag not in ATTENTION_TAGS:
                raise ConfigError(f"unknown attention config {tag!r}")
            needed = ATTENTION_CHANNELS[tag][0]
            missing = [t for t in needed if t not in self.representations]
            if missing:
                raise ConfigError(f"attention {tag} needs representations {missing}")
        needs_index = self.attention or any(t in self.representations for t in ("LD", "LP"))
        if needs_index and INDEX_SPACE_TAG not in self.representations:
            raise ConfigError(f"the cluster index lives in the {INDEX_SPACE_TAG} space; add it to representations")
        if not 1 <= self.candidate_clusters <= self.clusters:
            raise ConfigError("candidate_clusters must be in [1, clusters]")
        if not 1 <= self.mining_clusters <= self.clusters:
            raise ConfigError("mining_clusters must be in [1, clusters]")

    def file_format(self) -> FileFormat:
        return FileFormat(delimiter=DELIMITERS[self.delimiter], columns=self.columns)

    def split_spec(self) -> SplitSpec:
        return SplitSpec(protocol=self.protocol, n_test=self.n_test,
                         seed=stage_seed(self.seed, "split"),
                         min_interactions=self.min_interactions)

    def train_config(self, stage: str) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            margin=self.margin,
            learning_rate=self.learning_rate,
            patience=self.patience,
            l2_reg=self.l2_reg,
            seed=stage_seed(self.seed, stage),
        )


_BOOL_KEYS = {"single_thread"}
_INT_KEYS = {"n_test", "min_interactions", "dim", "clusters", "candidate_clusters",
             "mining_clusters", "batch_size", "max_epochs", "patience",
             "loo_negatives", "loo_topk", "seed"}
_FLOAT_KEYS = {"margin", "learning_rate", "l2_reg"}
_TUPLE_INT_KEYS = {"topn_sweep"}
_TUPLE_STR_KEYS = {"representations", "attention", "columns"}


def parse_config_text(text: str) -> RunConfig:
    """Parse ``key = value`` lines (# comments allowed) into a RunConfig."""
    values: dict = {}
    known = set(RunConfig.__dataclass_fields__)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _BOOL_KEYS:
                values[key] = value.lower() in ("1", "true", "yes", "on")
            elif key in _INT_KEYS:
                values[key] = int(value)
            elif key in _FLOAT_KEYS:
                values[key] = float(value)
            elif key in _TUPLE_INT_KEYS:
                values[key] = tuple(int(v) for v in value.replace(",", " ").split())
            elif key in _TUPLE_STR_KEYS:
                values[key] = tuple(v.strip() for v in value.replace(",", " ").split())
            else:
                values[key] = value
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from exc
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def stage_seed(base_seed: int, stage: str) -> int:
    """Stable per-stage seed derived from the run seed and the stage name."""
    digest = hashlib.sha256(f"{base_seed}:{stage}".encode()).hexdigest()
    return int(digest[:16], 16) % (2**63)


def config_fingerprint(cfg: RunConfig, keys: tuple[str, ...]) -> str:
    subset = {k: getattr(cfg, k) for k in sorted(keys)}
    return hashlib.sha256(json.dumps(subset, sort_keys=True, default=list).encode()).hexdigest()


_TRAIN_KEYS = ("batch_size", "max_epochs", "margin", "learning_rate",
               "patience", "l2_reg", "seed", "dim")


class Run:
    """A run directory: artifact cache, stage records, loaded-object cache."""

    def __init__(self, cfg: RunConfig) -> None:
        self.cfg = cfg
        self.dir = Path(cfg.out_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.dir / "run_manifest.json"
        if self.manifest_path.exists():
            self.manifest = json.loads(self.manifest_path.read_text())
        else:
            self.manifest = {"config": asdict(cfg), "stages": {}}
        self._cache: dict = {}

    def path(self, name: str) -> Path:
        return self.dir / name

    def _save_manifest(self) -> None:
        self.manifest["config"] = asdict(self.cfg)
        self.manifest_path.write_text(json.dumps(self.manifest, indent=1, sort_keys=True, default=list))

    def stage_is_done(self, stage: str, inputs: dict[str, str], outputs: list[str]) -> bool:
        record = self.manifest["stages"].get(stage)
        if not record or record.get("inputs") != inputs:
            return False
        for rel in outputs:
            path = self.path(rel)
            if not path.exists() or file_sha256(path) != record["outputs"].get(rel):
                return False
        return True

    def record_stage(self, stage: str, inputs: dict[str, str], outputs: list[str],
                     seconds: float, seed: int | None = None) -> None:
        self.manifest["stages"][stage] = {
            "inputs": inputs,
            "outputs": {rel: file_sha256(self.path(rel)) for rel in outputs},
            "wall_clock_s": round(seconds, 3),
            "seed": seed,
        }
        self._save_manifest()

    def run_stage(self, stage: str, inputs: dict[str, str], outputs: list[str],
                  action, seed: int | None = None) -> bool:
        """Execute ``action`` unless the stage is already done; returns True if run."""
        if self.stage_is_done(stage, inputs, outputs):
            log.info("stage %s: up to date, skipping", stage)
            return False
        log.info("stage %s: running", stage)
        started = time.perf_counter()
        action()
        self.record_stage(stage, inputs, outputs, time.perf_counter() - started, seed)
        return True


# -- ingest ------------------------------------------------------------


def _dataset_inputs(cfg: RunConfig) -> dict[str, str]:
    if not cfg.dataset_path or not Path(cfg.dataset_path).exists():
        raise DataError(f"dataset file not found: {cfg.dataset_path!r}")
    return {
        "dataset_file": file_sha256(cfg.dataset_path),
        "config": config_fingerprint(cfg, ("delimiter", "columns", "protocol", "n_test",
                                           "min_interactions", "seed")),
    }


def ensure_ingest(run: Run) -> tuple[InteractionMatrix, InteractionMatrix, dict[int, list[int]]]:
    """Load + filter + split, materializing dataset.tsv / vocab / split.tsv."""
    if "dataset" in run._cache:
        return run._cache["dataset"]
    cfg = run.cfg
    inputs = _dataset_inputs(cfg)
    outputs = ["dataset.tsv", "vocab.json", "split.tsv"]

    def action() -> None:
        m = corpus.load_interactions(cfg.dataset_path, cfg.file_format())
        m = corpus.filter_min_interactions(m, cfg.min_interactions)
        train, test = corpus.split(m, cfg.split_spec())
        with open(run.path("dataset.tsv"), "w", encoding="utf-8") as out:
            stamps = m.timestamps if m.timestamps is not None else np.zeros(len(m))
            for u, i, t in zip(m.users.tolist(), m.items.tolist(), stamps.tolist()):
                out.write(f"{u}\t{i}\t{t:.0f}\n")
        vocab = {
            "user_count": m.user_count,
            "item_count": m.item_count,
            "has_timestamps": m.timestamps is not None,
            "users": {k: v for k, v in m.user_vocab.items()},
            "items": {k: v for k, v in m.item_vocab.items()},
        }
        run.path("vocab.json").write_text(json.dumps(vocab, sort_keys=True))
        corpus.write_split_manifest(run.path("split.tsv"), train, test)

    run.run_stage("ingest", inputs, outputs, action, seed=cfg.split_spec().seed)

    vocab = json.loads(run.path("vocab.json").read_text())
    rows = np.loadtxt(run.path("dataset.tsv"), dtype=np.float64, ndmin=2)
    m = InteractionMatrix(
        user_count=vocab["user_count"],
        item_count=vocab["item_count"],
        users=rows[:, 0].astype(np.int64),
        items=rows[:, 1].astype(np.int64),
        user_vocab={k: int(v) for k, v in vocab["users"].items()},
        item_vocab={k: int(v) for k, v in vocab["items"].items()},
        timestamps=rows[:, 2] if vocab["has_timestamps"] else None,
    )
    train, test = corpus.read_split_manifest(run.path("split.tsv"), m)
    run._cache["dataset"] = (m, train, test)
    return run._cache["dataset"]


# -- representation models ----------------------------------------------


def _model_prefix(run: Run, tag: str) -> str:
    return str(run.path(tag.lower()))


def ensure_representation(run: Run, tag: str) -> RepresentationModel:
    if ("model", tag) in run._cache:
        return run._cache[("model", tag)]
    cfg = run.cfg
    if tag not in cfg.representations:
        raise ConfigError(f"representation {tag} is not in this run's config")
    _, train, _ = ensure_ingest(run)
    stage = f"train:{tag}"
    inputs = {
        "split": file_sha256(run.path("split.tsv")),
        "config": config_fingerprint(cfg, _TRAIN_KEYS),
    }
    outputs = [f"{tag.lower()}.json", f"{tag.lower()}.bin"]

    if tag in ("GD", "GP"):
        def action() -> None:
            model = train_global(train, LOSS_OF_TAG[tag], cfg.train_config(stage), dim=cfg.dim)
            model.tag = tag
            save_model(model, _model_prefix(run, tag), cfg.train_config(stage))
    else:
        inputs["index"] = str(ensure_index_hash(run))
        inputs["mining"] = config_fingerprint(cfg, ("mining_clusters",))

        def action() -> None:
            sets = ensure_local_sets(run)
            model = train_local(train, sets, LOSS_OF_TAG[tag], cfg.train_config(stage), dim=cfg.dim)
            model.tag = tag
            save_model(model, _model_prefix(run, tag), cfg.train_config(stage))

    run.run_stage(stage, inputs, outputs, action, seed=stage_seed(cfg.seed, stage))
    model = load_model(_model_prefix(run, tag))
    run._cache[("model", tag)] = model
    return model


def ensure_index(run: Run) -> ClusterIndex:
    if "index" in run._cache:
        return run._cache["index"]
    cfg = run.cfg
    coarse = ensure_representation(run, INDEX_SPACE_TAG)
    stage = "index"
    inputs = {
        "model": file_sha256(run.path(f"{INDEX_SPACE_TAG.lower()}.bin")),
        "config": config_fingerprint(cfg, ("clusters", "seed")),
    }
    outputs = ["index.json", "index.bin"]

    def action() -> None:
        index = build_index(coarse, cfg.clusters, seed=stage_seed(cfg.seed, stage))
        save_index(index, str(run.path("index")))

    run.run_stage(stage, inputs, outputs, action, seed=stage_seed(cfg.seed, stage))
    index = load_index(str(run.path("index")))
    run._cache["index"] = index
    return index


def ensure_index_hash(run: Run) -> str:
    ensure_index(run)
    return file_sha256(run.path("index.bin"))


def ensure_local_sets(run: Run) -> LocalTripletSets:
    """Mined local triplets; deterministic, so they are rebuilt on demand."""
    if "local_sets" in run._cache:
        return run._cache["local_sets"]
    cfg = run.cfg
    _, train, _ = ensure_ingest(run)
    sets = mine_local_triplets(
        ensure_representation(run, INDEX_SPACE_TAG),
        ensure_index(run),
        train,
        J=cfg.mining_clusters,
        seed=stage_seed(cfg.seed, "mine"),
    )
    if len(sets) == 0:
        raise DataError("local triplet mining produced no triplets")
    run._cache["local_sets"] = sets
    return sets


def ensure_attention(run: Run, tag: str) -> AttentionModel:
    if ("attention", tag) in run._cache:
        return run._cache[("attention", tag)]
    cfg = run.cfg
    if tag not in cfg.attention:
        raise ConfigError(f"attention {tag} is not in this run's config")
    channel_tags, loss_kind = ATTENTION_CHANNELS[tag]
    for dep in channel_tags:
        prefix = run.path(f"{dep.lower()}.bin")
        if ("model", dep) not in run._cache and not prefix.exists():
            raise ConfigError(f"attention {tag} needs stage train:{dep} first")
    channels = [ensure_representation(run, dep) for dep in channel_tags]
    _, train, _ = ensure_ingest(run)
    stage = f"attend:{tag}"
    inputs = {
        "channels": ",".join(file_sha256(run.path(f"{d.lower()}.bin")) for d in channel_tags),
        "config": config_fingerprint(cfg, _TRAIN_KEYS + ("mining_clusters",)),
    }
    outputs = [f"{tag.lower()}.json", f"{tag.lower()}.bin"]

    def action() -> None:
        sets = ensure_local_sets(run)
        model = train_attention(train, channels, sets, loss_kind,
                                cfg.train_config(stage), tag=tag)
        refs = [
            {"tag": d, "path": f"{d.lower()}.bin", "sha256": file_sha256(run.path(f"{d.lower()}.bin"))}
            for d in channel_tags
        ]
        save_attention(model, _model_prefix(run, tag), channel_refs=refs,
                       cfg=cfg.train_config(stage))

    run.run_stage(stage, inputs, outputs, action, seed=stage_seed(cfg.seed, stage))
    model = load_attention(_model_prefix(run, tag), channels)
    run._cache[("attention", tag)] = model
    return model


def cmd_ingest(cfg: RunConfig) -> Run:
    run = Run(cfg)
    ensure_ingest(run)
    return run


def cmd_train(cfg: RunConfig) -> Run:
    """Every training stage in dependency order: globals, index, locals, attention."""
    run = Run(cfg)
    ensure_ingest(run)
    for tag in ("GD", "GP"):
        if tag in cfg.representations:
            ensure_representation(run, tag)
    if any(t in cfg.representations for t in ("LD", "LP")) or cfg.attention:
        ensure_index(run)
    for tag in ("LD", "LP"):
        if tag in cfg.representations:
            ensure_representation(run, tag)
    for tag in cfg.attention:
        ensure_attention(run, tag)
    return run


def cmd_index(cfg: RunConfig) -> Run:
    run = Run(cfg)
    ensure_index(run)
    return run


def cmd_attend(cfg: RunConfig) -> Run:
    run = Run(cfg)
    for tag in cfg.attention:
        ensure_attention(run, tag)
    return run


def scorer_model(run: Run, tag: str):
    """The model behind a tag, whether representation or attention."""
    if tag in REPRESENTATION_TAGS:
        return ensure_representation(run, tag)
    if tag in ATTENTION_TAGS:
        return ensure_attention(run, tag)
    raise ConfigError(f"unknown model tag {tag!r}")


def build_recommender(run: Run, tag: str) -> Recommender:
    if ("recommender", tag) in run._cache:
        return run._cache[("recommender", tag)]
    _, train, _ = ensure_ingest(run)
    rec = Recommender(
        ensure_index(run),
        ensure_representation(run, INDEX_SPACE_TAG),
        scorer_model(run, tag),
        train=train,
    )
    run._cache[("recommender", tag)] = rec
    return rec


def default_scorer_tag(cfg: RunConfig) -> str:
    if cfg.attention:
        return "AD" if "AD" in cfg.attention else cfg.attention[0]
    return cfg.representations[0]


def cmd_recommend(cfg: RunConfig, users: list[str] | None, output: str | None = None,
                  tag: str | None = None) -> Path:
    """Batch recommendations written as (raw_user, rank, raw_item, score) lines."""
    run = Run(cfg)
    m, train, _ = ensure_ingest(run)
    tag = tag or default_scorer_tag(cfg)
    rec = build_recommender(run, tag)
    scorer_kind = rec.scorer.kind
    rc = RecommendConfig(K=cfg.candidate_clusters, N=max(cfg.topn_sweep),
                         scorer=scorer_kind, exclude_train_positives=True)
    if users:
        missing = [u for u in users if u not in m.user_vocab]
        if missing:
            raise DataError(f"unknown user ids: {missing[:5]}")
        user_idx = [m.user_vocab[u] for u in users]
    else:
        user_idx = list(range(m.user_count))
    lists = [rec.recommend(u, rc) for u in user_idx]
    rev_users = {v: k for k, v in m.user_vocab.items()}
    rev_items = {v: k for k, v in m.item_vocab.items()}
    out_path = Path(output) if output else run.path(f"recommendations_{tag.lower()}.tsv")
    write_recommendations(out_path, lists, id_of_item=rev_items.get, id_of_user=rev_users.get)
    return out_path


def cmd_evaluate(cfg: RunConfig) -> dict[str, Path]:
    """Ablation table, coverage curve, and (for leave-one-out) the ranking table."""
    run = Run(cfg)
    _, train, test = ensure_ingest(run)
    tags = list(cfg.representations) + list(cfg.attention)
    written: dict[str, Path] = {}

    if cfg.protocol == "leave-one-out":
        rows = []
        for tag in tags:
            rec = build_recommender(run, tag)
            hr, ndcg = evaluate_loo(test, rec, train, negatives=cfg.loo_negatives,
                                    topk=cfg.loo_topk, seed=stage_seed(cfg.seed, "loo"))
            rows.append((tag, hr, ndcg))
        path = run.path("loo.tsv")
        with open(path, "w", encoding="utf-8") as out:
            out.write("tag\thr\tndcg\n")
            for tag, hr, ndcg in rows:
                out.write(f"{tag}\t{hr:.6f}\t{ndcg:.6f}\n")
        written["loo"] = path
        return written

    results: list[EvalResult] = []
    for tag in tags:
        rec = build_recommender(run, tag)
        results += evaluate_topn(test, rec, tag, Ns=cfg.topn_sweep, K=cfg.candidate_clusters)
    path = run.path("ablation.tsv")
    write_results_table(path, results)
    written["ablation"] = path

    curve_path = run.path("coverage.tsv")
    with open(curve_path, "w", encoding="utf-8") as out:
        out.write("tag\tK\trecall\n")
        for tag in tags:
            rec = build_recommender(run, tag)
            Ks = tuple(k for k in (1, 2, 3, 4, 5) if k <= cfg.clusters)
            for K, value in coverage_recall(test, rec, tag, Ks=Ks):
                out.write(f"{tag}\t{K}\t{value:.6f}\n")
    written["coverage"] = curve_path
    return written


def cmd_report(cfg: RunConfig) -> str:
    """Human-readable digest of the metric tables present in the run dir."""
    run = Run(cfg)
    chunks = []
    for name in ("ablation.tsv", "coverage.tsv", "loo.tsv"):
        path = run.path(name)
        if path.exists():
            chunks.append(f"== {name} ==\n{path.read_text()}")
    if not chunks:
        return "no metric tables found; run `evaluate` first\n"
    return "\n".join(chunks)
