"""Stage functions shared by the command line and the ablation grid.

Everything here works on in-memory objects; the file layout of a run
directory is described by ``RunLayout`` and only touched by the ``read_*``
and ``write_*`` helpers.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .corpus import (
    EmbeddingMatrix,
    InteractionCorpus,
    SyntheticSpec,
    generate_synthetic,
    load_embeddings,
    load_interactions,
    save_embeddings,
)
from .evalkit import (
    DominanceReport,
    MetricReport,
    concat_baseline,
    dominance_similarity,
    evaluate,
    format_table,
    popularity_ranking,
    split_truth,
)
from .fusion import FusionModel, Stage1Config, export_integrated, train_stage1
from .generator import GenConfig, GenModel, Stage2Config, train_stage2
from .inference import RankedList, batch_recommend, bench_cost
from .quantizer import Codebooks, UnicodeTable, fit, load_table, random_assignment

log = logging.getLogger(__name__)

# modes whose integrated embeddings come from the joint (alpha > 0) Stage I run
JOINT_MODES = ("ours", "random_codes")


@dataclass(frozen=True)
class RunLayout:
    root: Path

    @property
    def interactions(self) -> Path:
        return self.root / "data" / "interactions.tsv"

    @property
    def semantic(self) -> Path:
        return self.root / "data" / "semantic.unge"

    @property
    def stage1(self) -> Path:
        return self.root / "stage1"

    @property
    def integrated(self) -> Path:
        return self.root / "embeddings" / "integrated.unge"

    @property
    def collaborative(self) -> Path:
        return self.root / "embeddings" / "collaborative.unge"

    @property
    def table(self) -> Path:
        return self.root / "codes" / "table.tsv"

    @property
    def codebooks(self) -> Path:
        return self.root / "codes" / "codebooks"

    @property
    def stage2(self) -> Path:
        return self.root / "stage2"

    def recommendations(self, split: str) -> Path:
        return self.root / "recs" / f"{split}.tsv"

    @property
    def metrics(self) -> Path:
        return self.root / "metrics.json"

    @property
    def dominance(self) -> Path:
        return self.root / "dominance.json"

    @property
    def cost(self) -> Path:
        return self.root / "cost.json"

    @property
    def ablation(self) -> Path:
        return self.root / "ablation.json"


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `unger {producer}` first")
    return path


# -- data -------------------------------------------------------------------------


def synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    return SyntheticSpec(n_categories=cfg.synth_categories, items_per_category=cfg.synth_items_per_category,
                         n_users=cfg.synth_users, sequence_length=cfg.synth_sequence_length,
                         within_category_transition_prob=cfg.synth_persistence,
                         embedding_noise_std=cfg.synth_noise, semantic_dim=cfg.synth_semantic_dim, seed=cfg.seed)


def synth_data(cfg: RunConfig) -> tuple[InteractionCorpus, EmbeddingMatrix]:
    return generate_synthetic(synthetic_spec(cfg))


def prepare_data(cfg: RunConfig) -> tuple[InteractionCorpus, EmbeddingMatrix | None]:
    if not cfg.interactions:
        raise ValueError("prepare-data needs `interactions` set to a user<TAB>item<TAB>timestamp file")
    corpus = load_interactions(cfg.interactions, cfg.min_core)
    semantic = load_embeddings(cfg.semantic).bind(corpus) if cfg.semantic else None
    return corpus, semantic


def write_data(layout: RunLayout, corpus: InteractionCorpus, semantic: EmbeddingMatrix | None) -> None:
    layout.interactions.parent.mkdir(parents=True, exist_ok=True)
    corpus.save_tsv(layout.interactions)
    if semantic is not None:
        save_embeddings(layout.semantic, semantic)


def read_data(layout: RunLayout) -> tuple[InteractionCorpus, EmbeddingMatrix | None]:
    # the stored corpus is already filtered; reading it back must not drop anything
    corpus = load_interactions(_require(layout.interactions, "synth-data or prepare-data"), min_core=1)
    semantic = load_embeddings(layout.semantic).bind(corpus) if layout.semantic.exists() else None
    return corpus, semantic


def read_embeddings(path: Path, corpus: InteractionCorpus, producer: str) -> EmbeddingMatrix:
    return load_embeddings(_require(path, producer)).bind(corpus)


# -- Stage I -----------------------------------------------------------------------


def stage1_alpha(cfg: RunConfig, mode: str) -> float | None:
    """Alignment weight for ``mode``; None when the mode needs no Stage I run."""
    if mode == "semantic_only":
        return None
    return cfg.alpha if mode in JOINT_MODES else 0.0


def train_fusion(cfg: RunConfig, corpus: InteractionCorpus, semantic: EmbeddingMatrix | None,
                 alpha: float) -> FusionModel:
    if alpha > 0 and semantic is None:
        raise ValueError("alpha > 0 needs semantic embeddings")
    d_s = semantic.dim if alpha > 0 else None
    model = FusionModel(corpus.n_items, cfg.embedding_dim, d_s, seed=cfg.seed, max_len=cfg.max_history)
    s1 = Stage1Config(steps=cfg.stage1_steps, batch_size=cfg.stage1_batch_size, alpha=alpha, tau=cfg.tau,
                      lr=cfg.lr, warmup_steps=cfg.warmup_steps, warmup_init_lr=cfg.warmup_init_lr,
                      weight_decay=cfg.weight_decay, seed=cfg.seed)
    train_stage1(model, corpus, semantic if alpha > 0 else None, s1)
    return model


def integrated_embeddings(cfg: RunConfig, mode: str, corpus: InteractionCorpus, semantic: EmbeddingMatrix | None,
                          fusion: FusionModel | None, collaborative: EmbeddingMatrix | None) -> EmbeddingMatrix:
    """The item vectors a mode quantizes and distills towards."""
    tokens = list(corpus.item_tokens)
    if mode == "semantic_only":
        if semantic is None:
            raise ValueError("semantic_only needs semantic embeddings")
        return EmbeddingMatrix(semantic.rows, tokens)
    if mode in JOINT_MODES:
        if fusion is None:
            raise ValueError(f"{mode} needs a Stage I model")
        out = export_integrated(fusion, semantic, cfg.variant)
        return EmbeddingMatrix(out.rows, tokens)
    if collaborative is None:
        raise ValueError(f"{mode} needs collaborative embeddings")
    if mode == "collaborative_only":
        return EmbeddingMatrix(collaborative.rows, tokens)
    if semantic is None:
        raise ValueError("concat needs semantic embeddings")
    out = concat_baseline(semantic, collaborative)
    return EmbeddingMatrix(out.rows, tokens)


# -- quantization ------------------------------------------------------------------


def quantize(cfg: RunConfig, mode: str, integrated: EmbeddingMatrix,
             tokens: list[str]) -> tuple[Codebooks | None, UnicodeTable]:
    if mode == "random_codes":
        table = random_assignment(integrated.n_items, cfg.clusters, cfg.depth, cfg.seed)
        books = None
    else:
        books, table = fit(integrated.rows, cfg.clusters, cfg.depth, cfg.seed)
    return books, UnicodeTable(table.codes, table.K, table.levels, list(tokens))


def read_table(layout: RunLayout, cfg: RunConfig, corpus: InteractionCorpus) -> UnicodeTable:
    table = load_table(_require(layout.table, "quantize"), levels=cfg.depth, K=cfg.clusters)
    return align_table(table, corpus)


def align_table(table: UnicodeTable, corpus: InteractionCorpus) -> UnicodeTable:
    """Reorder a token-keyed table to the corpus item indexing."""
    if table.tokens is None or table.tokens == corpus.item_tokens:
        if table.n_items != corpus.n_items:
            raise ValueError(f"code table has {table.n_items} items, corpus has {corpus.n_items}")
        return table
    where = {tok: i for i, tok in enumerate(table.tokens)}
    missing = [t for t in corpus.item_tokens if t not in where]
    if missing:
        raise ValueError(f"{len(missing)} corpus items have no code, e.g. {missing[0]!r}")
    codes = [table.codes[where[t]] for t in corpus.item_tokens]
    return UnicodeTable(codes, table.K, table.levels, list(corpus.item_tokens))


# -- Stage II ----------------------------------------------------------------------


def gen_config(cfg: RunConfig) -> GenConfig:
    return GenConfig(d_model=cfg.d_model, heads=cfg.heads, hidden=cfg.hidden, n_encoder=cfg.encoder_layers,
                     n_decoder=cfg.decoder_layers, max_history=cfg.max_history, seed=cfg.seed)


def train_generator(cfg: RunConfig, corpus: InteractionCorpus, table: UnicodeTable,
                    integrated: EmbeddingMatrix) -> GenModel:
    model = GenModel(table.level_sizes(), integrated.dim, gen_config(cfg))
    s2 = Stage2Config(steps=cfg.stage2_steps, batch_size=cfg.stage2_batch_size, beta=cfg.beta, n_neg=cfg.n_neg,
                      lr=cfg.lr, warmup_steps=cfg.warmup_steps, warmup_init_lr=cfg.warmup_init_lr,
                      weight_decay=cfg.weight_decay, seed=cfg.seed)
    train_stage2(model, corpus, table, integrated, s2)
    return model


# -- recommendation and evaluation --------------------------------------------------------------


def recommend(cfg: RunConfig, model: GenModel, table: UnicodeTable, corpus: InteractionCorpus) -> list[RankedList]:
    return batch_recommend(model, table, corpus, cfg.split, cfg.beam_width, max(cfg.ks))


def write_recommendations(path: Path, corpus: InteractionCorpus, ranked: list[RankedList]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for u, r in enumerate(ranked):
            items = " ".join(corpus.item_tokens[i] for i in r.items)
            scores = " ".join(f"{s:.6f}" for s in r.scores)
            f.write(f"{corpus.user_tokens[u]}\t{items}\t{scores}\n")


def read_recommendations(path: Path, corpus: InteractionCorpus) -> dict[int, list[int]]:
    users = {tok: u for u, tok in enumerate(corpus.user_tokens)}
    items = {tok: i for i, tok in enumerate(corpus.item_tokens)}
    ranked: dict[int, list[int]] = {}
    with open(_require(path, "recommend"), encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[0] not in users:
                raise ValueError(f"{path}:{lineno}: expected 'user<TAB>items<TAB>scores' for a known user")
            try:
                ranked[users[parts[0]]] = [items[t] for t in parts[1].split()]
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: unknown item {exc.args[0]!r}") from None
    return ranked


def metrics(cfg: RunConfig, ranked, corpus: InteractionCorpus) -> MetricReport:
    return evaluate(ranked, split_truth(corpus, cfg.split), cfg.ks)


def dominance(cfg: RunConfig, semantic: EmbeddingMatrix, collaborative: EmbeddingMatrix,
              integrated: EmbeddingMatrix) -> DominanceReport:
    return dominance_similarity(semantic, collaborative, integrated, cfg.dominance_clusters, cfg.seed)


def cost_report(cfg: RunConfig, model: GenModel, table: UnicodeTable, corpus: InteractionCorpus) -> dict:
    """Unified decoding against a two-stream run of the same shape.

    The second stream reuses the same model and table: cost depends on
    shapes, not weights, and this keeps forward counts and table bytes at
    exactly twice the unified figures.
    """
    n = min(cfg.bench_queries, corpus.n_users)
    histories = [corpus.eval_query(u, cfg.split, cfg.max_history)[0] for u in range(n)]
    k = max(cfg.ks)
    # one untimed query warms caches so the first timed call is not an outlier
    bench_cost([(model, table)], histories[:1], cfg.beam_width, k)
    uni = bench_cost([(model, table)], histories, cfg.beam_width, k)
    dual = bench_cost([(model, table), (model, table)], histories, cfg.beam_width, k)
    return {"unified": uni.__dict__, "dual": dual.__dict__,
            "latency_ratio": dual.mean_ms / uni.mean_ms if uni.mean_ms > 0 else float("nan")}


# -- ablation grid -------------------------------------------------------------------


def run_ablation(cfg: RunConfig, corpus: InteractionCorpus, semantic: EmbeddingMatrix | None) -> dict:
    """Train and evaluate every mode in ``cfg.ablate_modes`` on one corpus.

    Stage I runs are shared between modes with the same alignment weight.
    The collaborative-only run is always trained: dominance needs it as the
    collaborative reference.
    """
    tokens = list(corpus.item_tokens)
    fusions: dict[float, FusionModel] = {}

    def fusion_for(alpha: float) -> FusionModel:
        if alpha not in fusions:
            fusions[alpha] = train_fusion(cfg, corpus, semantic, alpha)
        return fusions[alpha]

    collaborative = EmbeddingMatrix(export_integrated(fusion_for(0.0)).rows, tokens)
    truth = split_truth(corpus, cfg.split)
    results: dict[str, dict] = {"popularity": {
        "metrics": evaluate([popularity_ranking(corpus, max(cfg.ks))] * corpus.n_users, truth, cfg.ks).to_dict()}}
    for mode in cfg.ablate_modes:
        alpha = stage1_alpha(cfg, mode)
        fusion = fusion_for(alpha) if alpha is not None else None
        integrated = integrated_embeddings(cfg, mode, corpus, semantic, fusion, collaborative)
        _, table = quantize(cfg, mode, integrated, tokens)
        model = train_generator(cfg, corpus, table, integrated)
        report = metrics(cfg, recommend(cfg, model, table, corpus), corpus)
        entry = {"metrics": report.to_dict(), "level_sizes": table.level_sizes()}
        if semantic is not None:
            dom = dominance(cfg, semantic, collaborative, integrated)
            entry["dominance"] = {"semantic": dom.similarity_semantic, "collaborative": dom.similarity_collaborative,
                                  "max_share": dom.max_share}
        results[mode] = entry
        log.info("ablation %s: %s", mode, json.dumps(report.to_dict()["recall_at"]))
    return results


def ablation_table(results: dict, ks) -> str:
    header = ["variant"] + [f"R@{k}" for k in ks] + [f"N@{k}" for k in ks] + ["max share"]
    rows = []
    for name, entry in results.items():
        m = entry["metrics"]
        share = entry.get("dominance", {}).get("max_share")
        rows.append([name] + [f"{m['recall_at'][str(k)]:.4f}" for k in ks]
                    + [f"{m['ndcg_at'][str(k)]:.4f}" for k in ks] + ["-" if share is None else f"{share:.4f}"])
    return format_table(header, rows)


def full_pipeline(cfg: RunConfig, corpus: InteractionCorpus, semantic: EmbeddingMatrix | None) -> MetricReport:
    """synth/prepare output -> Stage I -> quantize -> Stage II -> evaluate, for ``cfg.mode``."""
    alpha = stage1_alpha(cfg, cfg.mode)
    fusion = train_fusion(cfg, corpus, semantic, alpha) if alpha is not None else None
    collaborative = None
    if cfg.mode in ("collaborative_only", "concat"):
        collaborative = EmbeddingMatrix(export_integrated(fusion).rows, list(corpus.item_tokens))
    integrated = integrated_embeddings(cfg, cfg.mode, corpus, semantic, fusion, collaborative)
    _, table = quantize(cfg, cfg.mode, integrated, list(corpus.item_tokens))
    model = train_generator(cfg, corpus, table, integrated)
    return metrics(cfg, recommend(cfg, model, table, corpus), corpus)


def popularity_recall(corpus: InteractionCorpus, k: int, split: str = "test") -> float:
    truth = split_truth(corpus, split)
    top = set(popularity_ranking(corpus, k))
    return float(np.mean([t in top for t in truth]))
