"""Stage I: fuse collaborative and semantic item knowledge.

A collaborative sequence model (item table + attention-pooling encoder) is
trained on next-item prediction while a modality adaptation layer maps the
semantic embeddings into the collaborative space and an InfoNCE term aligns
the two views of each item.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .checkpoint import load_state, read_manifest, save_checkpoint
from .corpus import HISTORY_LEN, EmbeddingMatrix, InteractionCorpus
from .numerics import Tensor

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-5


class AdaptationLayer(nx.Module):
    """Linear map into the collaborative space followed by AdaLN.

    The per-sample scale and shift come from a linear layer applied to the
    pre-normalization activation; it starts at scale 1, shift 0.
    """

    def __init__(self, d_s: int, d_c: int, rng: np.random.Generator):
        self.d_s, self.d_c = d_s, d_c
        self.proj = nx.Linear(d_s, d_c, rng)
        self.cond = nx.Linear(d_c, 2 * d_c, rng)
        self.cond.weight = Tensor(np.zeros((d_c, 2 * d_c)), requires_grad=True)
        self.cond.bias = Tensor(np.concatenate([np.ones(d_c), np.zeros(d_c)]), requires_grad=True)

    def forward(self, e_s):
        e_s = nx.as_tensor(e_s)
        if e_s.shape[-1] != self.d_s:
            raise nx.ShapeError(f"adapt: expected semantic width {self.d_s}, got shape {e_s.shape}")
        h = self.proj(e_s)
        mu = nx.mean(h, -1, keepdims=True)
        sigma = nx.maximum(nx.std(h, -1, keepdims=True), SIGMA_FLOOR)
        gd = self.cond(h)
        gamma, delta = gd[..., : self.d_c], gd[..., self.d_c:]
        return gamma * ((h - mu) / sigma) + delta


class FusionModel(nx.Module):
    """Item table, attention-pooling history encoder and optional adaptation layer."""

    def __init__(self, n_items: int, d_c: int = 96, d_s: int | None = None, seed: int = 2024,
                 max_len: int = HISTORY_LEN):
        self.n_items, self.d_c, self.d_s, self.max_len, self.seed = n_items, d_c, d_s, max_len, seed
        # independent streams so the collaborative part does not depend on d_s
        collab_ss, adapt_ss = np.random.SeedSequence(seed).spawn(2)
        rng = np.random.default_rng(collab_ss)
        self.item_table = nx.xavier_uniform(rng, n_items, d_c)
        self.position = nx.xavier_uniform(rng, max_len, d_c)
        self.query = Tensor(nx.xavier_uniform(rng, 1, d_c).data.reshape(1, 1, d_c), requires_grad=True)
        self.key = nx.Linear(d_c, d_c, rng)
        self.value = nx.Linear(d_c, d_c, rng)
        self.ffn = nx.FeedForward(d_c, 2 * d_c, rng)
        self.adapter = AdaptationLayer(d_s, d_c, np.random.default_rng(adapt_ss)) if d_s else None

    def pad_histories(self, histories) -> tuple[np.ndarray, np.ndarray]:
        """Right-aligned (B, max_len) index and mask arrays; the newest item is last."""
        idx = np.zeros((len(histories), self.max_len), dtype=np.int64)
        mask = np.zeros((len(histories), self.max_len), dtype=bool)
        for b, h in enumerate(histories):
            h = np.asarray(h)[-self.max_len:]
            if len(h) == 0:
                raise ValueError("empty history")
            idx[b, self.max_len - len(h):] = h
            mask[b, self.max_len - len(h):] = True
        return idx, mask

    def user_vectors(self, histories) -> Tensor:
        idx, mask = self.pad_histories(histories)
        e = nx.take_rows(self.item_table, idx) + self.position
        pooled = nx.attention(self.query, self.key(e), self.value(e), mask[:, None, :])
        pooled = nx.reshape(pooled, (len(histories), self.d_c))
        return pooled + self.ffn(pooled)

    def logits(self, histories) -> Tensor:
        return nx.matmul(self.user_vectors(histories), nx.transpose(self.item_table))

    def adapt(self, e_s) -> Tensor:
        if self.adapter is None:
            raise RuntimeError("model was built without a semantic input width")
        return self.adapter(e_s)

    def save(self, directory: str | Path, extra: dict | None = None) -> None:
        meta = {"kind": "fusion", "n_items": self.n_items, "d_c": self.d_c, "d_s": self.d_s,
                "max_len": self.max_len, "seed": self.seed, **(extra or {})}
        save_checkpoint(directory, self, meta)

    @classmethod
    def load(cls, directory: str | Path) -> "FusionModel":
        meta = read_manifest(directory)["meta"]
        model = cls(meta["n_items"], meta["d_c"], meta["d_s"], meta["seed"], meta["max_len"])
        model.load_state_dict(load_state(directory))
        return model


def cosine_matrix(a, b) -> Tensor:
    def unit(x):
        norm = nx.sqrt(nx.sum_(x * x, axis=-1, keepdims=True))
        return x / nx.maximum(norm, 1e-8)

    return nx.matmul(unit(a), nx.transpose(unit(b)))


def align_loss(e_c, e_t, tau: float = 1.0, include_positive: bool = True) -> Tensor:
    """InfoNCE between row-aligned collaborative and adapted batches.

    Row i of ``e_c`` is pulled toward row i of ``e_t`` and pushed from the
    other rows. With ``include_positive`` the denominator sums over every
    column; otherwise only over j != i.
    """
    e_c, e_t = nx.as_tensor(e_c), nx.as_tensor(e_t)
    if e_c.shape != e_t.shape:
        raise nx.ShapeError(f"align_loss: batches {e_c.shape} and {e_t.shape} differ")
    n = e_c.shape[0]
    if n < 2:
        raise ValueError("align_loss needs at least two rows for in-batch negatives")
    if tau <= 0:
        raise ValueError("temperature must be positive")
    sim = cosine_matrix(e_c, e_t) / tau
    eye = np.eye(n, dtype=bool)
    positives = nx.sum_(nx.where(eye, sim, 0.0), axis=-1)
    denom_logits = sim if include_positive else nx.masked_fill(sim, eye, nx.NEG_INF)
    return nx.mean(nx.logsumexp(denom_logits, axis=-1) - positives)


def next_item_loss(model: FusionModel, histories, targets) -> Tensor:
    return nx.cross_entropy(model.logits(histories), np.asarray(targets))


@dataclass
class Stage1Config:
    steps: int = 20000
    batch_size: int = 256
    alpha: float = 1.0
    tau: float = 1.0
    lr: float = 1e-3
    warmup_steps: int = 2000
    warmup_init_lr: float = 1e-7
    weight_decay: float = 1e-7
    include_positive: bool = True
    seed: int = 2024
    log_every: int = 500


@dataclass
class Stage1Result:
    model: FusionModel
    seq_losses: list[float] = field(default_factory=list)
    align_losses: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def stage1_loss(model, histories, targets, semantic: np.ndarray | None, cfg: Stage1Config):
    """Joint objective on one batch; returns (total, seq, align-or-None)."""
    seq = next_item_loss(model, histories, targets)
    if semantic is None or cfg.alpha == 0 or model.adapter is None:
        return seq, seq, None
    items = np.unique(targets)
    if len(items) < 2:
        return seq, seq, None
    e_c = nx.take_rows(model.item_table, items)
    e_t = model.adapt(Tensor(semantic[items]))
    align = align_loss(e_c, e_t, cfg.tau, cfg.include_positive)
    return seq + cfg.alpha * align, seq, align


def train_stage1(model: FusionModel, corpus: InteractionCorpus, semantic: EmbeddingMatrix | None,
                 cfg: Stage1Config | None = None) -> Stage1Result:
    cfg = cfg or Stage1Config()
    if cfg.alpha < 0:
        raise ValueError("alpha must be >= 0")
    sem = None
    if semantic is not None:
        if semantic.n_items != corpus.n_items:
            raise ValueError(f"{semantic.n_items} semantic rows for {corpus.n_items} items")
        sem = semantic.rows
    histories, targets = corpus.training_pairs(model.max_len)
    if not len(targets):
        raise ValueError("corpus has no training pairs")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(3)[2])
    opt = nx.Adam(model.parameters(), nx.WarmupSchedule(cfg.lr, cfg.warmup_steps, cfg.warmup_init_lr),
                  weight_decay=cfg.weight_decay)
    result = Stage1Result(model, config=asdict(cfg))
    for step in range(1, cfg.steps + 1):
        pick = rng.integers(len(targets), size=min(cfg.batch_size, len(targets)))
        total, seq, align = stage1_loss(model, [histories[i] for i in pick], targets[pick], sem, cfg)
        total.backward()
        opt.step()
        result.seq_losses.append(seq.item())
        result.align_losses.append(align.item() if align is not None else float("nan"))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("stage1 step %d seq=%.4f align=%.4f", step, seq.item(),
                     result.align_losses[-1])
    return result


def export_integrated(model: FusionModel, semantic: EmbeddingMatrix | None = None,
                      variant: str = "collaborative") -> EmbeddingMatrix:
    """Integrated item embeddings: the trained item table, or its mean with E_T."""
    table = model.item_table.data.copy()
    if variant == "collaborative":
        return EmbeddingMatrix(table)
    if variant == "mean":
        if semantic is None:
            raise ValueError("mean variant needs the semantic embeddings")
        with nx.no_grad():
            adapted = model.adapt(Tensor(semantic.rows)).data
        return EmbeddingMatrix((table + adapted) / 2)
    raise ValueError(f"unknown integrated-embedding variant {variant!r}")


def adapted_embeddings(model: FusionModel, semantic: EmbeddingMatrix) -> np.ndarray:
    with nx.no_grad():
        return model.adapt(Tensor(semantic.rows)).data.copy()
