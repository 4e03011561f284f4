"""Stage II: encoder-decoder over item codes with a distillation token.

Token layout: ids 0..2 are PAD, BOS and the distillation token; each
decoding position (base levels, then the optional disambiguation level)
owns a contiguous block of ids after that, so equal code values at
different levels never share an embedding.
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
from .quantizer import UnicodeTable

log = logging.getLogger(__name__)

PAD, BOS, DIS = 0, 1, 2
N_SPECIAL = 3
HEAD_INIT_STD = 0.02


class EncoderLayer(nx.Module):
    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.norm1 = nx.LayerNorm(dim)
        self.attn = nx.MultiHeadAttention(dim, heads, rng)
        self.norm2 = nx.LayerNorm(dim)
        self.ffn = nx.FeedForward(dim, hidden, rng)

    def forward(self, x, mask):
        x = x + self.attn(self.norm1(x), mask=mask)
        return x + self.ffn(self.norm2(x))


class DecoderLayer(nx.Module):
    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.norm1 = nx.LayerNorm(dim)
        self.self_attn = nx.MultiHeadAttention(dim, heads, rng)
        self.norm2 = nx.LayerNorm(dim)
        self.cross_attn = nx.MultiHeadAttention(dim, heads, rng)
        self.norm3 = nx.LayerNorm(dim)
        self.ffn = nx.FeedForward(dim, hidden, rng)

    def forward(self, x, memory, self_mask, cross_mask):
        x = x + self.self_attn(self.norm1(x), mask=self_mask)
        x = x + self.cross_attn(self.norm2(x), memory, mask=cross_mask)
        return x + self.ffn(self.norm3(x))


@dataclass
class GenConfig:
    d_model: int = 96
    heads: int = 6
    hidden: int = 256
    n_encoder: int = 1
    n_decoder: int = 4
    max_history: int = HISTORY_LEN
    seed: int = 2024


class GenModel(nx.Module):
    """Encoder over flattened history codes, decoder over the target's code."""

    def __init__(self, level_sizes: list[int], d_c: int, config: GenConfig | None = None):
        cfg = config or GenConfig()
        if not level_sizes or min(level_sizes) < 1:
            raise ValueError("every decoding level needs at least one code")
        self.config = cfg
        self.level_sizes = [int(s) for s in level_sizes]
        self.d_c = int(d_c)
        self.offsets = np.concatenate([[0], np.cumsum(self.level_sizes)]).astype(np.int64) + N_SPECIAL
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_model
        depth = len(self.level_sizes)
        self.token = nx.Embedding(int(self.offsets[-1]), d, rng)
        self.enc_position = nx.Embedding(cfg.max_history * depth, d, rng)
        self.dec_position = nx.Embedding(depth + 2, d, rng)
        self.encoder = [EncoderLayer(d, cfg.heads, cfg.hidden, rng) for _ in range(cfg.n_encoder)]
        self.enc_norm = nx.LayerNorm(d)
        self.decoder = [DecoderLayer(d, cfg.heads, cfg.hidden, rng) for _ in range(cfg.n_decoder)]
        self.dec_norm = nx.LayerNorm(d)
        self.heads = [nx.Linear(d, size, rng) for size in self.level_sizes]
        for head in self.heads:
            # near-uniform code distributions at initialisation
            head.weight.data = (rng.normal(size=head.weight.shape) * HEAD_INIT_STD).astype(head.weight.dtype)
        self.distill = nx.Linear(d, self.d_c, rng)

    @property
    def depth(self) -> int:
        return len(self.level_sizes)

    def code_tokens(self, code) -> list[int]:
        """Vocabulary ids of one item's code sequence."""
        if len(code) > self.depth:
            raise ValueError(f"code {tuple(code)} is longer than the model's {self.depth} levels")
        out = []
        for level, c in enumerate(code):
            if not 0 <= c < self.level_sizes[level]:
                raise ValueError(f"code {c} outside level {level} vocabulary of size {self.level_sizes[level]}")
            out.append(int(self.offsets[level] + c))
        return out

    # -- forward passes ------------------------------------------------------------

    def encode(self, enc_tokens: np.ndarray, enc_mask: np.ndarray) -> Tensor:
        enc_tokens = np.asarray(enc_tokens)
        enc_mask = np.asarray(enc_mask, dtype=bool)
        if not enc_mask.any(axis=1).all():
            raise ValueError("encoder input is all PAD")
        positions = np.arange(enc_tokens.shape[1])
        x = self.token(enc_tokens) + self.enc_position(positions)
        mask = enc_mask[:, None, None, :]
        for layer in self.encoder:
            x = layer(x, mask)
        return self.enc_norm(x)

    def decode(self, memory: Tensor, enc_mask: np.ndarray, dec_tokens: np.ndarray) -> Tensor:
        """Hidden states for every decoder position (causal self-attention)."""
        dec_tokens = np.asarray(dec_tokens)
        t = dec_tokens.shape[1]
        x = self.token(dec_tokens) + self.dec_position(np.arange(t))
        self_mask = np.tril(np.ones((t, t), dtype=bool))[None, None]
        cross_mask = np.asarray(enc_mask, dtype=bool)[:, None, None, :]
        for layer in self.decoder:
            x = layer(x, memory, self_mask, cross_mask)
        return self.dec_norm(x)

    # -- persistence ---------------------------------------------------------------

    def save(self, directory: str | Path, extra: dict | None = None) -> None:
        meta = {"kind": "generator", "level_sizes": self.level_sizes, "d_c": self.d_c,
                "config": asdict(self.config), **(extra or {})}
        save_checkpoint(directory, self, meta)

    @classmethod
    def load(cls, directory: str | Path) -> "GenModel":
        meta = read_manifest(directory)["meta"]
        model = cls(meta["level_sizes"], meta["d_c"], GenConfig(**meta["config"]))
        model.load_state_dict(load_state(directory))
        return model


# -- batches ---------------------------------------------------------------------


@dataclass
class TrainingBatch:
    enc_tokens: np.ndarray
    enc_mask: np.ndarray
    dec_tokens: np.ndarray
    targets: np.ndarray
    target_mask: np.ndarray
    dis_position: np.ndarray
    items: np.ndarray

    def __len__(self) -> int:
        return len(self.items)


def history_tokens(model: GenModel, table: UnicodeTable, histories) -> tuple[np.ndarray, np.ndarray]:
    """Flattened, PAD-right encoder ids for a batch of item histories."""
    rows = []
    for h in histories:
        h = list(h)[-model.config.max_history:]
        if not h:
            raise ValueError("empty history")
        rows.append([tok for item in h for tok in model.code_tokens(table.codes[item])])
    width = max(len(r) for r in rows)
    tokens = np.full((len(rows), width), PAD, dtype=np.int64)
    for b, r in enumerate(rows):
        tokens[b, :len(r)] = r
    return tokens, tokens != PAD


def make_batch(model: GenModel, table: UnicodeTable, histories, items) -> TrainingBatch:
    items = np.asarray(items, dtype=np.int64)
    enc_tokens, enc_mask = history_tokens(model, table, histories)
    depth = model.depth
    dec = np.full((len(items), depth + 2), PAD, dtype=np.int64)
    targets = np.zeros((len(items), depth), dtype=np.int64)
    tmask = np.zeros((len(items), depth), dtype=bool)
    dis_pos = np.empty(len(items), dtype=np.int64)
    for b, item in enumerate(items):
        code = table.codes[item]
        m = len(code)
        dec[b, 0] = BOS
        dec[b, 1:m + 1] = model.code_tokens(code)
        dec[b, m + 1] = DIS
        targets[b, :m] = code
        tmask[b, :m] = True
        dis_pos[b] = m + 1
    return TrainingBatch(enc_tokens, enc_mask, dec, targets, tmask, dis_pos, items)


def forward_hidden(model: GenModel, batch: TrainingBatch) -> Tensor:
    memory = model.encode(batch.enc_tokens, batch.enc_mask)
    return model.decode(memory, batch.enc_mask, batch.dec_tokens)


def gen_loss(model: GenModel, batch: TrainingBatch, hidden: Tensor | None = None) -> Tensor:
    """Mean next-code cross-entropy over every decoded position of the batch."""
    hidden = forward_hidden(model, batch) if hidden is None else hidden
    total, count = None, int(batch.target_mask.sum())
    for level in range(model.depth):
        rows = np.flatnonzero(batch.target_mask[:, level])
        if not len(rows):
            continue
        logits = model.heads[level](hidden[rows, level, :])
        ce = nx.cross_entropy(logits, batch.targets[rows, level]) * (len(rows) / count)
        total = ce if total is None else total + ce
    return total


def sample_negatives(rng: np.random.Generator, items: np.ndarray, n_items: int, n_neg: int) -> np.ndarray:
    """Uniform negatives per row without replacement, never the row's own item."""
    if n_items < 2:
        raise ValueError("distillation needs at least two items")
    k = min(n_neg, n_items - 1)
    out = np.empty((len(items), k), dtype=np.int64)
    for b, item in enumerate(items):
        draw = rng.choice(n_items - 1, size=k, replace=False)
        out[b] = draw + (draw >= item)
    return out


def distill_scores(model: GenModel, batch: TrainingBatch, hidden: Tensor) -> Tensor:
    """Projected distillation-token output, one row per batch element."""
    h = hidden[np.arange(len(batch)), batch.dis_position, :]
    return model.distill(h)


def contrastive_loss(c_hat, positives, negatives) -> Tensor:
    """-log softmax of the positive dot product against the negatives."""
    c_hat = nx.as_tensor(c_hat)
    pos = nx.sum_(c_hat * positives, axis=-1, keepdims=True)
    neg = nx.sum_(nx.reshape(c_hat, (c_hat.shape[0], 1, c_hat.shape[1])) * negatives, axis=-1)
    logits = nx.concat([pos, neg], axis=1)
    return nx.cross_entropy(logits, np.zeros(c_hat.shape[0], dtype=np.int64))


def distill_loss(model: GenModel, batch: TrainingBatch, integrated: np.ndarray, n_neg: int = 128,
                 rng: np.random.Generator | None = None, negatives: np.ndarray | None = None,
                 hidden: Tensor | None = None) -> Tensor:
    if n_neg < 1:
        raise ValueError("n_neg must be >= 1")
    integrated = np.asarray(integrated)
    if negatives is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        negatives = sample_negatives(rng, batch.items, len(integrated), n_neg)
    hidden = forward_hidden(model, batch) if hidden is None else hidden
    c_hat = distill_scores(model, batch, hidden)
    return contrastive_loss(c_hat, integrated[batch.items], integrated[negatives])


# -- training --------------------------------------------------------------------


@dataclass
class Stage2Config:
    steps: int = 20000
    batch_size: int = 256
    beta: float = 1.0
    n_neg: int = 128
    lr: float = 1e-3
    warmup_steps: int = 2000
    warmup_init_lr: float = 1e-7
    weight_decay: float = 1e-7
    seed: int = 2024
    log_every: int = 500


@dataclass
class Stage2Result:
    model: GenModel
    gen_losses: list[float] = field(default_factory=list)
    distill_losses: list[float] = field(default_factory=list)
    config: dict = field(default_factory=dict)


def stage2_loss(model: GenModel, batch: TrainingBatch, integrated: np.ndarray | None, cfg: Stage2Config,
                negatives: np.ndarray | None = None, rng: np.random.Generator | None = None):
    """Joint objective on one batch; returns (total, gen, distill-or-None)."""
    hidden = forward_hidden(model, batch)
    gen = gen_loss(model, batch, hidden)
    if cfg.beta == 0 or integrated is None:
        return gen, gen, None
    dist = distill_loss(model, batch, integrated, cfg.n_neg, rng=rng, negatives=negatives, hidden=hidden)
    return gen + cfg.beta * dist, gen, dist


def train_stage2(model: GenModel, corpus: InteractionCorpus, table: UnicodeTable,
                 integrated: EmbeddingMatrix | np.ndarray | None, cfg: Stage2Config | None = None) -> Stage2Result:
    cfg = cfg or Stage2Config()
    if cfg.beta < 0:
        raise ValueError("beta must be >= 0")
    if table.n_items != corpus.n_items:
        raise ValueError(f"code table has {table.n_items} items, corpus has {corpus.n_items}")
    emb = None
    if integrated is not None:
        emb = integrated.rows if isinstance(integrated, EmbeddingMatrix) else np.asarray(integrated, np.float32)
        if emb.shape != (corpus.n_items, model.d_c):
            raise ValueError(f"integrated embeddings {emb.shape} do not match ({corpus.n_items}, {model.d_c})")
    histories, targets = corpus.training_pairs(model.config.max_history)
    if not len(targets):
        raise ValueError("corpus has no training pairs")
    batch_ss, neg_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    batch_rng, neg_rng = np.random.default_rng(batch_ss), np.random.default_rng(neg_ss)
    opt = nx.Adam(model.parameters(), nx.WarmupSchedule(cfg.lr, cfg.warmup_steps, cfg.warmup_init_lr),
                  weight_decay=cfg.weight_decay)
    result = Stage2Result(model, config=asdict(cfg))
    for step in range(1, cfg.steps + 1):
        pick = batch_rng.integers(len(targets), size=min(cfg.batch_size, len(targets)))
        batch = make_batch(model, table, [histories[i] for i in pick], targets[pick])
        total, gen, dist = stage2_loss(model, batch, emb, cfg, rng=neg_rng)
        total.backward()
        opt.step()
        result.gen_losses.append(gen.item())
        result.distill_losses.append(dist.item() if dist is not None else float("nan"))
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("stage2 step %d gen=%.4f distill=%.4f", step, gen.item(), result.distill_losses[-1])
    return result
