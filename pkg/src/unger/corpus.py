"""Interaction logs, embedding files and the synthetic corpus generator."""

from __future__ import annotations

import logging
import struct
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"UNGE"
VERSION = 1
HISTORY_LEN = 20
_HEADER = struct.Struct("<4sIII")


class CorpusFormatError(ValueError):
    pass


@dataclass
class InteractionCorpus:
    """Per-user chronological item sequences over dense item indices.

    The split is leave-one-out: the last item of each sequence is the test
    target, the one before it the validation target, the rest the training
    prefix.
    """

    item_tokens: list[str]
    user_tokens: list[str]
    sequences: list[np.ndarray]
    dropped_users: int = 0

    def __post_init__(self):
        for u, seq in enumerate(self.sequences):
            if len(seq) < 3:
                raise ValueError(f"user {self.user_tokens[u]!r} has {len(seq)} interactions; need >= 3")

    @property
    def n_items(self) -> int:
        return len(self.item_tokens)

    @property
    def n_users(self) -> int:
        return len(self.user_tokens)

    def train_prefix(self, user: int) -> np.ndarray:
        return self.sequences[user][:-2]

    def valid_item(self, user: int) -> int:
        return int(self.sequences[user][-2])

    def test_item(self, user: int) -> int:
        return int(self.sequences[user][-1])

    def split(self, user: int) -> tuple[np.ndarray, int, int]:
        return self.train_prefix(user), self.valid_item(user), self.test_item(user)

    def item_counts(self, train_only: bool = True) -> np.ndarray:
        seqs = [self.train_prefix(u) for u in range(self.n_users)] if train_only else self.sequences
        return np.bincount(np.concatenate(seqs), minlength=self.n_items)

    def training_pairs(self, max_len: int = HISTORY_LEN) -> tuple[list[np.ndarray], np.ndarray]:
        """(history window, next item) for every position of every training prefix."""
        histories, targets = [], []
        for u in range(self.n_users):
            prefix = self.train_prefix(u)
            for j in range(1, len(prefix)):
                histories.append(prefix[max(0, j - max_len):j])
                targets.append(int(prefix[j]))
        return histories, np.asarray(targets, dtype=np.int64)

    def eval_query(self, user: int, split: str, max_len: int = HISTORY_LEN) -> tuple[np.ndarray, int]:
        """History and held-out target for ``split`` in {"valid", "test"}."""
        prefix, valid, test = self.split(user)
        if split == "valid":
            return prefix[-max_len:], valid
        if split == "test":
            return np.append(prefix, valid)[-max_len:], test
        raise ValueError(f"unknown split {split!r}")

    def save_tsv(self, path: str | Path) -> None:
        """Write the filtered corpus back as TSV with synthetic ordinal timestamps."""
        with open(path, "w", encoding="utf-8") as f:
            for u, seq in enumerate(self.sequences):
                for t, item in enumerate(seq):
                    f.write(f"{self.user_tokens[u]}\t{self.item_tokens[item]}\t{t}\n")


def history_window(corpus: InteractionCorpus, user: int, max_len: int = HISTORY_LEN) -> np.ndarray:
    """Last ``max_len`` training items of ``user``, oldest first."""
    if not 0 <= user < corpus.n_users:
        raise IndexError(f"no user with index {user}")
    return corpus.train_prefix(user)[-max_len:]


def _kcore(rows: list[tuple[str, str, int]], min_core: int) -> list[tuple[str, str, int]]:
    while True:
        users = Counter(r[0] for r in rows)
        items = Counter(r[1] for r in rows)
        kept = [r for r in rows if users[r[0]] >= min_core and items[r[1]] >= min_core]
        if len(kept) == len(rows):
            return kept
        rows = kept


def load_interactions(path: str | Path, min_core: int = 5) -> InteractionCorpus:
    """Read ``user<TAB>item<TAB>timestamp`` lines into a leave-one-out corpus.

    k-core filtering is iterated to a fixpoint. Equal timestamps keep file
    order. Users left with fewer than three interactions are dropped.
    """
    rows: list[tuple[str, str, int]] = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not parts[0] or not parts[1]:
                raise CorpusFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            try:
                ts = int(parts[2])
            except ValueError:
                raise CorpusFormatError(f"{path}:{lineno}: timestamp {parts[2]!r} is not an integer") from None
            rows.append((parts[0], parts[1], ts))

    if min_core > 1:
        rows = _kcore(rows, min_core)

    per_user: dict[str, list[tuple[int, int, str]]] = {}
    for order, (user, item, ts) in enumerate(rows):
        per_user.setdefault(user, []).append((ts, order, item))

    dropped = sum(1 for events in per_user.values() if len(events) < 3)
    if dropped:
        log.warning("dropped %d users with fewer than 3 interactions", dropped)

    item_index: dict[str, int] = {}
    user_tokens, sequences = [], []
    for user, events in per_user.items():
        if len(events) < 3:
            continue
        events.sort()
        seq = [item_index.setdefault(item, len(item_index)) for _, _, item in events]
        user_tokens.append(user)
        sequences.append(np.asarray(seq, dtype=np.int64))
    if not sequences:
        raise CorpusFormatError(f"{path}: no users left after filtering")
    # items seen only in dropped users have no index; re-densify
    used = np.unique(np.concatenate(sequences))
    tokens = list(item_index)
    if len(used) != len(tokens):
        remap = np.full(len(tokens), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        sequences = [remap[s] for s in sequences]
        tokens = [tokens[i] for i in used]
    return InteractionCorpus(tokens, user_tokens, sequences, dropped_users=dropped)


# -- embedding files -------------------------------------------------------------


@dataclass
class EmbeddingMatrix:
    rows: np.ndarray
    tokens: list[str] | None = None

    def __post_init__(self):
        self.rows = np.ascontiguousarray(self.rows, dtype=np.float32)
        if self.rows.ndim != 2:
            raise ValueError(f"embedding matrix must be 2-D, got shape {self.rows.shape}")
        bad = ~np.isfinite(self.rows).all(axis=1)
        if bad.any():
            raise ValueError(f"non-finite value in embedding row {int(np.argmax(bad))}")
        if self.tokens is not None and len(self.tokens) != len(self.rows):
            raise ValueError(f"{len(self.tokens)} tokens for {len(self.rows)} rows")

    @property
    def n_items(self) -> int:
        return self.rows.shape[0]

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def bind(self, corpus: InteractionCorpus) -> "EmbeddingMatrix":
        """Reorder rows to the corpus item indexing (by token when available)."""
        if self.tokens is None:
            if self.n_items != corpus.n_items:
                raise ValueError(f"{self.n_items} embedding rows for {corpus.n_items} corpus items")
            return self
        where = {tok: i for i, tok in enumerate(self.tokens)}
        missing = [t for t in corpus.item_tokens if t not in where]
        if missing:
            raise ValueError(f"{len(missing)} corpus items lack embeddings, e.g. {missing[0]!r}")
        order = [where[t] for t in corpus.item_tokens]
        return EmbeddingMatrix(self.rows[order], list(corpus.item_tokens))


def tokens_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".tokens")


def save_embeddings(path: str | Path, matrix: EmbeddingMatrix) -> None:
    rows = matrix.rows.astype("<f4", copy=False)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, rows.shape[0], rows.shape[1]))
        f.write(rows.tobytes(order="C"))
    if matrix.tokens is not None:
        tokens_path(path).write_text("".join(f"{t}\n" for t in matrix.tokens), encoding="utf-8")


def load_embeddings(path: str | Path) -> EmbeddingMatrix:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CorpusFormatError(f"{path}: truncated header")
    magic, version, n, dim = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CorpusFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise CorpusFormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * n * dim
    if len(blob) < expected:
        raise CorpusFormatError(f"{path}: truncated payload ({len(blob)} of {expected} bytes)")
    if len(blob) > expected:
        raise CorpusFormatError(f"{path}: {len(blob) - expected} trailing bytes")
    rows = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=_HEADER.size).reshape(n, dim)
    bad = ~np.isfinite(rows).all(axis=1)
    if bad.any():
        raise CorpusFormatError(f"{path}: non-finite value in row {int(np.argmax(bad))}")
    tokens = None
    tpath = tokens_path(path)
    if tpath.exists():
        tokens = tpath.read_text(encoding="utf-8").splitlines()
        if len(tokens) != n:
            raise CorpusFormatError(f"{tpath}: {len(tokens)} tokens for {n} rows")
    return EmbeddingMatrix(rows.astype(np.float32), tokens)


# -- synthetic corpus ---------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-category world: noisy semantic centroids plus a category Markov chain."""

    n_categories: int = 8
    items_per_category: int = 32
    n_users: int = 2000
    sequence_length: int = 12
    within_category_transition_prob: float = 0.9
    embedding_noise_std: float = 0.1
    semantic_dim: int = 64
    seed: int = 2024

    def __post_init__(self):
        for name in ("n_categories", "items_per_category", "n_users", "semantic_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.sequence_length < 3:
            raise ValueError("sequence_length must be >= 3 for the leave-one-out split")
        if not 0.0 <= self.within_category_transition_prob <= 1.0:
            raise ValueError("within_category_transition_prob must lie in [0, 1]")
        if self.embedding_noise_std < 0:
            raise ValueError("embedding_noise_std must be >= 0")

    @property
    def n_items(self) -> int:
        return self.n_categories * self.items_per_category

    def category_of(self, item) -> np.ndarray:
        return np.asarray(item) // self.items_per_category


def generate_synthetic(spec: SyntheticSpec) -> tuple[InteractionCorpus, EmbeddingMatrix]:
    rng = np.random.default_rng(spec.seed)
    centroids = rng.normal(size=(spec.n_categories, spec.semantic_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    cats = np.repeat(np.arange(spec.n_categories), spec.items_per_category)
    noise = rng.normal(size=(spec.n_items, spec.semantic_dim)) * spec.embedding_noise_std
    semantic = centroids[cats] + noise

    n_cat, per_cat, p_stay = spec.n_categories, spec.items_per_category, spec.within_category_transition_prob
    sequences = []
    for _ in range(spec.n_users):
        cat = int(rng.integers(n_cat))
        seq = np.empty(spec.sequence_length, dtype=np.int64)
        for t in range(spec.sequence_length):
            if t > 0 and n_cat > 1 and rng.random() >= p_stay:
                # jump to a different category, uniformly
                cat = (cat + 1 + int(rng.integers(n_cat - 1))) % n_cat
            seq[t] = cat * per_cat + int(rng.integers(per_cat))
        sequences.append(seq)

    item_tokens = [f"i{i}" for i in range(spec.n_items)]
    user_tokens = [f"u{u}" for u in range(spec.n_users)]
    corpus = InteractionCorpus(item_tokens, user_tokens, sequences)
    return corpus, EmbeddingMatrix(semantic, list(item_tokens))
