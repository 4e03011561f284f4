"""Hierarchical k-means residual quantization and the item code table.

Each level clusters the residuals of all items with one shared codebook; the
chosen centroid is subtracted and the next level clusters what is left.
Items whose full code collides get one extra disambiguation index.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CorpusFormatError, EmbeddingMatrix, load_embeddings, save_embeddings

log = logging.getLogger(__name__)

MAX_LLOYD_ITERS = 25
_CHUNK_ELEMS = 1 << 22


def sq_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Exact float64 squared distances, chunked over rows."""
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    out = np.empty((len(x), len(c)))
    step = max(1, _CHUNK_ELEMS // max(1, c.size))
    for s in range(0, len(x), step):
        diff = x[s:s + step, None, :] - c[None, :, :]
        out[s:s + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # np.argmin returns the first minimum, i.e. the lowest centroid index on ties
    return np.argmin(sq_distances(x, centroids), axis=1)


def kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding; stops early once every point coincides with a seed."""
    n = len(x)
    centers = [int(rng.integers(n))]
    d2 = sq_distances(x, x[centers]).min(axis=1)
    while len(centers) < k:
        total = d2.sum()
        if total <= 0:
            break
        cdf = np.cumsum(d2)
        pick = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        pick = min(pick, n - 1)
        centers.append(pick)
        d2 = np.minimum(d2, sq_distances(x, x[pick:pick + 1])[:, 0])
    return x[centers].astype(np.float64)


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objectives: list[float] = field(default_factory=list)
    n_iter: int = 0


def _canonical(centroids: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # number clusters by their smallest member index so codes do not depend on seeding order
    first = np.full(len(centroids), len(labels), dtype=np.int64)
    np.minimum.at(first, labels, np.arange(len(labels)))
    keep = np.argsort(first, kind="stable")
    keep = keep[first[keep] < len(labels)]
    remap = np.full(len(centroids), -1, dtype=np.int64)
    remap[keep] = np.arange(len(keep))
    return centroids[keep], remap[labels]


def lloyd(x: np.ndarray, centroids: np.ndarray, max_iter: int = MAX_LLOYD_ITERS) -> KMeansResult:
    """Lloyd iterations from the given centroids; empty clusters are dropped."""
    x = np.asarray(x, dtype=np.float64)
    cent = np.asarray(centroids, dtype=np.float64)
    labels = None
    objectives = []
    for it in range(1, max_iter + 1):
        dist = sq_distances(x, cent)
        new = np.argmin(dist, axis=1)
        objectives.append(float(dist[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        live = np.unique(labels)
        remap = np.full(len(cent), -1, dtype=np.int64)
        remap[live] = np.arange(len(live))
        labels = remap[labels]
        sums = np.zeros((len(live), x.shape[1]))
        np.add.at(sums, labels, x)
        cent = sums / np.bincount(labels, minlength=len(live))[:, None]
    else:
        dist = sq_distances(x, cent)
        labels = np.argmin(dist, axis=1)
        objectives.append(float(dist[np.arange(len(x)), labels].sum()))
    cent, labels = _canonical(cent, labels)
    return KMeansResult(cent, labels, objectives, it)


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator, max_iter: int = MAX_LLOYD_ITERS) -> KMeansResult:
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    return lloyd(x, kmeans_pp_init(x, min(k, len(x)), rng), max_iter)


# -- code table -----------------------------------------------------------------


class UnicodeTable:
    """Per-item code sequences plus the prefix trie used for decoding.

    Every code has ``levels`` base entries in ``[0, K)``; items that would
    otherwise collide carry one more disambiguation entry.
    """

    def __init__(self, codes, K: int, levels: int, tokens: list[str] | None = None):
        self.codes = [tuple(int(c) for c in code) for code in codes]
        self.K, self.levels = int(K), int(levels)
        self.tokens = list(tokens) if tokens is not None else None
        if self.tokens is not None and len(self.tokens) != len(self.codes):
            raise ValueError(f"{len(self.tokens)} tokens for {len(self.codes)} codes")
        self._validate()
        self._build_trie()

    def _validate(self) -> None:
        if self.K < 1 or self.levels < 1:
            raise ValueError("K and levels must be >= 1")
        seen: dict[tuple, int] = {}
        for i, code in enumerate(self.codes):
            if len(code) not in (self.levels, self.levels + 1):
                raise ValueError(f"item {i}: code length {len(code)} not in {{{self.levels}, {self.levels + 1}}}")
            if any(c < 0 or c >= self.K for c in code[: self.levels]) or min(code) < 0:
                raise ValueError(f"item {i}: code {code} outside [0, {self.K})")
            if code in seen:
                raise ValueError(f"items {seen[code]} and {i} share the full code {code}")
            seen[code] = i

    def _build_trie(self) -> None:
        nxt: dict[tuple, set] = {}
        self._leaf: dict[tuple, int] = {}
        for i, code in enumerate(self.codes):
            for t in range(len(code)):
                nxt.setdefault(code[:t], set()).add(code[t])
            self._leaf[code] = i
        clash = [c for c in self._leaf if c in nxt]
        if clash:
            raise ValueError(f"code {clash[0]} is both an item and a prefix of another item")
        self._next = {p: np.array(sorted(s), dtype=np.int64) for p, s in nxt.items()}

    @property
    def n_items(self) -> int:
        return len(self.codes)

    @property
    def has_disambiguation(self) -> bool:
        return any(len(c) > self.levels for c in self.codes)

    @property
    def max_length(self) -> int:
        return max(len(c) for c in self.codes)

    def level_sizes(self) -> list[int]:
        """Live vocabulary size per decoding position (base levels, then disambiguation)."""
        sizes = [max(c[t] for c in self.codes) + 1 for t in range(self.levels)]
        if self.has_disambiguation:
            sizes.append(max(c[self.levels] for c in self.codes if len(c) > self.levels) + 1)
        return sizes

    def allowed_next(self, prefix) -> np.ndarray:
        """Codes that extend ``prefix`` toward some item (empty at a leaf)."""
        return self._next.get(tuple(prefix), np.empty(0, dtype=np.int64))

    def item_of(self, code) -> int | None:
        return self._leaf.get(tuple(code))

    def items_under(self, prefix) -> list[int]:
        prefix = tuple(prefix)
        return [i for i, c in enumerate(self.codes) if c[: len(prefix)] == prefix]

    def code_matrix(self) -> np.ndarray:
        """(n_items, L) base codes."""
        return np.array([c[: self.levels] for c in self.codes], dtype=np.int64).reshape(self.n_items, self.levels)

    def storage_bytes(self) -> int:
        return 4 * sum(len(c) for c in self.codes)

    def __eq__(self, other) -> bool:
        return (isinstance(other, UnicodeTable) and self.codes == other.codes and self.levels == other.levels
                and self.tokens == other.tokens)

    def __repr__(self) -> str:
        return f"UnicodeTable(n_items={self.n_items}, K={self.K}, levels={self.levels})"


def disambiguate(base: np.ndarray) -> list[tuple[int, ...]]:
    """Append 0, 1, ... in ascending item order to every group of colliding codes."""
    base = np.asarray(base, dtype=np.int64)
    groups: dict[tuple, list[int]] = {}
    for i, row in enumerate(base):
        groups.setdefault(tuple(int(c) for c in row), []).append(i)
    codes: list[tuple[int, ...]] = [()] * len(base)
    for key, members in groups.items():
        if len(members) == 1:
            codes[members[0]] = key
        else:
            for j, i in enumerate(members):
                codes[i] = key + (j,)
    n_coll = sum(len(m) for m in groups.values() if len(m) > 1)
    if n_coll:
        log.info("%d items share a base code; appended a disambiguation level", n_coll)
    return codes


# -- fitting ----------------------------------------------------------------------


@dataclass
class Codebooks:
    centroids: list[np.ndarray]
    K: int
    seed: int = 0

    def __post_init__(self):
        if not self.centroids:
            raise ValueError("need at least one level")
        for l, c in enumerate(self.centroids):
            if not np.isfinite(c).all():
                raise ValueError(f"non-finite centroid at level {l}")

    @property
    def levels(self) -> int:
        return len(self.centroids)

    @property
    def dim(self) -> int:
        return self.centroids[0].shape[1]

    def reconstruct(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        return sum(self.centroids[l][codes[:, l]] for l in range(self.levels))


@dataclass
class HierarchicalFit:
    codebooks: Codebooks
    codes: np.ndarray
    residuals: list[np.ndarray]
    objectives: list[list[float]]


def hierarchical_kmeans(vectors: np.ndarray, K: int, L: int, seed: int = 2024) -> HierarchicalFit:
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or len(vectors) < 1:
        raise ValueError("need a non-empty 2-D embedding matrix")
    if K < 1 or L < 1:
        raise ValueError("K and L must be >= 1")
    rng = np.random.default_rng(seed)
    residual = vectors.copy()
    residuals, centroids, codes, objectives = [residual], [], [], []
    for level in range(L):
        res = kmeans(residual, K, rng)
        residual = residual - res.centroids[res.labels]
        centroids.append(res.centroids)
        codes.append(res.labels)
        residuals.append(residual)
        objectives.append(res.objectives)
        log.debug("level %d: %d live centroids, %d Lloyd iterations", level, len(res.centroids), res.n_iter)
    return HierarchicalFit(Codebooks(centroids, K, seed), np.stack(codes, axis=1), residuals, objectives)


def fit(embeddings, K: int = 256, L: int = 4, seed: int = 2024) -> tuple[Codebooks, UnicodeTable]:
    rows = embeddings.rows if isinstance(embeddings, EmbeddingMatrix) else np.asarray(embeddings)
    tokens = embeddings.tokens if isinstance(embeddings, EmbeddingMatrix) else None
    result = hierarchical_kmeans(rows, K, L, seed)
    return result.codebooks, UnicodeTable(disambiguate(result.codes), K, L, tokens)


def quantization_error(embeddings, codebooks: Codebooks, table: UnicodeTable) -> float:
    rows = embeddings.rows if isinstance(embeddings, EmbeddingMatrix) else np.asarray(embeddings)
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[1] != codebooks.dim:
        raise ValueError(f"embedding width {rows.shape[1]} != codebook width {codebooks.dim}")
    r = rows - codebooks.reconstruct(table.code_matrix())
    return float(np.mean(np.einsum("nd,nd->n", r, r)))


def random_assignment(n_items: int, K: int, L: int, seed: int = 2024, exhaustive: bool = False) -> UnicodeTable:
    """Uniform random codes; ``exhaustive`` draws distinct codes without replacement."""
    if K < 1 or L < 1 or n_items < 1:
        raise ValueError("n_items, K and L must be >= 1")
    rng = np.random.default_rng(seed)
    if exhaustive:
        if n_items > K ** L:
            raise ValueError(f"{n_items} items do not fit in {K}^{L} distinct codes")
        flat = rng.choice(K ** L, size=n_items, replace=False)
        base = np.stack([(flat // K ** (L - 1 - l)) % K for l in range(L)], axis=1)
    else:
        base = rng.integers(K, size=(n_items, L))
    return UnicodeTable(disambiguate(base), K, L)


# -- persistence -------------------------------------------------------------------


def save_table(path: str | Path, table: UnicodeTable) -> None:
    tokens = table.tokens or [str(i) for i in range(table.n_items)]
    with open(path, "w", encoding="utf-8") as f:
        for tok, code in zip(tokens, table.codes):
            f.write(f"{tok}\t{' '.join(map(str, code))}\n")


def load_table(path: str | Path, levels: int | None = None, K: int | None = None) -> UnicodeTable:
    """Read a code table.

    The base depth defaults to the shortest code; pass ``levels`` when every
    item may carry a disambiguation entry.
    """
    tokens, codes, seen = [], [], {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0]:
                raise CorpusFormatError(f"{path}:{lineno}: expected 'token<TAB>codes'")
            try:
                code = tuple(int(c) for c in parts[1].split())
            except ValueError:
                raise CorpusFormatError(f"{path}:{lineno}: codes must be integers") from None
            if not code or min(code) < 0:
                raise CorpusFormatError(f"{path}:{lineno}: codes must be non-negative integers")
            if code in seen:
                raise CorpusFormatError(f"{path}:{lineno}: full code duplicates line {seen[code]}")
            seen[code] = lineno
            tokens.append(parts[0])
            codes.append(code)
    if not codes:
        raise CorpusFormatError(f"{path}: empty code table")
    levels = levels or min(len(c) for c in codes)
    K = K or max(max(c[:levels]) for c in codes) + 1
    try:
        return UnicodeTable(codes, K, levels, tokens)
    except ValueError as exc:
        raise CorpusFormatError(f"{path}: {exc}") from None


CODEBOOK_MANIFEST = "codebooks.json"


def save_codebooks(directory: str | Path, codebooks: Codebooks) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for l, c in enumerate(codebooks.centroids):
        save_embeddings(directory / f"level{l}.unge", EmbeddingMatrix(c))
    meta = {"K": codebooks.K, "L": codebooks.levels, "d": codebooks.dim, "seed": codebooks.seed,
            "live": [len(c) for c in codebooks.centroids]}
    (directory / CODEBOOK_MANIFEST).write_text(json.dumps(meta, indent=2, sort_keys=True), encoding="utf-8")


def load_codebooks(directory: str | Path) -> Codebooks:
    directory = Path(directory)
    meta = json.loads((directory / CODEBOOK_MANIFEST).read_text(encoding="utf-8"))
    cents = []
    for l in range(meta["L"]):
        c = load_embeddings(directory / f"level{l}.unge").rows.astype(np.float64)
        if c.shape[1] != meta["d"]:
            raise CorpusFormatError(f"{directory}: level {l} width {c.shape[1]} != {meta['d']}")
        cents.append(c)
    return Codebooks(cents, meta["K"], meta["seed"])
