"""Ranking metrics, the modality-dominance measure and baseline embeddings."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .corpus import EmbeddingMatrix, InteractionCorpus
from .quantizer import kmeans

log = logging.getLogger(__name__)


# -- ranking metrics ------------------------------------------------------------------


def _as_items(entry) -> list[int] | None:
    if entry is None:
        return None
    return list(entry.items) if hasattr(entry, "items") and not isinstance(entry, Mapping) else list(entry)


def _rankings(ranked, n_users: int) -> list[list[int] | None]:
    if isinstance(ranked, Mapping):
        return [_as_items(ranked.get(u)) for u in range(n_users)]
    ranked = list(ranked)
    if len(ranked) < n_users:
        ranked += [None] * (n_users - len(ranked))
    return [_as_items(r) for r in ranked[:n_users]]


def hit_ranks(ranked, truth) -> np.ndarray:
    """0-based rank of each user's held-out item, -1 when absent or unranked."""
    truth = np.asarray(truth)
    lists = _rankings(ranked, len(truth))
    missing = sum(r is None for r in lists)
    if missing:
        log.warning("%d users have no ranked list; counted as misses", missing)
    ranks = np.full(len(truth), -1, dtype=np.int64)
    for u, (lst, t) in enumerate(zip(lists, truth)):
        if lst is not None and t in lst:
            ranks[u] = lst.index(t)
    return ranks


def _check_k(k: int) -> None:
    if k < 1:
        raise ValueError("K must be >= 1")


def recall_at_k(ranked, truth, k: int) -> float:
    _check_k(k)
    ranks = hit_ranks(ranked, truth)
    return float(np.mean((ranks >= 0) & (ranks < k))) if len(ranks) else 0.0


def ndcg_at_k(ranked, truth, k: int) -> float:
    """Single relevant item: 1/log2(j+1) at 1-based hit position j, else 0."""
    _check_k(k)
    ranks = hit_ranks(ranked, truth)
    gains = [1.0 / math.log2(r + 2) if 0 <= r < k else 0.0 for r in ranks]
    return float(np.mean(gains)) if gains else 0.0


@dataclass
class MetricReport:
    recall_at: dict[int, float]
    ndcg_at: dict[int, float]
    n_users: int

    def to_dict(self) -> dict:
        return {"n_users": self.n_users,
                "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
                "ndcg_at": {str(k): v for k, v in sorted(self.ndcg_at.items())}}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        ks = sorted(self.recall_at)
        header = ["metric"] + [f"@{k}" for k in ks]
        rows = [["Recall"] + [f"{self.recall_at[k]:.4f}" for k in ks],
                ["NDCG"] + [f"{self.ndcg_at[k]:.4f}" for k in ks]]
        return format_table(header, rows) + f"\nusers: {self.n_users}\n"


def evaluate(ranked, truth, ks: Sequence[int] = (10, 20)) -> MetricReport:
    return MetricReport({k: recall_at_k(ranked, truth, k) for k in ks},
                        {k: ndcg_at_k(ranked, truth, k) for k in ks}, len(truth))


def format_table(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    lines = ["  ".join(str(c).ljust(w) if i == 0 else str(c).rjust(w) for i, (c, w) in enumerate(zip(r, widths)))
             for r in [header] + rows]
    return "\n".join(lines)


def popularity_ranking(corpus: InteractionCorpus, k: int) -> list[int]:
    """Most frequent training items first, ties to the lower index."""
    counts = corpus.item_counts(train_only=True)
    return np.lexsort((np.arange(len(counts)), -counts))[:k].tolist()


def split_truth(corpus: InteractionCorpus, split: str = "test") -> np.ndarray:
    return np.array([corpus.eval_query(u, split)[1] for u in range(corpus.n_users)], dtype=np.int64)


# -- dominance -----------------------------------------------------------------------


@dataclass
class DominanceReport:
    similarity_semantic: float
    similarity_collaborative: float
    kl_s_e: float
    kl_c_e: float
    n_clusters: int

    @property
    def max_share(self) -> float:
        return max(self.similarity_semantic, self.similarity_collaborative)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def to_text(self) -> str:
        rows = [["semantic", f"{self.similarity_semantic:.4f}", f"{self.kl_s_e:.6f}"],
                ["collaborative", f"{self.similarity_collaborative:.4f}", f"{self.kl_c_e:.6f}"]]
        return format_table(["modality", "share", "KL(.||E)"], rows) + f"\nclusters: {self.n_clusters}\n"


def _rows(x) -> np.ndarray:
    return np.asarray(x.rows if isinstance(x, EmbeddingMatrix) else x, dtype=np.float64)


def similarity_profile(x: np.ndarray) -> np.ndarray:
    """Cosine similarity of every item to every item; independent of width and rotation."""
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("zero embedding row has no direction")
    unit = x / norms
    return unit @ unit.T


def _standardize(x: np.ndarray, name: str) -> np.ndarray:
    std = x.std()
    if not std > 0:
        raise ValueError(f"{name} has zero variance")
    return (x - x.mean()) / std


def _smoothed_hist(labels: np.ndarray, k: int) -> np.ndarray:
    counts = np.bincount(labels, minlength=k).astype(np.float64) + 1.0
    return counts / counts.sum()


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    return float(np.sum(p * np.log(p / q)))


def dominance_similarity(S, C, E, n_clusters: int = 10, seed: int = 2024) -> DominanceReport:
    """Share of E's cluster distribution attributable to each modality.

    Every matrix is mapped to its item-by-item cosine profile so matrices of
    different widths live in one space; profiles are standardized per matrix,
    pooled and clustered. Each matrix becomes a +1-smoothed histogram over the
    clusters and the shares follow from KL(S||E) and KL(C||E).
    """
    mats = [_rows(S), _rows(C), _rows(E)]
    if len({m.shape[0] for m in mats}) != 1:
        raise ValueError("S, C and E must cover the same items")
    for name, m in zip("SCE", mats):
        if not m.std(axis=0).any():
            raise ValueError(f"{name} has zero variance")
    prof = [_standardize(similarity_profile(m), name) for name, m in zip("SCE", mats)]
    # fixed block order keeps the result exactly symmetric under S <-> C
    swap = prof[1].tobytes() < prof[0].tobytes()
    first, second = (prof[1], prof[0]) if swap else (prof[0], prof[1])
    n = mats[0].shape[0]
    pooled = np.vstack([first, second, prof[2]])
    res = kmeans(pooled, n_clusters, np.random.default_rng(seed))
    k = len(res.centroids)
    h_first, h_second, h_e = (_smoothed_hist(res.labels[i * n:(i + 1) * n], k) for i in range(3))
    h_s, h_c = (h_second, h_first) if swap else (h_first, h_second)
    kl_s, kl_c = kl_divergence(h_s, h_e), kl_divergence(h_c, h_e)
    total = kl_s + kl_c
    if total == 0:
        sem = col = 0.5
    else:
        # 1 - KL_S/(KL_S+KL_C) and 1 - KL_C/(KL_S+KL_C)
        sem, col = kl_c / total, kl_s / total
    return DominanceReport(sem, col, kl_s, kl_c, k)


# -- baseline embeddings --------------------------------------------------------------


@dataclass
class PCAResult:
    scores: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray
    mean: np.ndarray


def pca(x: np.ndarray, dim: int) -> PCAResult:
    """Principal components via SVD; ``eigenvalues`` are those of the centered scatter matrix."""
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    xc = x - mean
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    eig = sv ** 2
    tol = eig.max(initial=0.0) * max(x.shape) * np.finfo(np.float64).eps
    rank = int((eig > tol).sum())
    keep = min(dim, rank)
    if keep < dim:
        log.warning("PCA: only %d of %d requested components are available; zero-padding", keep, dim)
    comps = np.zeros((dim, x.shape[1]))
    comps[:keep] = vt[:keep]
    return PCAResult(xc @ comps.T, comps, eig, mean)


def zscore_matrix(x: np.ndarray) -> np.ndarray:
    """Center each column, then scale the whole matrix to unit standard deviation."""
    xc = np.asarray(x, dtype=np.float64) - np.asarray(x, dtype=np.float64).mean(axis=0)
    std = xc.std()
    if not std > 0:
        raise ValueError("cannot z-score a constant matrix")
    return xc / std


def concat_baseline(S, C) -> EmbeddingMatrix:
    """PCA(S) down to dim(C), z-score both matrices, concatenate row-wise."""
    s, c = _rows(S), _rows(C)
    if len(s) != len(c):
        raise ValueError(f"S has {len(s)} rows, C has {len(c)}")
    reduced = pca(s, c.shape[1]).scores
    tokens = C.tokens if isinstance(C, EmbeddingMatrix) else None
    return EmbeddingMatrix(np.hstack([zscore_matrix(reduced), zscore_matrix(c)]), tokens)
