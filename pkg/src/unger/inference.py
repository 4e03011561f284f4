"""Trie-constrained beam search and the unified-vs-dual decoding benchmark."""

from __future__ import annotations

import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .corpus import InteractionCorpus
from .generator import BOS, GenModel, history_tokens
from .numerics import Tensor
from .quantizer import UnicodeTable

USER_CHUNK = 64


@dataclass
class RankedList:
    items: list[int]
    scores: list[float]

    def __len__(self) -> int:
        return len(self.items)

    def pairs(self) -> list[tuple[int, float]]:
        return list(zip(self.items, self.scores))


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    x = logits.astype(np.float64)
    x = x - x.max(axis=-1, keepdims=True)
    return x - np.log(np.exp(x).sum(axis=-1, keepdims=True))


def _check_args(table: UnicodeTable, beam_width: int, k: int) -> None:
    if k < 1:
        raise ValueError("k must be >= 1")
    if beam_width < k:
        raise ValueError(f"beam_width {beam_width} < k {k}")
    if table.n_items == 0 or len(table.allowed_next(())) == 0:
        raise ValueError("code table is empty")


def decode_many(model: GenModel, table: UnicodeTable, histories, beam_width: int = 100, k: int = 10,
                counts: list[int] | None = None) -> list[RankedList]:
    """Beam search for several queries at once.

    Each query is encoded once; every decoding step runs one decoder pass
    over the live hypotheses of all queries. Only continuations present in
    the trie are scored. Finished items are set aside and ranked by their
    summed log-probability, ties to the lower item index. ``counts``
    receives the number of decoder steps each query used.
    """
    _check_args(table, beam_width, k)
    n = len(histories)
    finished: list[list[tuple[float, int]]] = [[] for _ in range(n)]
    steps = [0] * n
    with nx.no_grad():
        enc_tokens, enc_mask = history_tokens(model, table, histories)
        memory = model.encode(enc_tokens, enc_mask).data
        # per query: list of (score, prefix)
        beams: list[list[tuple[float, tuple]]] = [[(0.0, ())] for _ in range(n)]
        for t in range(model.depth):
            owners = [q for q in range(n) for _ in beams[q]]
            if not owners:
                break
            prefixes = [p for q in range(n) for _, p in beams[q]]
            dec = np.empty((len(prefixes), t + 1), dtype=np.int64)
            dec[:, 0] = BOS
            for r, p in enumerate(prefixes):
                dec[r, 1:] = model.code_tokens(p)
            owners_arr = np.asarray(owners)
            hidden = model.decode(Tensor(memory[owners_arr]), enc_mask[owners_arr], dec)
            logp = _log_softmax(model.heads[t](hidden.data[:, t, :]).data)
            row = 0
            for q in range(n):
                if not beams[q]:
                    continue
                steps[q] += 1
                cand = []
                for score, prefix in beams[q]:
                    allowed = table.allowed_next(prefix)
                    for c, s in zip(allowed.tolist(), (score + logp[row, allowed]).tolist()):
                        cand.append((s, prefix + (c,)))
                    row += 1
                # highest score first; equal scores resolved by the smaller code prefix
                cand.sort(key=lambda sp: (-sp[0], sp[1]))
                live = []
                for s, prefix in cand[:beam_width]:
                    item = table.item_of(prefix)
                    if item is None:
                        live.append((s, prefix))
                    else:
                        finished[q].append((s, item))
                beams[q] = live
    if counts is not None:
        counts.extend(steps)
    out = []
    for q in range(n):
        ranked = sorted(finished[q], key=lambda si: (-si[0], si[1]))[:k]
        out.append(RankedList([i for _, i in ranked], [s for s, _ in ranked]))
    return out


def beam_decode(model: GenModel, table: UnicodeTable, history, beam_width: int = 100, k: int = 10,
                counts: list[int] | None = None) -> RankedList:
    if len(history) == 0:
        raise ValueError("empty history")
    return decode_many(model, table, [history], beam_width, k, counts)[0]


def sequence_log_prob(model: GenModel, table: UnicodeTable, history, item: int) -> float:
    """Teacher-forced log-probability of ``item``'s full code."""
    code = table.codes[item]
    with nx.no_grad():
        enc_tokens, enc_mask = history_tokens(model, table, [history])
        memory = model.encode(enc_tokens, enc_mask)
        dec = np.array([[BOS] + model.code_tokens(code)], dtype=np.int64)
        hidden = model.decode(memory, enc_mask, dec).data
        total = 0.0
        for t, c in enumerate(code):
            total += float(_log_softmax(model.heads[t](Tensor(hidden[:, t, :])).data)[0, c])
    return total


def worker_count() -> int:
    raw = os.environ.get("UNGER_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"UNGER_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


def batch_recommend(model: GenModel, table: UnicodeTable, corpus: InteractionCorpus, split: str = "test",
                    beam_width: int = 100, k: int = 10, users=None, threads: int | None = None) -> list[RankedList]:
    """Rank items for every user (or ``users``) of ``split``.

    Users are decoded in fixed-size chunks, so the results do not depend on
    the worker count.
    """
    users = list(range(corpus.n_users)) if users is None else list(users)
    histories = [corpus.eval_query(u, split, model.config.max_history)[0] for u in users]
    chunks = [histories[s:s + USER_CHUNK] for s in range(0, len(histories), USER_CHUNK)]
    threads = threads or worker_count()

    def run(chunk):
        return decode_many(model, table, chunk, beam_width, k)

    if threads == 1 or len(chunks) == 1:
        parts = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    return [r for part in parts for r in part]


# -- cost benchmark ---------------------------------------------------------------


@dataclass
class CostReport:
    mode: str
    n_queries: int
    beam_width: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    decoder_forwards: int
    table_bytes: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def merge_streams(lists: list[RankedList], k: int) -> RankedList:
    """Merge per-stream rankings by raw log-probability, keeping each item's best score."""
    best: dict[int, float] = {}
    for ranked in lists:
        for item, score in ranked.pairs():
            if item not in best or score > best[item]:
                best[item] = score
    ranked = sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))[:k]
    return RankedList([i for i, _ in ranked], [s for _, s in ranked])


def bench_cost(streams: list[tuple[GenModel, UnicodeTable]], histories, beam_width: int = 100,
               k: int = 10) -> CostReport:
    """Per-query latency, decoder passes and code-table storage.

    One stream is the unified setting; two streams decode the same query
    independently and merge by score, as a dual-code system would.
    """
    if len(streams) not in (1, 2):
        raise ValueError("bench_cost takes one (unified) or two (dual) streams")
    times, forwards = [], 0
    for history in histories:
        counts: list[int] = []
        start = time.perf_counter()
        lists = [beam_decode(model, table, history, beam_width, k, counts) for model, table in streams]
        if len(lists) > 1:
            merge_streams(lists, k)
        times.append((time.perf_counter() - start) * 1000.0)
        forwards += sum(counts)
    times_arr = np.asarray(times)
    return CostReport(
        mode="unified" if len(streams) == 1 else "dual",
        n_queries=len(histories),
        beam_width=beam_width,
        mean_ms=float(times_arr.mean()) if len(times) else 0.0,
        p50_ms=float(np.percentile(times_arr, 50)) if len(times) else 0.0,
        p95_ms=float(np.percentile(times_arr, 95)) if len(times) else 0.0,
        decoder_forwards=forwards,
        table_bytes=sum(table.storage_bytes() for _, table in streams),
    )
