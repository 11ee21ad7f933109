"""Reranking whole candidate sets.

``global_score`` cuts the list into ceil(|C|/M) windows in input order, scores
each window once and sorts every candidate by its list-view score.
``sliding_window`` is the multi-pass local baseline: windows of M move from the
back of the list to the front by ``stride``, each pass reordering its window and
carrying the winners forward.
"""

from __future__ import annotations

import csv
import statistics
import time
from dataclasses import dataclass, field
from typing import Sequence

import torch

from .datagen import NULL, RankingExample, Vocab, tokenize
from .layout import LayoutConfig, SequenceLayout, build_layout
from .model import Parameters, forward_batch

STRATEGIES = ("global_score", "sliding_window")
NULL_DOCID = "<null>"


def encode_window(query: str, texts: Sequence[str], vocab: Vocab, config: LayoutConfig) -> SequenceLayout:
    return build_layout(tokenize(query, vocab), [tokenize(t, vocab) for t in texts], config)


def encode_example(ex: RankingExample, vocab: Vocab, config: LayoutConfig) -> SequenceLayout:
    return encode_window(ex.query, [c.text for c in ex.candidates], vocab, config)


@dataclass
class Reranker:
    params: Parameters
    vocab: Vocab
    max_candidate_tokens: int = 32
    chunk: int = 16

    def layout_config(self, window_size: int) -> LayoutConfig:
        return self.vocab.layout_config(window_size, self.max_candidate_tokens)


@dataclass
class RerankRequest:
    query: str
    candidates: list[tuple[str, str]]
    window_size: int = 20
    strategy: str = "global_score"
    stride: int = 10
    use_point_scores: bool = False

    def __post_init__(self):
        if not self.candidates:
            raise ValueError("empty candidate list")
        if self.window_size < 1:
            raise ValueError("window_size must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "sliding_window" and not 1 <= self.stride <= self.window_size:
            raise ValueError("stride must lie in [1, window_size]")
        ids = [c[0] for c in self.candidates]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate candidate ids")


@dataclass
class RerankResult:
    ids: list[str]
    scores: list[float] | None
    forwards: int
    latency_ms: float = 0.0
    extra: dict = field(default_factory=dict)


def _score_windows(reranker: Reranker, request: RerankRequest, windows: list[list[tuple[str, str]]]) -> list[list[float]]:
    """One forward per window; short windows are padded with the null candidate."""
    M = request.window_size
    cfg = reranker.layout_config(M)
    layouts = []
    for win in windows:
        texts = [text for _, text in win] + [NULL] * (M - len(win))
        layouts.append(encode_window(request.query, texts, reranker.vocab, cfg))
    with torch.no_grad():
        bundles = forward_batch(reranker.params, layouts, chunk=reranker.chunk)
    out = []
    for win, b in zip(windows, bundles):
        s = b.ps if request.use_point_scores else b.ls
        out.append([float(v) for v in s[: len(win)]])
    return out


def score_all(reranker: Reranker, request: RerankRequest) -> RerankResult:
    t0 = time.perf_counter()
    M = request.window_size
    cands = list(request.candidates)
    windows = [cands[s:s + M] for s in range(0, len(cands), M)]
    flat = [v for w in _score_windows(reranker, request, windows) for v in w]
    # stable sort keeps retriever order among equal scores
    order = sorted(range(len(cands)), key=lambda i: -flat[i])
    return RerankResult([cands[i][0] for i in order], [flat[i] for i in order], len(windows),
                        (time.perf_counter() - t0) * 1e3)


def sliding_window_rerank(reranker: Reranker, request: RerankRequest) -> RerankResult:
    """Back-to-front passes; the last pass always starts at the head of the list.

    With r = (|C| - M) mod stride > 0 the r lowest retriever positions are never
    inside a window and keep their input order at the bottom.
    """
    t0 = time.perf_counter()
    M, stride = request.window_size, request.stride
    cur = list(request.candidates)
    n = len(cur)
    if n <= M:
        res = score_all(reranker, request)
        return RerankResult(res.ids, None, 1, (time.perf_counter() - t0) * 1e3)
    passes = (n - M) // stride
    forwards = 0
    for start in range(passes * stride, -1, -stride):
        win = cur[start:start + M]
        (scores,) = _score_windows(reranker, request, [win])
        forwards += 1
        order = sorted(range(len(win)), key=lambda i: -scores[i])
        cur[start:start + M] = [win[i] for i in order]
    return RerankResult([c[0] for c in cur], None, forwards, (time.perf_counter() - t0) * 1e3)


def rerank(reranker: Reranker, request: RerankRequest) -> RerankResult:
    if request.strategy == "global_score":
        return score_all(reranker, request)
    return sliding_window_rerank(reranker, request)


def expected_forwards(n: int, window_size: int, strategy: str, stride: int = 10) -> int:
    if strategy == "global_score":
        return -(-n // window_size)
    return 1 if n <= window_size else (n - window_size) // stride + 1


def _pool(candidates: Sequence[tuple[str, str]], n: int) -> list[tuple[str, str]]:
    out = []
    for i in range(n):
        docid, text = candidates[i % len(candidates)]
        out.append((docid if i < len(candidates) else f"{docid}#{i // len(candidates)}", text))
    return out


def latency_bench(reranker: Reranker, query: str, candidates: Sequence[tuple[str, str]], sizes: Sequence[int],
                  strategies: Sequence[str] = STRATEGIES, window_size: int = 20, stride: int = 10,
                  repeats: int = 3) -> list[tuple[str, int, int, float]]:
    """Median wall-clock latency per (strategy, |C|); candidates are cycled to reach larger sizes."""
    if list(sizes) != sorted(sizes):
        raise ValueError("sizes must be ascending")
    rows = []
    for strategy in strategies:
        for n in sizes:
            req = RerankRequest(query, _pool(candidates, n), window_size, strategy, min(stride, window_size))
            times, forwards = [], 0
            for _ in range(max(repeats, 3)):
                t0 = time.perf_counter()
                forwards = rerank(reranker, req).forwards
                times.append((time.perf_counter() - t0) * 1e3)
            rows.append((strategy, n, forwards, statistics.median(times)))
    return rows


def write_bench_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "num_candidates", "forwards", "latency_ms"])
        for strategy, n, forwards, ms in rows:
            w.writerow([strategy, n, forwards, f"{ms:.3f}"])
