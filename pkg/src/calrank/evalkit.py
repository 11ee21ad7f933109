"""Ranking metrics, TREC run/qrels I/O and the candidate-order robustness harness.

NDCG uses linear gain (rel / log2(rank + 1)), as in trec_eval's ``ndcg_cut``.
Queries without any positive judgment score 0 and still count toward means.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Mapping, Sequence

import numpy as np

NDCG_NOTE = "gain=linear discount=log2(rank+1) zero-positive-queries=counted-as-0"


@dataclass(frozen=True)
class QrelRecord:
    qid: str
    docid: str
    rel: int

    def __post_init__(self):
        if self.rel < 0:
            raise ValueError(f"negative relevance for {self.qid}/{self.docid}")


@dataclass(frozen=True)
class RunRecord:
    qid: str
    docid: str
    rank: int
    score: float
    tag: str = "calrank"


def _ranked_docids(run) -> list[str]:
    run = list(run)
    if run and isinstance(run[0], RunRecord):
        ranks = sorted(r.rank for r in run)
        if ranks != list(range(1, len(run) + 1)):
            raise ValueError(f"malformed run: ranks {ranks[:10]}... are not 1..{len(run)} without gaps")
        return [r.docid for r in sorted(run, key=lambda r: r.rank)]
    return [str(d) for d in run]


def dcg(gains: Sequence[float], k: int) -> float:
    return sum(g / math.log2(i + 2) for i, g in enumerate(gains[:k]))


def ndcg_at_k(run, qrels: Mapping[str, int], k: int = 10) -> float:
    """NDCG@k of one query's ranking.

    ``run`` is either ranked docids or RunRecords (validated for rank gaps);
    ``qrels`` maps docid to graded relevance, unjudged documents count as 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    docs = _ranked_docids(run)
    ideal = sorted((r for r in qrels.values() if r > 0), reverse=True)
    if not ideal:
        return 0.0
    gains = [qrels.get(d, 0) for d in docs]
    return dcg(gains, k) / dcg(ideal, k)


def kendall_tau(order_a: Sequence, order_b: Sequence) -> float:
    """Tau-a between two strict orderings of the same id set."""
    if len(order_a) != len(set(order_a)) or len(order_b) != len(set(order_b)):
        raise ValueError("orders must not repeat ids")
    if set(order_a) != set(order_b):
        raise ValueError("orders rank different id sets")
    n = len(order_a)
    if n < 2:
        raise ValueError("kendall_tau needs at least 2 items")
    pos_b = {d: i for i, d in enumerate(order_b)}
    b = np.array([pos_b[d] for d in order_a])
    # pairs (i < j) in order_a are concordant when b[i] < b[j]
    upper = np.triu(np.ones((n, n), dtype=bool), k=1)
    concordant = int(((b[:, None] < b[None, :]) & upper).sum())
    pairs = n * (n - 1) // 2
    return (2 * concordant - pairs) / pairs


def group_qrels(records: Iterable[QrelRecord]) -> dict[str, dict[str, int]]:
    out: dict[str, dict[str, int]] = defaultdict(dict)
    for r in records:
        if r.docid in out[r.qid]:
            raise ValueError(f"duplicate judgment for {r.qid}/{r.docid}")
        out[r.qid][r.docid] = r.rel
    return dict(out)


def group_run(records: Iterable[RunRecord]) -> dict[str, list[RunRecord]]:
    out: dict[str, list[RunRecord]] = defaultdict(list)
    for r in records:
        out[r.qid].append(r)
    return dict(out)


def evaluate_run(run: Iterable[RunRecord], qrels: Iterable[QrelRecord], k: int = 10) -> dict[str, float]:
    """Per-query NDCG@k for every query in the run."""
    judged = group_qrels(qrels)
    return {qid: ndcg_at_k(recs, judged.get(qid, {}), k) for qid, recs in group_run(run).items()}


def read_qrels(path) -> list[QrelRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 4:
                raise ValueError(f"{path}:{n}: expected 'qid 0 docid rel', got {line.strip()!r}")
            try:
                rel = int(parts[3])
                out.append(QrelRecord(parts[0], parts[2], rel))
            except ValueError as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
    return out


def write_qrels(path, records: Iterable[QrelRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.qid} 0 {r.docid} {r.rel}\n")


def read_run(path) -> list[RunRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{n}: expected 'qid Q0 docid rank score tag', got {line.strip()!r}")
            try:
                out.append(RunRecord(parts[0], parts[2], int(parts[3]), float(parts[4]), parts[5]))
            except ValueError as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
    return out


def write_run(path, records: Iterable[RunRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            # repr() of a float round-trips exactly through float()
            fh.write(f"{r.qid} Q0 {r.docid} {r.rank} {float(r.score)!r} {r.tag}\n")


def position_bias_experiment(reranker, eval_set, qrels: Iterable[QrelRecord], window_size: int,
                             modes: Sequence[str] = ("original", "reversed", "random"), seed: int = 0,
                             k: int = 10) -> dict:
    """Rerank every query under each candidate input order with global scoring.

    Returns ``{"table": [(mode, mean_ndcg, queries)], "disagreement": {qid: int}}`` where
    disagreement is the largest rank shift of any document between any two modes.
    """
    from .inference import RerankRequest, score_all

    judged = group_qrels(qrels)
    per_mode: dict[str, list[float]] = {m: [] for m in modes}
    disagreement: dict[str, int] = {}
    for qi, ex in enumerate(eval_set):
        n = len(ex.candidates)
        rankings = {}
        for mode in modes:
            if mode == "original":
                order = list(range(n))
            elif mode == "reversed":
                order = list(range(n))[::-1]
            elif mode == "random":
                order = list(np.random.default_rng([seed, qi]).permutation(n))
            else:
                raise ValueError(f"unknown mode {mode!r}")
            cands = [(ex.candidates[i].docid, ex.candidates[i].text) for i in order]
            result = score_all(reranker, RerankRequest(ex.query, cands, window_size))
            rankings[mode] = result.ids
            per_mode[mode].append(ndcg_at_k(result.ids, judged.get(ex.qid, {}), k))
        worst = 0
        for a, b in combinations(modes, 2):
            pos_a = {d: i for i, d in enumerate(rankings[a])}
            worst = max(worst, max(abs(pos_a[d] - i) for i, d in enumerate(rankings[b])))
        disagreement[ex.qid] = worst
    table = [(m, float(np.mean(v)) if v else 0.0, len(v)) for m, v in per_mode.items()]
    return {"table": table, "disagreement": disagreement}


def write_bias_table(path, table) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "mean_ndcg@10", "queries"])
        for mode, score, n in table:
            w.writerow([mode, repr(float(score)), n])
