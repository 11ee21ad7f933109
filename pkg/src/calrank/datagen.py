"""Synthetic planted-relevance corpus and the toy whitespace tokenizer.

Each query is a small set of topic tokens. A candidate's graded relevance is the
number of query topics it contains; the rest of its text is distractor topics
and filler drawn from disjoint pools, so the signal is recoverable by a
bag-of-overlap scorer. Candidate lists come out in a noisy "retriever" order,
and permutation labels are the oracle order with random adjacent swaps.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .evalkit import QrelRecord

PAD, UNK, DOC_END, NULL, INST, QUERY = "<pad>", "<unk>", "<doc_end>", "<null>", "<rank>", "<query>"
SPECIALS = (PAD, UNK, DOC_END, NULL, INST, QUERY)


class Vocab:
    """Fixed vocabulary: specials, ``max_slots`` identifier tokens, then words ``w0000``..."""

    def __init__(self, size: int = 2048, max_slots: int = 64):
        n_reserved = len(SPECIALS) + max_slots
        if size <= n_reserved:
            raise ValueError(f"vocab size {size} leaves no room for words after {n_reserved} reserved tokens")
        self.size = size
        self.max_slots = max_slots
        self.itos = list(SPECIALS) + [f"<id_{k + 1}>" for k in range(max_slots)]
        self.num_reserved = len(self.itos)
        self.itos += [f"w{i:04d}" for i in range(size - n_reserved)]
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    def __len__(self) -> int:
        return self.size

    def __getitem__(self, token: str) -> int:
        return self.stoi[token]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    @property
    def num_words(self) -> int:
        return self.size - self.num_reserved

    def word(self, i: int) -> str:
        return self.itos[self.num_reserved + i]

    def identifier_ids(self, num_slots: int) -> tuple[int, ...]:
        if num_slots > self.max_slots:
            raise ValueError(f"window of {num_slots} exceeds the {self.max_slots} reserved identifier tokens")
        return tuple(self.stoi[f"<id_{k + 1}>"] for k in range(num_slots))

    def layout_config(self, num_slots: int, max_candidate_tokens: int = 32):
        from .layout import LayoutConfig

        return LayoutConfig(
            instruction=(self.stoi[INST], self.stoi[QUERY]),
            max_candidate_tokens=max_candidate_tokens,
            num_slots=num_slots,
            doc_end_id=self.stoi[DOC_END],
            identifier_ids=self.identifier_ids(num_slots),
            vocab_size=self.size,
        )


def tokenize(text: str, vocab: Vocab) -> list[int]:
    unk = vocab.unk_id
    return [vocab.stoi.get(tok, unk) for tok in text.split()]


def detokenize(ids: Iterable[int], vocab: Vocab) -> str:
    return " ".join(vocab.itos[i] for i in ids)


@dataclass
class Candidate:
    docid: str
    text: str


@dataclass
class RankingExample:
    """One query with its candidates; ``permutation[i]`` is the rank of candidate i (1 = best)."""

    qid: str
    query: str
    candidates: list[Candidate]
    permutation: list[int]
    relevance: list[int] | None = None
    noisy: bool = False

    def __post_init__(self):
        check_permutation(self.permutation, len(self.candidates))
        if self.relevance is not None and len(self.relevance) != len(self.candidates):
            raise ValueError("relevance length does not match candidate count")

    @property
    def num_candidates(self) -> int:
        return len(self.candidates)


def check_permutation(ranks: Sequence[int], m: int) -> None:
    if len(ranks) != m or sorted(int(r) for r in ranks) != list(range(1, m + 1)):
        raise ValueError(f"not a permutation of 1..{m}: {list(ranks)}")


@dataclass
class GenConfig:
    vocab_size: int = 2048
    max_slots: int = 64
    topic_pool: int = 400
    topics_per_query: int = 3
    # probability of a candidate sharing 0, 1, ..., topics_per_query query topics
    overlap_weights: tuple[float, ...] = (0.5, 0.25, 0.15, 0.1)
    max_distractors: int = 2
    candidate_length: tuple[int, int] = (10, 14)
    noise_rate: float = 0.05
    retriever_noise: float = 1.0
    num_slots: int = 20
    pool_size: int = 100
    num_train: int = 2000
    num_eval: int = 200
    eval_candidates: int = 100
    corrupt_fraction: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.overlap_weights = tuple(float(w) for w in self.overlap_weights)
        self.candidate_length = tuple(int(n) for n in self.candidate_length)
        for name in ("vocab_size", "topic_pool", "topics_per_query", "num_slots", "pool_size",
                     "num_train", "num_eval", "eval_candidates"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if not 0.0 <= self.corrupt_fraction <= 1.0:
            raise ValueError("corrupt_fraction must lie in [0, 1]")
        if len(self.overlap_weights) != self.topics_per_query + 1:
            raise ValueError("overlap_weights needs topics_per_query + 1 entries")
        lo, hi = self.candidate_length
        if not 1 <= lo <= hi:
            raise ValueError("candidate_length must satisfy 1 <= min <= max")
        if hi < self.topics_per_query + self.max_distractors:
            raise ValueError("candidate_length max too short for the planted topics")
        if self.pool_size < self.num_slots:
            raise ValueError("pool_size must be at least num_slots")


def oracle_order(relevance: Sequence[int], docids: Sequence[str]) -> list[int]:
    """Candidate indices by relevance descending, ties by docid ascending."""
    return sorted(range(len(relevance)), key=lambda i: (-relevance[i], docids[i]))


def ranks_from_order(order: Sequence[int]) -> list[int]:
    ranks = [0] * len(order)
    for r, i in enumerate(order):
        ranks[i] = r + 1
    return ranks


def add_adjacent_noise(order: list[int], rate: float, rng: np.random.Generator) -> list[int]:
    """Swap adjacent pairs of ``order`` at random, never touching one item twice.

    A swap at t consumes position t+1, so positions are only eligible with
    stationary probability 1/(1+p); p = rate/(1-rate) makes the expected share of
    inverted adjacent pairs equal ``rate`` (capped at 1/2).
    """
    order = list(order)
    if rate <= 0:
        return order
    p = 1.0 if rate >= 0.5 else rate / (1.0 - rate)
    t = 0
    while t < len(order) - 1:
        if rng.random() < p:
            order[t], order[t + 1] = order[t + 1], order[t]
            t += 2
        else:
            t += 1
    return order


class _Generator:
    def __init__(self, config: GenConfig):
        self.config = config
        self.vocab = Vocab(config.vocab_size, config.max_slots)
        min_filler = 2 * config.candidate_length[1]
        if self.vocab.num_words < config.topic_pool + min_filler:
            raise ValueError(
                f"vocab of {config.vocab_size} too small for a topic pool of {config.topic_pool} "
                f"plus {min_filler} filler words"
            )
        self.topics = np.arange(config.topic_pool)
        self.filler = np.arange(config.topic_pool, self.vocab.num_words)
        w = np.asarray(config.overlap_weights, dtype=float)
        self.overlap_p = w / w.sum()

    def candidate_text(self, query_topics: np.ndarray, overlap: int, rng: np.random.Generator) -> str:
        c = self.config
        length = int(rng.integers(c.candidate_length[0], c.candidate_length[1] + 1))
        shared = rng.choice(query_topics, size=overlap, replace=False)
        others = np.setdiff1d(self.topics, query_topics)
        n_dis = int(rng.integers(0, c.max_distractors + 1))
        n_dis = min(n_dis, length - overlap)
        distract = rng.choice(others, size=n_dis, replace=False)
        n_fill = max(length - overlap - n_dis, 0)
        fill = rng.choice(self.filler, size=n_fill, replace=True)
        words = np.concatenate([shared, distract, fill]).astype(int)
        rng.shuffle(words)
        return " ".join(self.vocab.word(int(i)) for i in words)

    def query(self, qid: str, n_candidates: int, keep: int, rng: np.random.Generator):
        c = self.config
        topics = rng.choice(self.topics, size=c.topics_per_query, replace=False)
        query = " ".join(self.vocab.word(int(i)) for i in topics)
        overlaps = rng.choice(len(self.overlap_p), size=n_candidates, p=self.overlap_p)
        texts = [self.candidate_text(topics, int(k), rng) for k in overlaps]
        retriever = overlaps + rng.normal(0.0, c.retriever_noise, size=n_candidates)
        order = np.argsort(-retriever, kind="stable")[:keep]
        cands = [Candidate(f"{qid}-d{int(j):03d}", texts[j]) for j in order]
        rel = [int(overlaps[j]) for j in order]
        return query, cands, rel

    def example(self, split: str, q: int) -> RankingExample:
        c = self.config
        rng = np.random.default_rng([c.seed, 0 if split == "train" else 1, q])
        qid = f"{split}{q:05d}"
        if split == "train":
            query, cands, rel = self.query(qid, c.pool_size, c.num_slots, rng)
        else:
            query, cands, rel = self.query(qid, c.eval_candidates, c.eval_candidates, rng)
        docids = [d.docid for d in cands]
        order = oracle_order(rel, docids)
        noisy = False
        if split == "train":
            if rng.random() < c.corrupt_fraction:
                order = list(rng.permutation(len(order)))
                noisy = True
            else:
                order = add_adjacent_noise(order, c.noise_rate, rng)
        return RankingExample(qid, query, cands, ranks_from_order(order), rel, noisy)


def generate(config: GenConfig) -> tuple[list[RankingExample], list[RankingExample], list[QrelRecord]]:
    gen = _Generator(config)
    train = [gen.example("train", q) for q in range(config.num_train)]
    evals = [gen.example("eval", q) for q in range(config.num_eval)]
    qrels = [
        QrelRecord(ex.qid, cand.docid, rel)
        for ex in evals
        for cand, rel in zip(ex.candidates, ex.relevance)
    ]
    return train, evals, qrels


def filter_noisy(examples: Iterable[RankingExample]) -> list[RankingExample]:
    return [ex for ex in examples if not ex.noisy]


def example_to_dict(ex: RankingExample) -> dict:
    d = {
        "qid": ex.qid,
        "query": ex.query,
        "candidates": [asdict(c) for c in ex.candidates],
        "permutation": list(ex.permutation),
    }
    if ex.relevance is not None:
        d["relevance"] = list(ex.relevance)
    if ex.noisy:
        d["noisy"] = True
    return d


def example_from_dict(d: dict) -> RankingExample:
    cands = [Candidate(str(c["docid"]), str(c["text"])) for c in d["candidates"]]
    rel = d.get("relevance")
    return RankingExample(
        qid=str(d["qid"]),
        query=str(d["query"]),
        candidates=cands,
        permutation=[int(r) for r in d["permutation"]],
        relevance=None if rel is None else [int(r) for r in rel],
        noisy=bool(d.get("noisy", False)),
    )


def write_examples(path, examples: Iterable[RankingExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_dict(ex), separators=(",", ":")) + "\n")


def read_examples(path) -> list[RankingExample]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(example_from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{n}: {exc}") from exc
    return out


def write_dataset(directory, train, evals, qrels) -> dict[str, Path]:
    from .evalkit import write_qrels

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "train": directory / "train.jsonl",
        "eval": directory / "eval.jsonl",
        "qrels": directory / "qrels.txt",
    }
    write_examples(paths["train"], train)
    write_examples(paths["eval"], evals)
    write_qrels(paths["qrels"], qrels)
    return paths
