"""Listwise input assembly: token order, position indices and attention permissions.

Sequence shape::

    [instruction + query] [cand_1 ... <DOC_END>] ... [cand_M ... <DOC_END>] [ID_1] ... [ID_M]

Prefix tokens are plain causal. Every candidate block restarts its positions at
P (the prefix length) and sees only the prefix plus its own earlier tokens, so
each block is encoded as if it were alone. Identifier k sees the prefix, all
candidate blocks and itself, never another identifier.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

PREFIX, CANDIDATE, IDENTIFIER = 0, 1, 2
KIND_NAMES = {PREFIX: "prefix", CANDIDATE: "candidate", IDENTIFIER: "identifier"}


@dataclass(frozen=True)
class LayoutConfig:
    instruction: tuple[int, ...]
    max_candidate_tokens: int
    num_slots: int
    doc_end_id: int
    identifier_ids: tuple[int, ...]
    vocab_size: int | None = None

    def __post_init__(self):
        if self.num_slots < 1:
            raise ValueError("num_slots must be >= 1")
        if self.max_candidate_tokens < 2:
            raise ValueError("max_candidate_tokens must be >= 2 (content + <DOC_END>)")
        if len(self.identifier_ids) != self.num_slots:
            raise ValueError(f"need {self.num_slots} identifier ids, got {len(self.identifier_ids)}")
        specials = (self.doc_end_id, *self.identifier_ids)
        if len(set(specials)) != len(specials):
            raise ValueError("special token ids must be distinct")
        if self.vocab_size is not None and any(not 0 <= s < self.vocab_size for s in specials):
            raise ValueError("special token ids must lie inside the vocabulary")


@dataclass
class SequenceLayout:
    tokens: np.ndarray  # (T,) int64
    positions: np.ndarray  # (T,) int64
    kind: np.ndarray  # (T,) PREFIX / CANDIDATE / IDENTIFIER
    slot: np.ndarray  # (T,) candidate or identifier slot, -1 for prefix
    permit: np.ndarray  # (T, T) bool, permit[query, key]
    idx_st: np.ndarray  # (M,) positions of <DOC_END>
    idx_id: np.ndarray  # (M,) positions of ID_k
    prefix_len: int = 0

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def num_slots(self) -> int:
        return len(self.idx_id)

    def segment(self, i: int) -> str:
        k = int(self.kind[i])
        return "prefix" if k == PREFIX else f"{KIND_NAMES[k]}_{int(self.slot[i])}"


def build_layout(query: Sequence[int], candidates: Sequence[Sequence[int]], config: LayoutConfig) -> SequenceLayout:
    """Assemble one listwise input from token ids.

    Candidates longer than ``max_candidate_tokens - 1`` are cut from the tail
    before ``<DOC_END>`` is appended. All identifiers share the position right
    after the longest candidate block.
    """
    M = config.num_slots
    if len(candidates) != M:
        raise ValueError(f"expected {M} candidates, got {len(candidates)}")
    prefix = list(config.instruction) + list(query)
    P = len(prefix)
    if P == 0:
        raise ValueError("empty prefix: instruction and query are both empty")

    blocks = []
    for k, cand in enumerate(candidates):
        body = list(cand)[: config.max_candidate_tokens - 1]
        if not body:
            raise ValueError(f"candidate {k} is empty after truncation")
        blocks.append(body + [config.doc_end_id])
    L_max = max(len(b) for b in blocks)

    T = P + sum(len(b) for b in blocks) + M
    tokens = np.empty(T, dtype=np.int64)
    positions = np.empty(T, dtype=np.int64)
    kind = np.empty(T, dtype=np.int64)
    slot = np.full(T, -1, dtype=np.int64)
    permit = np.zeros((T, T), dtype=bool)

    tokens[:P] = prefix
    positions[:P] = np.arange(P)
    kind[:P] = PREFIX
    permit[:P, :P] = np.tri(P, dtype=bool)

    idx_st = np.empty(M, dtype=np.int64)
    cur = P
    for k, block in enumerate(blocks):
        n = len(block)
        sl = slice(cur, cur + n)
        tokens[sl] = block
        positions[sl] = P + np.arange(n)
        kind[sl] = CANDIDATE
        slot[sl] = k
        permit[sl, :P] = True
        permit[sl, sl] = np.tri(n, dtype=bool)
        idx_st[k] = cur + n - 1
        cur += n

    idx_id = np.arange(cur, cur + M, dtype=np.int64)
    tokens[idx_id] = config.identifier_ids
    positions[idx_id] = P + L_max
    kind[idx_id] = IDENTIFIER
    slot[idx_id] = np.arange(M)
    permit[cur:, :cur] = True
    permit[idx_id, idx_id] = True

    return SequenceLayout(tokens, positions, kind, slot, permit, idx_st, idx_id, prefix_len=P)


def validate_layout(layout: SequenceLayout, config: LayoutConfig | None = None) -> list[str]:
    """Return a list of violation descriptors; an empty list means the layout is valid."""
    out: list[str] = []
    T = len(layout.tokens)
    permit = np.asarray(layout.permit, dtype=bool)
    kind, slot, pos = layout.kind, layout.slot, layout.positions

    if permit.shape != (T, T):
        return [f"permit shape {permit.shape} does not match length {T}"]
    for name in ("positions", "kind", "slot"):
        if len(getattr(layout, name)) != T:
            return [f"{name} length does not match token length {T}"]
    M = len(layout.idx_id)
    if len(layout.idx_st) != M:
        out.append("idx_st and idx_id have different lengths")
        return out
    if config is not None:
        if M != config.num_slots:
            out.append(f"layout has {M} slots, config expects {config.num_slots}")
        for k in range(min(M, config.num_slots)):
            if layout.tokens[layout.idx_st[k]] != config.doc_end_id:
                out.append(f"idx_st[{k}] is not a <DOC_END> token")
            if layout.tokens[layout.idx_id[k]] != config.identifier_ids[k]:
                out.append(f"idx_id[{k}] does not hold identifier token ID_{k + 1}")

    if not permit.any(axis=1).all():
        rows = np.flatnonzero(~permit.any(axis=1))
        out.append(f"empty attention row at {rows.tolist()}")
    if not np.diag(permit).all():
        out.append("token cannot attend to itself")

    pre = np.flatnonzero(kind == PREFIX)
    P = len(pre)
    if P == 0 or not np.array_equal(pre, np.arange(P)):
        out.append("prefix is not a leading contiguous segment")
    elif not np.array_equal(pos[:P], np.arange(P)):
        out.append("prefix positions are not 0..P-1")
    elif not np.array_equal(permit[:P, :P], np.tri(P, dtype=bool)) or permit[:P, P:].any():
        out.append("prefix permissions are not causal")

    cand_pos = []
    block_len = []
    for k in range(M):
        idx = np.flatnonzero((kind == CANDIDATE) & (slot == k))
        if len(idx) == 0 or not np.array_equal(idx, np.arange(idx[0], idx[0] + len(idx))):
            out.append(f"candidate {k} block is missing or not contiguous")
            continue
        if layout.idx_st[k] != idx[-1]:
            out.append(f"idx_st[{k}] is not the last token of candidate block {k}")
        block_len.append(len(idx))
        cand_pos.append(pos[idx])
        expected = np.zeros(T, dtype=bool)
        expected[:P] = True
        for r, i in enumerate(idx):
            row = expected.copy()
            row[idx[: r + 1]] = True
            if not np.array_equal(permit[i], row):
                others = permit[i] & (kind == CANDIDATE) & (slot != k)
                if others.any():
                    out.append(f"candidate cross-attention from block {k}")
                elif (permit[i] & (kind == IDENTIFIER)).any():
                    out.append(f"candidate block {k} attends to an identifier")
                else:
                    out.append(f"candidate block {k} permissions are not block-causal")
                break
    for k, p in enumerate(cand_pos):
        if not np.array_equal(p, P + np.arange(len(p))):
            out.append("non-identical candidate positions")
            break

    ids = np.flatnonzero(kind == IDENTIFIER)
    if len(ids) != M or not np.array_equal(np.sort(layout.idx_id), ids):
        out.append("identifier positions do not match idx_id")
    else:
        cand_mask = kind == CANDIDATE
        if block_len and not np.all(pos[ids] == P + max(block_len)):
            out.append("identifier positions are not P + L_max")
        for a in range(M):
            row = permit[layout.idx_id[a]]
            for b in range(M):
                if a != b and row[layout.idx_id[b]]:
                    out.append("identifier cross-attention")
                    break
            if not row[:P].all() or not row[cand_mask].all():
                out.append(f"identifier {a} does not see the prefix and every candidate block")
    return out

