"""Small decoder-only transformer that reads list-view and point-view scores off a layout.

The network never looks at storage order: every attention step uses the
layout's explicit ``positions`` (rotary angles or a learned table) and its
``permit`` matrix. Two affine heads read the final hidden state:

* list head at each identifier token  -> ``ls`` (sees every candidate)
* point head at each ``<DOC_END>``     -> ``ps`` (sees only its own candidate)

Identifier tokens share one learned embedding and one position. What ties
identifier k to candidate k is a learned per-head logit bias on the
identifier-k -> candidate-k attention entries, which treats all slots alike,
so moving a candidate to another slot moves its scores with it exactly.

Parameter count for width d, L layers, H heads, feed-forward width f,
vocabulary V (plus ``max_position * d`` with learned-absolute positions)::

    V*d + d + L*(4*d*d + 2*d*f + 9*d + f + H) + 4*d + 2
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import diffengine as de
from .layout import CANDIDATE, IDENTIFIER, SequenceLayout

CHECKPOINT_FORMAT = "calrank-checkpoint/1"


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    vocab_size: int = 2048
    position: str = "rotary"
    max_position: int = 1024
    dropout: float = 0.0
    rope_theta: float = 10000.0
    own_bias_init: float = 4.0
    seed: int = 0

    def validate(self) -> None:
        for name in ("d_model", "n_layers", "n_heads", "d_ff", "vocab_size", "max_position"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.position not in ("rotary", "learned-absolute"):
            raise ValueError(f"unknown position scheme {self.position!r}")
        if self.position == "rotary" and (self.d_model // self.n_heads) % 2:
            raise ValueError("rotary positions need an even head width")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def param_count(config: ModelConfig) -> int:
    d, L, H, f, V = config.d_model, config.n_layers, config.n_heads, config.d_ff, config.vocab_size
    n = V * d + d + L * (4 * d * d + 2 * d * f + 9 * d + f + H) + 4 * d + 2
    if config.position == "learned-absolute":
        n += config.max_position * d
    return n


@dataclass
class Parameters:
    config: ModelConfig
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, key: str) -> torch.Tensor:
        return self.tensors[key]

    def leaves(self) -> list[torch.Tensor]:
        return list(self.tensors.values())

    def numel(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def requires_grad_(self, flag: bool = True) -> "Parameters":
        for t in self.tensors.values():
            t.requires_grad_(flag)
        return self

    def clone(self) -> "Parameters":
        return Parameters(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})


@dataclass
class ScoreBundle:
    ls: torch.Tensor
    ps: torch.Tensor

    def detach(self) -> "ScoreBundle":
        return ScoreBundle(self.ls.detach(), self.ps.detach())


def init_params(config: ModelConfig) -> Parameters:
    config.validate()
    gen = torch.Generator().manual_seed(config.seed)
    dt = de.get_dtype()
    d, f = config.d_model, config.d_ff
    resid_std = 0.02 / math.sqrt(2 * config.n_layers)

    def normal(*shape, std=0.02):
        return torch.randn(*shape, generator=gen, dtype=torch.float64).mul_(std).to(dt)

    def const(value, *shape):
        return torch.full(shape, float(value), dtype=dt)

    p = {"tok_emb": normal(config.vocab_size, d), "id_emb": normal(d)}
    if config.position == "learned-absolute":
        p["pos_emb"] = normal(config.max_position, d)
    for i in range(config.n_layers):
        pre = f"layer{i}."
        p[pre + "ln1.g"] = const(1, d)
        p[pre + "ln1.b"] = const(0, d)
        p[pre + "attn.wqkv"] = normal(d, 3 * d)
        p[pre + "attn.bqkv"] = const(0, 3 * d)
        p[pre + "attn.wo"] = normal(d, d, std=resid_std)
        p[pre + "attn.bo"] = const(0, d)
        p[pre + "attn.own"] = const(config.own_bias_init, config.n_heads)
        p[pre + "ln2.g"] = const(1, d)
        p[pre + "ln2.b"] = const(0, d)
        p[pre + "ff.w1"] = normal(d, f)
        p[pre + "ff.b1"] = const(0, f)
        p[pre + "ff.w2"] = normal(f, d, std=resid_std)
        p[pre + "ff.b2"] = const(0, d)
    p["lnf.g"] = const(1, d)
    p["lnf.b"] = const(0, d)
    p["list_head.w"] = normal(d)
    p["list_head.b"] = const(0)
    p["point_head.w"] = normal(d)
    p["point_head.b"] = const(0)
    return Parameters(config, p)


@dataclass
class _Batch:
    tokens: torch.Tensor  # (B, T)
    positions: torch.Tensor  # (B, T)
    permit: torch.Tensor  # (B, T, T)
    own: torch.Tensor  # (B, T, T) identifier k -> candidate k entries
    is_identifier: torch.Tensor  # (B, T)
    idx_st: list[np.ndarray]
    idx_id: list[np.ndarray]


def _collate(layouts: Sequence[SequenceLayout], config: ModelConfig) -> _Batch:
    T = max(len(l) for l in layouts)
    B = len(layouts)
    tokens = np.zeros((B, T), dtype=np.int64)
    positions = np.zeros((B, T), dtype=np.int64)
    permit = np.zeros((B, T, T), dtype=bool)
    own = np.zeros((B, T, T), dtype=bool)
    is_id = np.zeros((B, T), dtype=bool)
    for b, lay in enumerate(layouts):
        n = len(lay)
        if n > config.max_position or (n and int(lay.positions.max()) >= config.max_position):
            raise ValueError(f"layout {b}: length {n} exceeds max_position={config.max_position}")
        if n and (lay.tokens.min() < 0 or lay.tokens.max() >= config.vocab_size):
            raise ValueError(f"layout {b}: token id outside vocabulary of {config.vocab_size}")
        tokens[b, :n] = lay.tokens
        positions[b, :n] = lay.positions
        permit[b, :n, :n] = lay.permit
        # padding rows attend to themselves only; real rows never see padding
        pad = np.arange(n, T)
        permit[b, pad, pad] = True
        ident = lay.kind == IDENTIFIER
        cand = lay.kind == CANDIDATE
        own[b, :n, :n] = ident[:, None] & cand[None, :] & (lay.slot[:, None] == lay.slot[None, :])
        is_id[b, :n] = ident
    return _Batch(
        torch.from_numpy(tokens),
        torch.from_numpy(positions),
        torch.from_numpy(permit),
        torch.from_numpy(own),
        torch.from_numpy(is_id),
        [np.asarray(l.idx_st) for l in layouts],
        [np.asarray(l.idx_id) for l in layouts],
    )


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, H, T, dh); rotate interleaved (even, odd) coordinate pairs
    even, odd = x[..., 0::2], x[..., 1::2]
    out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return out.flatten(-2)


def _dropout(x: torch.Tensor, rate: float, gen: torch.Generator | None) -> torch.Tensor:
    if rate <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=gen, dtype=x.dtype) >= rate
    return x * keep / (1.0 - rate)


def hidden_states(params: Parameters, layouts: Sequence[SequenceLayout], training: bool = False,
                  generator: torch.Generator | None = None) -> tuple[torch.Tensor, _Batch]:
    """Final-layer hidden states, shape (B, T_max, d), with padding rows at the end."""
    cfg = params.config
    batch = _collate(layouts, cfg)
    p = params.tensors
    B, T = batch.tokens.shape
    H, dh = cfg.n_heads, cfg.head_dim
    rate = cfg.dropout if training else 0.0

    x = p["tok_emb"][batch.tokens]
    x = torch.where(batch.is_identifier[..., None], p["id_emb"], x)
    if cfg.position == "learned-absolute":
        x = x + p["pos_emb"][batch.positions]
        cos = sin = None
    else:
        dt = x.dtype
        freqs = cfg.rope_theta ** (-torch.arange(0, dh, 2, dtype=torch.float64) / dh)
        angles = batch.positions.to(torch.float64)[:, None, :, None] * freqs
        cos, sin = torch.cos(angles).to(dt), torch.sin(angles).to(dt)

    permit = batch.permit[:, None]
    own = batch.own[:, None].to(x.dtype)
    for i in range(cfg.n_layers):
        pre = f"layer{i}."
        a = de.layer_norm(x, p[pre + "ln1.g"], p[pre + "ln1.b"])
        qkv = a @ p[pre + "attn.wqkv"] + p[pre + "attn.bqkv"]
        q, k, v = qkv.view(B, T, 3, H, dh).permute(2, 0, 3, 1, 4)
        if cos is not None:
            q, k = _rotate(q, cos, sin), _rotate(k, cos, sin)
        scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
        scores = scores + p[pre + "attn.own"][None, :, None, None] * own
        attn = de.masked_softmax(scores, permit)
        ctx = (attn @ v).transpose(1, 2).reshape(B, T, cfg.d_model)
        x = x + _dropout(ctx @ p[pre + "attn.wo"] + p[pre + "attn.bo"], rate, generator)
        m = de.layer_norm(x, p[pre + "ln2.g"], p[pre + "ln2.b"])
        ff = de.gelu(m @ p[pre + "ff.w1"] + p[pre + "ff.b1"]) @ p[pre + "ff.w2"] + p[pre + "ff.b2"]
        x = x + _dropout(ff, rate, generator)
    return de.layer_norm(x, p["lnf.g"], p["lnf.b"]), batch


def _scores(params: Parameters, h: torch.Tensor, batch: _Batch) -> list[ScoreBundle]:
    p = params.tensors
    out = []
    for b in range(h.shape[0]):
        hid = h[b, torch.from_numpy(batch.idx_id[b])]
        hst = h[b, torch.from_numpy(batch.idx_st[b])]
        out.append(ScoreBundle(hid @ p["list_head.w"] + p["list_head.b"], hst @ p["point_head.w"] + p["point_head.b"]))
    return out


def forward_batch(params: Parameters, layouts: Sequence[SequenceLayout], training: bool = False,
                  generator: torch.Generator | None = None, chunk: int | None = None) -> list[ScoreBundle]:
    """Score several layouts in padded batches of at most ``chunk`` layouts."""
    if not layouts:
        return []
    chunk = chunk or len(layouts)
    out: list[ScoreBundle] = []
    for start in range(0, len(layouts), chunk):
        part = layouts[start:start + chunk]
        try:
            h, batch = hidden_states(params, part, training, generator)
        except ValueError as exc:
            raise ValueError(f"batch starting at layout {start}: {exc}") from exc
        out.extend(_scores(params, h, batch))
    return out


def forward(params: Parameters, layout: SequenceLayout, training: bool = False,
            generator: torch.Generator | None = None) -> ScoreBundle:
    return forward_batch(params, [layout], training, generator)[0]


def save_checkpoint(path, params: Parameters, meta: dict | None = None) -> None:
    header = {"format": CHECKPOINT_FORMAT, "config": asdict(params.config), "meta": meta or {},
              "dtype": str(next(iter(params.tensors.values())).dtype).replace("torch.", "")}
    arrays = {k: v.detach().cpu().numpy() for k, v in params.tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_checkpoint(path) -> tuple[Parameters, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["__header__"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        tensors = {k: torch.from_numpy(z[k].copy()) for k in z.files if k != "__header__"}
    config = ModelConfig(**header["config"])
    config.validate()
    return Parameters(config, tensors), header.get("meta", {})
