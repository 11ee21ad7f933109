"""Training objective: pairwise list/point losses plus gated self-calibration.

Every pair term uses the standard RankNet orientation: when candidate i should
rank above j the term is ``log(1 + exp(s_j - s_i))``, which shrinks as the
preferred score grows. (Printed with ``s_i - s_j`` the term would reward the
wrong order.)
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .diffengine import softplus
from .model import ScoreBundle


@dataclass
class LossConfig:
    tau: float = 10.0
    enable_point_loss: bool = True
    enable_calibration: bool = True
    enable_in_batch: bool = True
    enable_adaptive: bool = True

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be >= 0")


@dataclass
class BatchScores:
    scores: list[ScoreBundle]
    labels: list[Sequence[int]]

    def __post_init__(self):
        if not self.scores:
            raise ValueError("empty batch")
        if len(self.scores) != len(self.labels):
            raise ValueError("one label per query is required")
        m = {len(s.ls) for s in self.scores} | {len(s.ps) for s in self.scores}
        if len(m) != 1:
            raise ValueError(f"inconsistent candidate counts across queries: {sorted(m)}")


def _ranks(label, m: int, like: torch.Tensor) -> torch.Tensor:
    r = torch.as_tensor(label, dtype=torch.long, device=like.device)
    if r.numel() != m:
        raise ValueError(f"label has {r.numel()} ranks for {m} scores")
    return r


def pairwise_loss(scores: torch.Tensor, prefer: torch.Tensor) -> torch.Tensor:
    """Sum of ``softplus(s_j - s_i)`` over all (i, j) with ``prefer[i, j]`` true."""
    diff = scores[None, :] - scores[:, None]  # diff[i, j] = s_j - s_i
    return torch.where(prefer, softplus(diff), torch.zeros((), dtype=scores.dtype)).sum()


def list_loss(ls: torch.Tensor, label) -> torch.Tensor:
    r = _ranks(label, len(ls), ls)
    return pairwise_loss(ls, r[:, None] < r[None, :])


def point_loss(ps: torch.Tensor, label) -> torch.Tensor:
    return list_loss(ps, label)


def cal_loss(ls: torch.Tensor, ps: torch.Tensor) -> torch.Tensor:
    """ls pushed to follow the strict order of ps; ps is a label here and gets no gradient."""
    if len(ls) != len(ps):
        raise ValueError(f"length mismatch: {len(ls)} list scores vs {len(ps)} point scores")
    target = ps.detach()
    return pairwise_loss(ls, target[:, None] > target[None, :])


def cal_ib_loss(batch: BatchScores) -> torch.Tensor:
    ls = torch.cat([s.ls for s in batch.scores])
    ps = torch.cat([s.ps for s in batch.scores])
    return cal_loss(ls, ps)


def batch_variance(batch: BatchScores) -> float:
    """Mean over queries of the population variance of each query's point scores."""
    ps = torch.stack([s.ps.detach() for s in batch.scores])
    return float(ps.var(dim=1, unbiased=False).mean())


def cal_adaib_loss(batch: BatchScores, tau: float) -> torch.Tensor:
    if batch_variance(batch) > tau:
        return cal_ib_loss(batch)
    return _zero(batch)


def _zero(batch: BatchScores) -> torch.Tensor:
    # keeps the graph connected so backprop on an all-gated objective still runs
    return 0.0 * batch.scores[0].ls.sum()


def final_loss(batch: BatchScores, config: LossConfig) -> tuple[torch.Tensor, dict]:
    """Total loss and its components (sums over queries, no normalisation).

    ``parts`` holds floats for logging: list, point, cal, variance, gate.
    """
    lst = sum(list_loss(s.ls, r) for s, r in zip(batch.scores, batch.labels))
    total = lst
    parts = {"list": float(lst.detach()), "point": 0.0, "cal": 0.0}
    if config.enable_point_loss:
        pnt = sum(point_loss(s.ps, r) for s, r in zip(batch.scores, batch.labels))
        total = total + pnt
        parts["point"] = float(pnt.detach())
    var = batch_variance(batch)
    gate = var > config.tau if config.enable_adaptive else True
    parts["variance"] = var
    parts["gate"] = bool(config.enable_calibration and gate)
    if config.enable_calibration:
        if not gate:
            cal = _zero(batch)
        elif config.enable_in_batch:
            cal = cal_ib_loss(batch)
        else:
            cal = sum(cal_loss(s.ls, s.ps) for s in batch.scores)
        total = total + cal
        parts["cal"] = float(cal.detach())
    parts["total"] = float(total.detach())
    return total, parts
