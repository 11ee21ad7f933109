"""Mini-batch training loop for the combined list/point/calibration objective."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import diffengine as de
from .datagen import RankingExample, Vocab
from .inference import encode_example
from .losses import BatchScores, LossConfig, final_loss
from .model import ModelConfig, Parameters, forward_batch, init_params, save_checkpoint

log = logging.getLogger(__name__)


class TrainingError(FloatingPointError):
    def __init__(self, step: int, parts: dict):
        super().__init__(f"non-finite loss at step {step}: {parts}")
        self.step = step
        self.parts = parts


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 8
    lr: float = 3e-4
    tau: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    max_candidate_tokens: int = 32
    seed: int = 0
    enable_point_loss: bool = True
    enable_calibration: bool = True
    enable_in_batch: bool = True
    enable_adaptive: bool = True

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def loss_config(self) -> LossConfig:
        return LossConfig(self.tau, self.enable_point_loss, self.enable_calibration,
                          self.enable_in_batch, self.enable_adaptive)


@dataclass
class StepRecord:
    step: int
    epoch: int
    list: float
    point: float
    cal: float
    total: float
    variance: float
    gate: bool
    grad_norm: float


class TrainLog(list):
    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self:
                fh.write(json.dumps(asdict(rec)) + "\n")

    @classmethod
    def read(cls, path) -> "TrainLog":
        with open(path, encoding="utf-8") as fh:
            return cls(StepRecord(**json.loads(line)) for line in fh if line.strip())

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self], dtype=float)


def make_batches(dataset: Sequence[RankingExample], batch_size: int, seed: int, epoch: int = 0,
                 num_slots: int | None = None) -> list[list[RankingExample]]:
    """Shuffle deterministically per (seed, epoch) and cut into batches; the last may be short."""
    if not dataset:
        raise ValueError("empty dataset")
    m = num_slots if num_slots is not None else len(dataset[0].candidates)
    for ex in dataset:
        if len(ex.candidates) != m:
            raise ValueError(f"example {ex.qid} has {len(ex.candidates)} candidates, expected {m}")
    order = np.random.default_rng([seed, epoch]).permutation(len(dataset))
    return [[dataset[i] for i in order[s:s + batch_size]] for s in range(0, len(dataset), batch_size)]


def make_optimizer(params: Parameters, config: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params.leaves(), lr=config.lr, betas=(config.beta1, config.beta2),
                             weight_decay=config.weight_decay)


def training_step(params: Parameters, layouts, labels, config: TrainConfig, optimizer,
                  step: int = 0, epoch: int = 0, generator: torch.Generator | None = None) -> StepRecord:
    leaves = params.leaves()
    de.zero_grad(leaves)
    bundles = forward_batch(params, layouts, training=True, generator=generator)
    total, parts = final_loss(BatchScores(bundles, list(labels)), config.loss_config())
    if not all(math.isfinite(parts[k]) for k in ("list", "point", "cal", "total")):
        raise TrainingError(step, parts)
    de.backprop(total)
    grad_norm = float(torch.nn.utils.clip_grad_norm_(leaves, config.clip_norm))
    optimizer.step()
    return StepRecord(step, epoch, parts["list"], parts["point"], parts["cal"], parts["total"],
                      parts["variance"], parts["gate"], grad_norm)


def train(config: TrainConfig, dataset: Sequence[RankingExample], model_config: ModelConfig,
          vocab: Vocab | None = None, checkpoint_dir=None, log_path=None,
          callback: Callable[[StepRecord], None] | None = None) -> tuple[Parameters, TrainLog]:
    if not dataset:
        raise ValueError("empty dataset")
    vocab = vocab or Vocab(model_config.vocab_size)
    m = len(dataset[0].candidates)
    layout_cfg = vocab.layout_config(m, config.max_candidate_tokens)
    layouts = {ex.qid: encode_example(ex, vocab, layout_cfg) for ex in dataset}

    params = init_params(model_config).requires_grad_(True)
    optimizer = make_optimizer(params, config)
    gen = torch.Generator().manual_seed(config.seed)
    trace = TrainLog()
    step = 0
    for epoch in range(config.epochs):
        for batch in make_batches(dataset, config.batch_size, config.seed, epoch, m):
            rec = training_step(params, [layouts[ex.qid] for ex in batch], [ex.permutation for ex in batch],
                                config, optimizer, step, epoch, gen)
            trace.append(rec)
            if callback:
                callback(rec)
            step += 1
        log.info("epoch %d done: step %d, last total %.4f", epoch, step, trace[-1].total)
        if checkpoint_dir is not None:
            Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(Path(checkpoint_dir) / f"epoch{epoch + 1}.npz", params,
                            {"epoch": epoch + 1, "step": step, "train": asdict(config)})
    if log_path is not None:
        trace.write(log_path)
    params.requires_grad_(False)
    return params, trace
