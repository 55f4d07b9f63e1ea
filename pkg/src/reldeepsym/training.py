"""Seeded training loop: Adam, global-norm clipping, best-validation checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import datasets, gradcore, models
from .models import GumbelConfig, ModelCheckpoint, ModelConfig

log = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NumericError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    architecture: str = "relational"
    epochs: int = 300
    batch_size: int = 128
    learning_rate: float = 1e-4
    clip_norm: float = 10.0
    seeds: tuple[int, ...] = (0, 1, 2)
    tau: float = 1.0
    straight_through: bool = False
    eval_every: int = 10
    hidden: int = 128
    dtype: str = "float32"

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"seeds must be distinct: {self.seeds}")
        for name in ("epochs", "batch_size", "learning_rate", "clip_norm", "tau", "eval_every", "hidden"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def model_config(self, n_max: int) -> ModelConfig:
        return ModelConfig(self.architecture, hidden=self.hidden, n_max=n_max,
                           gumbel=GumbelConfig(self.tau, self.straight_through))


@dataclass
class AdamState:
    m: list[torch.Tensor]
    v: list[torch.Tensor]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[torch.Tensor]) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params])


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor], state: AdamState,
              lr: float) -> None:
    """In-place Adam update with bias correction."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    state.t += 1
    c1 = 1 - state.beta1 ** state.t
    c2 = 1 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise gradcore.DimensionError(f"grad shape {tuple(g.shape)} != param {tuple(p.shape)}")
        m.mul_(state.beta1).add_(g, alpha=1 - state.beta1)
        v.mul_(state.beta2).addcmul_(g, g, value=1 - state.beta2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + state.eps))


def global_norm(grads: Sequence[torch.Tensor]) -> float:
    return math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))


def clip_by_global_norm(grads: Sequence[torch.Tensor], max_norm: float = 10.0
                        ) -> tuple[list[torch.Tensor], float]:
    """Return rescaled grads (if the global norm exceeds ``max_norm``) and the pre-clip norm."""
    norm = global_norm(grads)
    if norm > max_norm:
        return [g * (max_norm / norm) for g in grads], norm
    return list(grads), norm


def batch_loss(ckpt: ModelCheckpoint, batch: datasets.Batch, mode: str, rng=None) -> torch.Tensor:
    out = models.forward(ckpt, batch.features, batch.action, batch.mask, mode, rng)
    return models.loss(out.effects, batch.effects, batch.mask)


def evaluate_loss(ckpt: ModelCheckpoint, records, batch_size: int = 512) -> float:
    """Hard-mode loss averaged over all records."""
    total, count = 0.0, 0
    for batch in datasets.load_batches(records, batch_size):
        total += batch_loss(ckpt, batch, "hard").item() * len(batch)
        count += len(batch)
    return total / count


@dataclass
class TrainResult:
    checkpoint: ModelCheckpoint
    best_val: float
    best_epoch: int
    final: ModelCheckpoint
    log: list[dict] = field(default_factory=list)


def train_seed(config: TrainConfig, train_records, val_records, seed: int,
               n_max: int | None = None, log_path=None) -> TrainResult:
    torch.set_num_threads(1)
    if n_max is None:
        n_max = max(r.n for r in list(train_records) + list(val_records))
    dtype = DTYPES[config.dtype]
    ckpt = ModelCheckpoint.init(config.model_config(n_max), seed, dtype)
    params = ckpt.params.tensors()
    adam = AdamState.zeros_like(params)
    noise = np.random.default_rng([seed, 1])

    best, best_val, best_epoch = None, math.inf, -1
    rows = []
    fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, config.epochs + 1):
            losses, norms = [], []
            for b_idx, batch in enumerate(datasets.load_batches(train_records, config.batch_size, [seed, 2, epoch])):
                loss = batch_loss(ckpt, batch, "soft", noise)
                grads = torch.autograd.grad(loss, params)
                grads, norm = clip_by_global_norm(grads, config.clip_norm)
                lval = loss.item()
                if not (math.isfinite(lval) and math.isfinite(norm)):
                    raise NumericError(
                        f"non-finite loss at seed {seed}, epoch {epoch}, batch {b_idx}: "
                        f"loss={lval}, grad norm={norm}")
                adam_step(params, grads, adam, config.learning_rate)
                losses.append(lval * len(batch))
                norms.append(norm)
            row = {
                "epoch": epoch,
                "train_loss": sum(losses) / len(train_records),
                "val_loss": None,
                "grad_norm_mean": float(np.mean(norms)),
                "grad_norm_max": float(np.max(norms)),
            }
            if epoch % config.eval_every == 0 or epoch == config.epochs:
                val = evaluate_loss(ckpt, val_records)
                row["val_loss"] = val
                if val < best_val:
                    best_val, best_epoch = val, epoch
                    best = ckpt.to(dtype)
            rows.append(row)
            if fh:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            if epoch % max(1, config.epochs // 10) == 0:
                log.info("seed %d epoch %d train %.4f val %s", seed, epoch, row["train_loss"], row["val_loss"])
    finally:
        if fh:
            fh.close()
    return TrainResult(best, best_val, best_epoch, ckpt, rows)


def checkpoint_name(arch: str, dataset: str, seed: int) -> str:
    return f"{arch}_{dataset}_{seed}"


def train(config: TrainConfig, data_dir, out_dir) -> dict[int, TrainResult]:
    """Train every seed on the dataset at ``data_dir``; write checkpoints and logs to ``out_dir``."""
    splits = datasets.load_splits(data_dir)
    name = datasets.dataset_name(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_max = max(r.n for part in splits.values() for r in part)
    results = {}
    for seed in config.seeds:
        stem = checkpoint_name(config.architecture, name, seed)
        res = train_seed(config, splits["train"], splits["val"], seed, n_max, out / f"{stem}.log")
        res.checkpoint.save(out / f"{stem}.ckpt")
        results[seed] = res
    with open(out / f"{config.architecture}_{name}.train.json", "w", encoding="utf-8") as fh:
        json.dump({"config": asdict(config), "dataset": str(data_dir),
                   "best": {str(s): {"val_loss": r.best_val, "epoch": r.best_epoch}
                            for s, r in results.items()}}, fh, indent=2, sort_keys=True)
    return results
