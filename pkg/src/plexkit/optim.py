"""AdamW with a warmup-cosine schedule, and the bag-level training loop."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .embeddings import ConceptSet, EmbeddingBag
from .errors import EmptyDataset, NonFiniteLoss, ShapeMismatch
from .head import (
    PARAM_FIELDS,
    HeadConfig,
    HeadGrads,
    HeadParams,
    forward,
    init_params,
    loss_and_grad,
    orth_loss,
    zero_grads,
)


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    warmup_epochs: int = 5
    total_epochs: int = 20
    batch_size: int = 64
    seed: int = 0
    instance_dropout: float = 0.0

    def __post_init__(self):
        if not 0 < self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 < warmup_epochs < total_epochs")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 <= self.instance_dropout < 1.0:
            raise ValueError("instance_dropout must be in [0, 1)")


@dataclass
class AdamWState:
    step: int
    m: HeadGrads
    v: HeadGrads


def init_adamw_state(params: HeadParams) -> AdamWState:
    return AdamWState(step=0, m=zero_grads(params), v=zero_grads(params))


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup to base_lr, then cosine decay to 0; clamped past the end."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = cfg.warmup_epochs * steps_per_epoch
    total = cfg.total_epochs * steps_per_epoch
    if step < warm:
        return cfg.base_lr * (step + 1) / warm
    if step >= total:
        return 0.0
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * (step - warm) / (total - warm)))


def adamw_step(
    params: HeadParams,
    grads: HeadGrads,
    state: AdamWState,
    lr: float,
    cfg: TrainConfig,
) -> tuple[HeadParams, AdamWState]:
    """One decoupled-weight-decay update; returns fresh params and state."""
    if lr < 0:
        raise ValueError("lr must be >= 0")
    beta1, beta2 = cfg.betas
    t = state.step + 1
    new_params = {}
    new_m = {}
    new_v = {}
    for name in PARAM_FIELDS:
        theta = getattr(params, name)
        g = getattr(grads, name)
        if g.shape != theta.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {theta.shape}")
        m = beta1 * getattr(state.m, name) + (1.0 - beta1) * g
        v = beta2 * getattr(state.v, name) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_params[name] = theta - lr * (
            m_hat / (np.sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta
        )
        new_m[name] = m
        new_v[name] = v
    return (
        HeadParams(config=params.config, **new_params),
        AdamWState(step=t, m=HeadGrads(**new_m), v=HeadGrads(**new_v)),
    )


@dataclass
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float


def write_history(history: list[EpochStats], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "lr", "train_loss", "val_loss", "val_acc"])
        for row in history:
            writer.writerow(
                [row.epoch, f"{row.lr:.12g}", f"{row.train_loss:.12g}",
                 f"{row.val_loss:.12g}", f"{row.val_acc:.12g}"]
            )


def read_history(path: str | Path) -> list[EpochStats]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                EpochStats(
                    epoch=int(row["epoch"]),
                    lr=float(row["lr"]),
                    train_loss=float(row["train_loss"]),
                    val_loss=float(row["val_loss"]),
                    val_acc=float(row["val_acc"]),
                )
            )
    return out


def score_bags(
    bags: list[EmbeddingBag], concepts: ConceptSet, params: HeadParams
) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """(plexus probabilities, argmax predictions, labels, mean full loss)."""
    if not bags:
        raise EmptyDataset("no bags to score")
    scores = np.empty(len(bags))
    preds = np.empty(len(bags), dtype=np.int64)
    labels = np.empty(len(bags), dtype=np.int64)
    orth = params.config.orth_weight * orth_loss(params.data_concepts)
    total = 0.0
    for i, bag in enumerate(bags):
        trace = forward(bag, concepts, params)
        scores[i] = trace.probs[1]
        preds[i] = int(np.argmax(trace.logits))
        labels[i] = bag.label
        total += -float(np.log(trace.probs[bag.label])) + orth
    return scores, preds, labels, total / len(bags)


def _dropout_instances(
    bag: EmbeddingBag, p: float, rng: np.random.Generator
) -> np.ndarray:
    x = bag.normalized()
    keep = rng.random(x.shape[0]) >= p
    if not keep.any():
        keep[int(rng.integers(x.shape[0]))] = True
    return x[keep]


def train(
    bags_train: list[EmbeddingBag],
    bags_val: list[EmbeddingBag],
    concepts: ConceptSet,
    cfg: TrainConfig,
    head_config: HeadConfig | None = None,
) -> tuple[HeadParams, list[EpochStats]]:
    """Train the head; returns the best-validation-accuracy checkpoint.

    Minibatch order is a seeded shuffle per epoch; gradients are averaged
    over the batch in fixed bag order, so a rerun with the same seed, data,
    and config is bitwise identical. The recorded lr is the one used by the
    epoch's first step. Ties in validation accuracy keep the earlier epoch.
    """
    if not bags_train or not bags_val:
        raise EmptyDataset("training and validation sets must both be non-empty")
    if head_config is None:
        head_config = HeadConfig(dim=concepts.dim)
    rng = np.random.default_rng(cfg.seed)
    params = init_params(concepts, head_config, seed=cfg.seed)
    state = init_adamw_state(params)
    n = len(bags_train)
    steps_per_epoch = math.ceil(n / cfg.batch_size)

    history: list[EpochStats] = []
    best_params = params.copy()
    best_acc = -1.0
    step = 0
    for epoch in range(cfg.total_epochs):
        order = rng.permutation(n)
        epoch_lr = lr_at(step, steps_per_epoch, cfg)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            lr = lr_at(step, steps_per_epoch, cfg)
            grads = zero_grads(params)
            batch_loss = 0.0
            for idx in batch:
                bag = bags_train[idx]
                if cfg.instance_dropout > 0.0:
                    inputs = _dropout_instances(bag, cfg.instance_dropout, rng)
                else:
                    inputs = bag
                value, g = loss_and_grad(inputs, concepts, params, bag.label)
                if not math.isfinite(value):
                    raise NonFiniteLoss(
                        f"loss {value} at epoch {epoch}, step {step}, "
                        f"bag {bag.tile_ref}"
                    )
                batch_loss += value
                grads.add_(g)
            params, state = adamw_step(
                params, grads.scaled(1.0 / len(batch)), state, lr, cfg
            )
            step += 1
            epoch_loss += batch_loss / len(batch)
        _, val_preds, val_labels, val_loss = score_bags(bags_val, concepts, params)
        val_acc = float(np.mean(val_preds == val_labels))
        history.append(
            EpochStats(
                epoch=epoch,
                lr=epoch_lr,
                train_loss=epoch_loss / steps_per_epoch,
                val_loss=val_loss,
                val_acc=val_acc,
            )
        )
        if val_acc > best_acc:
            best_acc = val_acc
            best_params = params.copy()
    return best_params, history
