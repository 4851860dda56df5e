"""Penalized training: normal loss plus an L1 penalty on every BN scale.

Sparsification and finetuning are one phase: the penalty stays on during
every training pass, including post-surgery finetunes, so the next round of
pruning is always being prepared.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import graph as G
from .data import Dataset, augment, normalize
from .engine import sgd_step, softmax_cross_entropy
from .errors import DivergenceError, LayerPruneError

GAMMA_LADDER = (1e-1, 1e-2, 1e-3, 1e-4)


@dataclass
class TrainConfig:
    lam: float = 1e-4  # L1 penalty weight on BN scales
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    lambda_schedule: str = "constant"  # constant | linear-warmup
    warmup_epochs: int = 5
    lr_decay_epochs: tuple = ()
    lr_decay_factor: float = 0.1
    holdout_fraction: float = 0.1
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.lam < 0:
            raise LayerPruneError(f"lambda must be non-negative, got {self.lam}")
        if self.batch_size < 1:
            raise LayerPruneError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lambda_schedule not in ("constant", "linear-warmup"):
            raise LayerPruneError(f"unknown lambda schedule {self.lambda_schedule!r}")


@dataclass
class GammaStats:
    """Distribution snapshot of |alpha| across all BN layers."""

    per_layer: dict[int, tuple[np.ndarray, np.ndarray]]  # node id -> (counts, bin edges)
    sorted_alpha: np.ndarray
    below: dict[float, int]  # ladder threshold -> count of |alpha| under it

    @classmethod
    def collect(cls, g: G.ModelGraph) -> "GammaStats":
        per_layer = {}
        chunks = []
        for n in g.bn_nodes():
            a = np.abs(n.params.alpha.astype(np.float64))
            hi = max(float(a.max()), 1e-12) if a.size else 1.0
            per_layer[n.id] = np.histogram(a, bins=16, range=(0.0, hi))
            chunks.append(a)
        pooled = np.sort(np.concatenate(chunks)) if chunks else np.empty(0)
        below = {t: int(np.searchsorted(pooled, t)) for t in GAMMA_LADDER}
        return cls(per_layer, pooled, below)


def l1_penalty(g: G.ModelGraph) -> float:
    """Sum of |alpha| over every BN channel in the graph."""
    return float(sum(np.abs(n.params.alpha.astype(np.float64)).sum() for n in g.bn_nodes()))


def apply_l1_subgradient(g: G.ModelGraph, lam: float) -> None:
    """grad(alpha) += lam * sign(alpha), with sign(0) = 0."""
    if lam == 0:
        return
    for n in g.bn_nodes():
        p = n.params
        p.alpha_grad += np.asarray(lam * np.sign(p.alpha), dtype=p.alpha_grad.dtype)


class Trainer:
    """Owns one graph and its optimizer state across epochs and surgeries."""

    def __init__(self, g: G.ModelGraph, cfg: TrainConfig, log_stream=None):
        self.graph = g
        self.cfg = cfg
        self.log_stream = log_stream
        self.rng = np.random.default_rng(cfg.seed)
        self.velocities: dict[tuple[int, str], np.ndarray] = {}
        self.epoch = 0
        self.global_step = 0

    # -- schedules ---------------------------------------------------------
    def current_lr(self) -> float:
        lr = self.cfg.lr
        for boundary in self.cfg.lr_decay_epochs:
            if self.epoch >= boundary:
                lr *= self.cfg.lr_decay_factor
        return lr

    def current_lambda(self) -> float:
        if self.cfg.lambda_schedule == "linear-warmup":
            ramp = min(1.0, (self.epoch + 1) / max(1, self.cfg.warmup_epochs))
            return self.cfg.lam * ramp
        return self.cfg.lam

    # -- internals ----------------------------------------------------------
    def _velocity(self, slot: G.ParamSlot) -> np.ndarray:
        key = (slot.node_id, slot.name)
        v = self.velocities.get(key)
        if v is None or v.shape != slot.data.shape:
            v = np.zeros_like(slot.data)
            self.velocities[key] = v
        return v

    def _split(self, ds: Dataset):
        k = max(1, int(round(self.cfg.holdout_fraction * len(ds))))
        return np.arange(0, len(ds) - k), np.arange(len(ds) - k, len(ds))

    def _eval(self, ds: Dataset, indices) -> tuple[float, float]:
        losses, hits, total = 0.0, 0.0, 0
        for lo in range(0, len(indices), 256):
            idx = indices[lo : lo + 256]
            x = normalize(ds.images[idx])
            acts = G.graph_forward(self.graph, x, mode="infer")
            loss, top1, _ = softmax_cross_entropy(acts.output, ds.labels[idx])
            losses += loss * len(idx)
            hits += top1 * len(idx)
            total += len(idx)
        return losses / total, hits / total

    def train_epoch(self, ds: Dataset):
        """One pass over the training part of `ds`; evaluates the held-out tail.

        Returns (held-out total loss, held-out top1, GammaStats).
        """
        if len(ds) == 0:
            raise LayerPruneError("empty dataset")
        cfg = self.cfg
        train_idx, hold_idx = self._split(ds)
        order = train_idx[self.rng.permutation(len(train_idx))]
        lam = self.current_lambda()
        lr = self.current_lr()
        slots = G.param_slots(self.graph)

        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            imgs = np.stack([augment(ds.images[i], self.rng) for i in idx])
            x = normalize(imgs)
            acts = G.graph_forward(self.graph, x, mode="train", momentum=cfg.bn_momentum)
            loss_normal, _, dlogits = softmax_cross_entropy(acts.output, ds.labels[idx])
            loss_total = loss_normal + lam * l1_penalty(self.graph)
            if not np.isfinite(loss_total):
                raise DivergenceError(self.global_step)
            for slot in slots:
                slot.grad[...] = 0
            G.graph_backward(self.graph, acts, dlogits)
            apply_l1_subgradient(self.graph, lam)
            for slot in slots:
                sgd_step(
                    slot.data, slot.grad, self._velocity(slot), lr,
                    momentum=cfg.momentum,
                    weight_decay=cfg.weight_decay if slot.decay else 0.0,
                    name=f"node{slot.node_id}.{slot.name}",
                )
            self.global_step += 1

        hold_normal, hold_top1 = self._eval(ds, hold_idx)
        hold_total = hold_normal + lam * l1_penalty(self.graph)
        stats = GammaStats.collect(self.graph)
        self.epoch += 1
        if self.log_stream is not None:
            record = {
                "epoch": self.epoch,
                "loss_normal": hold_normal,
                "loss_total": hold_total,
                "top1": hold_top1,
                "gamma_below_1e-2": stats.below[1e-2],
                "gamma_below_1e-3": stats.below[1e-3],
            }
            self.log_stream.write(json.dumps(record) + "\n")
            self.log_stream.flush()
        return hold_total, hold_top1, stats


def train(g: G.ModelGraph, ds: Dataset, cfg: TrainConfig, log_stream=None) -> Trainer:
    """Run cfg.epochs epochs of penalized training; returns the trainer."""
    trainer = Trainer(g, cfg, log_stream=log_stream)
    for _ in range(cfg.epochs):
        trainer.train_epoch(ds)
    return trainer


def train_epoch(g: G.ModelGraph, ds: Dataset, cfg: TrainConfig, trainer: Trainer | None = None):
    """Single-epoch convenience wrapper around Trainer."""
    trainer = trainer or Trainer(g, cfg)
    return trainer.train_epoch(ds)
