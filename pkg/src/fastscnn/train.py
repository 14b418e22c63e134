"""Losses, SGD with momentum and selective l2, poly schedule, training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import functional as F
from .augment import AugmentConfig, Sample, augment, sample_rng
from .functional import IGNORE_ID, cross_entropy
from .metrics import evaluate, miou
from .tensor import Tape, Tensor

__all__ = [
    "TrainConfig", "TrainingDiverged", "SGD", "cross_entropy", "total_loss", "poly_lr",
    "train_loop", "format_record",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, lr: float, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration} (lr={lr:.6g})")
        self.iteration = iteration
        self.lr = lr


@dataclass
class TrainConfig:
    base_lr: float = 0.045
    power: float = 0.9
    momentum: float = 0.9
    batch_size: int = 2
    l2: float = 4e-5
    aux_weight: float = 0.4
    epochs: int = 1000
    seed: int = 0
    augment: Optional[AugmentConfig] = None
    ignore_id: int = IGNORE_ID

    def validate(self) -> None:
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be > 0, got {self.base_lr}")
        if self.aux_weight < 0:
            raise ValueError(f"aux_weight must be >= 0, got {self.aux_weight}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")

    def max_iters(self, dataset_size: int) -> int:
        return self.epochs * math.ceil(dataset_size / self.batch_size)


def total_loss(main: Tensor, aux_lds: Tensor, aux_gfe: Tensor, weight: float) -> Tensor:
    """``main + weight * (aux_lds + aux_gfe)``."""
    return F.add(main, F.scale(F.add(aux_lds, aux_gfe), weight))


def poly_lr(iteration: int, max_iters: int, cfg: TrainConfig) -> float:
    if not 0 <= iteration <= max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {max_iters}]")
    return cfg.base_lr * (1.0 - iteration / max_iters) ** cfg.power


class SGD:
    """Momentum SGD.  l2 is added to the gradient of parameters flagged
    ``decay`` (standard and pointwise conv weights) and nothing else."""

    def __init__(self, named_params, momentum: float = 0.9, l2: float = 0.0):
        self.params = list(named_params)
        self.momentum = momentum
        self.l2 = l2
        self.velocity = {name: np.zeros_like(p.data) for name, p in self.params}
        self.iteration = 0

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient for this step")
        for name, p in self.params:
            g = p.grad
            if self.l2 and p.decay:
                g = g + p.data.dtype.type(self.l2) * p.data
            v = self.velocity[name]
            v *= v.dtype.type(self.momentum)
            v += g
            p.data -= v.dtype.type(lr) * v
        self.iteration += 1


def sgd_step(opt: SGD, lr: float) -> None:
    opt.step(lr)


def format_record(rec: dict) -> str:
    return f"iter={rec['iter']} epoch={rec['epoch']} loss={rec['loss']:.6f} lr={rec['lr']:.8f}"


def _batch(samples: Sequence[Sample]):
    return np.concatenate([s.image for s in samples]), np.concatenate([s.label for s in samples])


def train_loop(
    model,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    checkpoint: Optional[Callable[[str, object], None]] = None,
    val_data: Optional[Sequence[Sample]] = None,
    log: Optional[Callable[[str], None]] = None,
    max_iters: Optional[int] = None,
) -> list[dict]:
    """Train ``model`` in place and return one record per iteration.

    ``checkpoint(tag, model)`` is called after every epoch with ``tag="epoch<k>"``
    and, when ``val_data`` is given, with ``tag="best"`` whenever validation
    mIoU improves.  ``max_iters`` truncates the run; the poly schedule always
    spans the epoch-derived length.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    schedule_len = cfg.max_iters(len(dataset))
    stop = min(schedule_len, max_iters) if max_iters else schedule_len
    opt = SGD(model.named_parameters(), cfg.momentum, cfg.l2)
    model.train()
    records: list[dict] = []
    best = -1.0
    it = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(dataset))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            samples = [dataset[i] if cfg.augment is None else augment(dataset[i], cfg.augment,
                                                                      sample_rng(cfg.seed, epoch, int(i)))
                       for i in idx]
            images, labels = _batch(samples)
            lr = poly_lr(it, schedule_len, cfg)
            model.zero_grad()
            with Tape() as tape:
                out = model(Tensor(images))
                if isinstance(out, tuple):
                    main, aux_lds, aux_gfe = (cross_entropy(o, labels, cfg.ignore_id) for o in out)
                    loss = total_loss(main, aux_lds, aux_gfe, cfg.aux_weight)
                else:
                    loss = cross_entropy(out, labels, cfg.ignore_id)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDiverged(it, lr, value)
                tape.backward(loss)
            opt.step(lr)
            rec = {"iter": it, "epoch": epoch, "loss": value, "lr": lr}
            records.append(rec)
            if log:
                log(format_record(rec))
            it += 1
            if it >= stop:
                break
        if checkpoint:
            checkpoint(f"epoch{epoch}", model)
        if val_data is not None:
            score = miou(evaluate(model, val_data, model.config.num_classes, cfg.ignore_id))[1]
            model.train()
            if score > best:
                best = score
                if checkpoint:
                    checkpoint("best", model)
        if it >= stop:
            break
    return records
