"""SGD with classical momentum, L2 weight decay and a step learning-rate schedule."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .autodiff import Parameter, Tape, mse_loss
from .errors import ShapeError

log = logging.getLogger(__name__)


@dataclass
class SgdConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    max_epochs: int = 150
    lr_drop_factor: float = 0.1
    lr_drop_every: int = 10
    decay_biases: bool = True
    # "zero" keeps the initialised head bias; "mean" starts it at the mean training target
    output_bias: str = "zero"

    def validate(self) -> None:
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0 or self.lr0 < 0:
            raise ValueError("lr0 and weight_decay must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.lr_drop_every < 1:
            raise ValueError("batch_size, max_epochs and lr_drop_every must be >= 1")
        if self.output_bias not in ("zero", "mean"):
            raise ValueError(f"output_bias must be 'zero' or 'mean', got {self.output_bias!r}")


def lr_at(epoch: int, cfg: SgdConfig) -> float:
    """lr0 * drop_factor ** floor(epoch / drop_every)."""
    if not 0 <= epoch < cfg.max_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.max_epochs})")
    return cfg.lr0 * cfg.lr_drop_factor ** (epoch // cfg.lr_drop_every)


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
             velocity: Sequence[np.ndarray], lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0, decay_mask: Sequence[bool] | None = None):
    """In-place update ``v <- mu*v + g + wd*p; p <- p - lr*v``.

    Returns the (mutated) ``params`` and ``velocity`` lists.
    """
    if not len(params) == len(grads) == len(velocity):
        raise ShapeError("params, grads and velocity must have the same length")
    for i, (p, g, v) in enumerate(zip(params, grads, velocity)):
        if not p.shape == g.shape == v.shape:
            raise ShapeError(f"entry {i}: shapes {p.shape}, {g.shape}, {v.shape} differ")
        wd = weight_decay if decay_mask is None or decay_mask[i] else 0.0
        v *= momentum
        v += g
        if wd:
            v += wd * p
        p -= lr * v
    return params, velocity


class Sgd:
    """Holds one momentum buffer per parameter."""

    def __init__(self, params: Sequence[Parameter], cfg: SgdConfig):
        cfg.validate()
        self.params = list(params)
        self.cfg = cfg
        self.velocity = [np.zeros_like(p.value) for p in self.params]
        self.decay_mask = [cfg.decay_biases or p.value.ndim > 1 for p in self.params]

    def step(self, grads: Mapping[str, np.ndarray], lr: float) -> None:
        sgd_step([p.value for p in self.params], [grads[p.name] for p in self.params],
                 self.velocity, lr, self.cfg.momentum, self.cfg.weight_decay, self.decay_mask)


def init_output_bias(net, y: np.ndarray, cfg: SgdConfig) -> None:
    """Start the final bias at the mean target when ``cfg.output_bias == "mean"``."""
    if cfg.output_bias == "mean":
        net.params["fc2.b"].value[...] = float(np.mean(y))


@dataclass
class EpochStats:
    epoch: int
    lr: float
    mean_loss: float
    clips: int
    seconds: float

    def log_line(self) -> str:
        # wall seconds is the only non-reproducible column and always comes last
        return f"{self.epoch}\t{self.lr:.6g}\t{self.mean_loss:.10g}\t{self.seconds:.3f}"


def train_epoch(net, x: np.ndarray, y: np.ndarray, opt: Sgd, rng: np.random.Generator,
                epoch: int) -> EpochStats:
    """One pass over ``(x, y)`` in shuffled minibatches; the last partial batch is kept."""
    n = len(x)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    t0 = time.perf_counter()
    lr = lr_at(epoch, opt.cfg)
    order = rng.permutation(n)
    losses = []
    params = net.parameters()
    for s in range(0, n, opt.cfg.batch_size):
        idx = order[s:s + opt.cfg.batch_size]
        tape = Tape()
        pred = net.forward(tape.constant(x[idx]))
        loss = mse_loss(pred, y[idx])
        if not np.isfinite(loss.value):
            raise FloatingPointError(f"non-finite loss at epoch {epoch}")
        grads = tape.backward(loss, params)
        opt.step(grads, lr)
        losses.append(float(loss.value))
    return EpochStats(epoch, lr, float(np.mean(losses)), n, time.perf_counter() - t0)


def fit(net, x: np.ndarray, y: np.ndarray, opt: Sgd, rng: np.random.Generator,
        start_epoch: int = 0, end_epoch: int | None = None,
        on_epoch: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
    end_epoch = opt.cfg.max_epochs if end_epoch is None else end_epoch
    history = []
    for epoch in range(start_epoch, end_epoch):
        stats = train_epoch(net, x, y, opt, rng, epoch)
        log.debug("epoch %d lr %g loss %.6g", epoch, stats.lr, stats.mean_loss)
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return history
