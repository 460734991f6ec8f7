"""SGD with momentum and L2 weight decay under a single-cycle cosine schedule."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ConfigError, DataError, NumericError, pair_prior_training
from .model import ModelParams, loss_and_gradient

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.005
    momentum: float = 0.9
    weight_decay: float = 0.0001
    total_steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    reduction: str = "mean"  # "sum": raw summed loss; "mean": divided by batch size

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise ConfigError("lr0 must be non-negative")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.total_steps < 1 or self.batch_size < 1:
            raise ConfigError("total_steps and batch_size must be positive")
        if self.reduction not in ("sum", "mean"):
            raise ConfigError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


class TrainingAborted(NumericError):
    """Numeric failure mid-run; carries the last parameters that were finite."""

    def __init__(self, message, last_good: ModelParams, step: int):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


def cosine_lr(step: int, total_steps: int, lr0: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr0 * (1.0 + math.cos(math.pi * step / total_steps)) / 2.0


def sgd_step(params: ModelParams, grads: ModelParams, velocity: ModelParams, lr: float, cfg: TrainConfig):
    """One momentum step; returns new (params, velocity) without mutating inputs."""
    new_p, new_v = {}, {}
    for name, w in params.items():
        g = grads[name] + cfg.weight_decay * w
        v = cfg.momentum * velocity[name] + g
        new_v[name] = v
        new_p[name] = w - lr * v
    params_out = ModelParams(params.config, new_p)
    if not params_out.all_finite():
        raise NumericError(f"non-finite parameter update; {params_out.diagnostics()}")
    return params_out, ModelParams(params.config, new_v)


@dataclass
class TrainingSample:
    """One current exam with its candidate priors and label arrays."""

    current: object
    priors: list
    h: np.ndarray
    mask: np.ndarray


def train(samples, params0: ModelParams, cfg: TrainConfig):
    """Fixed-step minibatch training.

    ``samples`` is a sequence of :class:`TrainingSample`. Each step draws a
    minibatch with replacement and, per sample, one prior uniformly at random.
    Returns final params and a list of ``(step, lr, loss)`` rows.
    """
    if not samples:
        raise DataError("training set is empty")
    for s in samples:
        if not s.priors:
            raise DataError(f"exam {s.current.exam_id} has no prior")
    rng = np.random.default_rng(cfg.seed)
    params = params0.copy()
    velocity = params0.zeros_like()
    history = []
    Xc_all = np.stack([s.current.features for s in samples])
    H_all = np.stack([s.h for s in samples])
    M_all = np.stack([s.mask for s in samples])
    n = len(samples)
    for step in range(cfg.total_steps):
        lr = cosine_lr(step, cfg.total_steps, cfg.lr0)
        idx = rng.integers(n, size=cfg.batch_size)
        Xp = np.stack([pair_prior_training(samples[i].current, samples[i].priors, rng).features for i in idx])
        try:
            loss, grads = loss_and_gradient(Xc_all[idx], Xp, H_all[idx], M_all[idx], params)
            if cfg.reduction == "mean":
                loss /= cfg.batch_size
                grads = ModelParams(grads.config, {k: g / cfg.batch_size for k, g in grads.items()})
            params, velocity = sgd_step(params, grads, velocity, lr, cfg)
        except NumericError as exc:
            raise TrainingAborted(f"step {step}: {exc}", params, step) from exc
        history.append((step, lr, loss))
        if step % 500 == 0:
            log.debug("step %d lr %.5f loss %.4f", step, lr, loss)
    return params, history


def write_history(history, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in history:
            w.writerow([step, repr(lr), repr(loss)])


def read_history(path):
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [(int(r["step"]), float(r["lr"]), float(r["loss"])) for r in rows]
