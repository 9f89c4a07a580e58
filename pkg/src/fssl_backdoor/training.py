"""Local training loops shared by benign and malicious clients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import EncoderState, Optimizer, OptimizerConfig, ParameterVector, ntxent_loss
from .core.losses import DEFAULT_TEMPERATURE
from .data import augment


@dataclass(frozen=True)
class TrainConfig:
    """Knobs of one client's contrastive pass over its data."""

    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch_size: int = 64
    temperature: float = DEFAULT_TEMPERATURE
    max_shift: int = 2
    flip: bool = True
    noise: float = 0.03
    brightness: float = 0.1

    def augment(self, images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return augment(images, rng, max_shift=self.max_shift, flip=self.flip, noise=self.noise,
                       brightness=self.brightness)


def with_running(params: ParameterVector, running: dict) -> ParameterVector:
    if not running:
        return params
    for name, val in running.items():
        params.view(name)[...] = val
    return params


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; a trailing batch of one sample is dropped."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        if len(idx) >= 2:
            yield idx


def contrastive_epochs(state: EncoderState, images: np.ndarray, epochs: int, cfg: TrainConfig,
                       rng: np.random.Generator, optimizer: Optimizer | None = None) -> EncoderState:
    """Run ``epochs`` of SimCLR-style training; returns the updated state."""
    if epochs <= 0:
        return state
    opt = optimizer or Optimizer(cfg.optimizer)
    for _ in range(epochs):
        for idx in minibatches(len(images), cfg.batch_size, rng):
            x = images[idx]
            va = cfg.augment(x, rng)
            vb = cfg.augment(x, rng)
            res = ntxent_loss(state, va, vb, cfg.temperature)
            state = opt.step(state, res.grads)
            if not state.bn_frozen:
                with_running(state.params, res.running)
    return state
