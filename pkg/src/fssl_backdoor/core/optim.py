"""SGD and Adam over flat parameter vectors.

An :class:`Optimizer` owns its moment buffers, so Adam state carries across
``step`` calls.  Coordinates outside the trainable mask (batch-norm running
statistics always, batch-norm affine terms when frozen) are never written.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, LayoutError
from .encoder import EncoderState, trainable_mask
from .params import ParameterVector


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid Adam hyper-parameters")


class Optimizer:
    def __init__(self, config: OptimizerConfig):
        self.config = config
        self.t = 0
        self.m: np.ndarray | None = None
        self.v: np.ndarray | None = None

    def step(self, state: EncoderState, grads: ParameterVector | np.ndarray) -> EncoderState:
        params = state.params
        if isinstance(grads, ParameterVector):
            if grads.layout != params.layout:
                raise LayoutError("gradient layout does not match parameters")
            g = grads.values
        else:
            g = np.asarray(grads)
            if g.shape != params.values.shape:
                raise LayoutError("gradient length does not match parameters")
        mask = trainable_mask(params.layout, state.bn_frozen)
        cfg = self.config
        new = params.values.copy()
        if cfg.kind == "sgd":
            new[mask] -= cfg.learning_rate * g[mask]
        else:
            if self.m is None:
                self.m = np.zeros_like(new)
                self.v = np.zeros_like(new)
            self.t += 1
            gm = g[mask]
            self.m[mask] = cfg.beta1 * self.m[mask] + (1 - cfg.beta1) * gm
            self.v[mask] = cfg.beta2 * self.v[mask] + (1 - cfg.beta2) * gm * gm
            mhat = self.m[mask] / (1 - cfg.beta1**self.t)
            vhat = self.v[mask] / (1 - cfg.beta2**self.t)
            new[mask] -= cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
        return state.with_params(params.with_values(new))


def optimizer_step(optimizer: Optimizer, state: EncoderState, grads) -> EncoderState:
    return optimizer.step(state, grads)
