"""Upload records and weighted parameter averaging."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import ParameterVector
from .errors import DefenseError, LayoutError


@dataclass(frozen=True)
class Upload:
    """What the server sees of one client: id, parameters and data size."""

    client_id: int
    params: ParameterVector
    data_size: int


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    params: ParameterVector
    data_size: int
    # ground truth for the harness; stripped before any defense sees the update
    is_malicious_truth: bool = field(default=False, repr=False)

    def __post_init__(self):
        if self.data_size < 1:
            raise ValueError("data_size must be >= 1")

    def upload(self) -> Upload:
        return Upload(self.client_id, self.params, self.data_size)


def _check(updates: Sequence) -> None:
    if not updates:
        raise DefenseError("no updates to aggregate")
    layout = updates[0].params.layout
    for u in updates[1:]:
        if u.params.layout != layout:
            raise LayoutError(f"client {u.client_id} uploaded a different parameter layout")


def stack(updates: Sequence) -> np.ndarray:
    _check(updates)
    return np.stack([u.params.values for u in updates])


def fedavg(updates: Sequence) -> ParameterVector:
    """Coordinate-wise mean weighted by ``data_size / sum(data_size)``."""
    X = stack(updates)
    w = np.array([u.data_size for u in updates], dtype=np.float64)
    w /= w.sum()
    return updates[0].params.with_values(w @ X)


def weighted_average(updates: Sequence, weights) -> ParameterVector:
    X = stack(updates)
    w = np.asarray(weights, dtype=np.float64)
    return updates[0].params.with_values(w @ X / w.sum())


def deltas(updates: Sequence, global_params: ParameterVector) -> np.ndarray:
    X = stack(updates)
    if X.shape[1] != len(global_params):
        raise LayoutError("global parameters do not match the uploads")
    return X - global_params.values
