"""Server-side aggregation rules, EmInspector included.

Every rule is exposed twice: as a plain function over uploads (for direct use
and oracle tests) and as a :class:`Defense` object that the federation loop
calls once per round with a :class:`ServerContext`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..aggregation import Upload, fedavg
from ..core import ParameterVector
from ..errors import ConfigError, DefenseError
from .baselines import (
    RuleResult,
    flare,
    flare_trust,
    flame,
    fltrust,
    foolsgold,
    foolsgold_weights,
    krum,
    krum_scores,
    mmd_matrix,
    rflbat,
    trimmed_mean,
)
from .eminspector import (
    InspectionResult,
    MaliciousScoreTable,
    accumulated_similarities,
    accumulated_similarity,
    decision_boundary,
    eminspector,
    eminspector_knowledge_adjusted,
    inspect,
    median_sorted,
    top_k_count,
    vote,
)

DEFENSE_KINDS = ("fedavg", "eminspector", "krum", "trimmed_mean", "fltrust", "foolsgold", "flame", "rflbat", "flare")


@dataclass(frozen=True)
class DefenseConfig:
    kind: str = "fedavg"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ConfigError(f"unknown defense {self.kind!r}; choose from {', '.join(DEFENSE_KINDS)}")
        p = self.params
        if self.kind == "krum" and int(p.get("C", 1)) < 0:
            raise ConfigError("krum C must be >= 0")
        if self.kind == "trimmed_mean" and int(p.get("k", 1)) < 0:
            raise ConfigError("trimmed_mean k must be >= 0")
        if self.kind == "eminspector":
            if p.get("boundary", "max") not in ("max", "mean"):
                raise ConfigError("eminspector boundary must be 'max' or 'mean'")
            if "est_malicious_frac" in p:
                frac = float(p["est_malicious_frac"]) + float(p.get("fluctuation", 0.0))
                if not 0 < frac < 0.5:
                    raise ConfigError("est_malicious_frac + fluctuation must lie in (0, 0.5)")
        if self.kind == "flame" and float(p.get("noise_lambda", 0.001)) < 0:
            raise ConfigError("flame noise_lambda must be >= 0")

    def needs_inspection(self) -> bool:
        return self.kind in ("eminspector", "flare")


@dataclass
class ServerContext:
    """What the server has access to in one round (never the malice ground truth)."""

    global_params: ParameterVector
    embed: Callable[[ParameterVector, np.ndarray], np.ndarray]
    round: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    inspection: object = None
    server_update: Callable[[ParameterVector], ParameterVector] | None = None


@dataclass
class AggregationResult:
    params: ParameterVector
    flagged: set[int] = field(default_factory=set)
    table: MaliciousScoreTable | None = None
    info: dict = field(default_factory=dict)


class Defense:
    def __init__(self, config: DefenseConfig):
        self.config = config
        self.history: dict = {}

    @property
    def kind(self) -> str:
        return self.config.kind

    def aggregate(self, uploads: Sequence[Upload], ctx: ServerContext) -> AggregationResult:
        if not uploads:
            raise DefenseError("no uploads this round")
        for u in uploads:
            if not isinstance(u, Upload):
                raise DefenseError("defenses only accept Upload records")
        p = self.config.params
        kind = self.kind
        if kind == "fedavg":
            return AggregationResult(fedavg(list(uploads)))
        if kind == "eminspector":
            items = _items(ctx)
            if len(uploads) < 2:
                return AggregationResult(fedavg(list(uploads)), info={"skipped": "single upload"})
            if "est_malicious_frac" in p:
                res = eminspector_knowledge_adjusted(uploads, items, ctx.embed, float(p["est_malicious_frac"]),
                                                     float(p.get("fluctuation", 0.0)), ctx.global_params)
            else:
                res = eminspector(uploads, items, ctx.embed, ctx.global_params, rule=p.get("boundary", "max"))
            return AggregationResult(res.params, res.flagged, res.table, {"fallback": res.fallback})
        if kind == "krum":
            C = int(p.get("C", 1))
            if len(uploads) < C + 3:
                return AggregationResult(fedavg(list(uploads)), info={"skipped": "too few uploads for krum"})
            r = krum(uploads, C)
        elif kind == "trimmed_mean":
            k = int(p.get("k", 1))
            if 2 * k >= len(uploads):
                return AggregationResult(fedavg(list(uploads)), info={"skipped": "too few uploads to trim"})
            r = trimmed_mean(uploads, k)
        elif kind == "fltrust":
            if ctx.server_update is None:
                raise DefenseError("FLTrust needs a server-side update")
            r = fltrust(uploads, ctx.server_update(ctx.global_params), ctx.global_params)
        elif kind == "foolsgold":
            r = foolsgold(uploads, self.history, ctx.global_params)
        elif kind == "flame":
            if len(uploads) < 3:
                return AggregationResult(fedavg(list(uploads)), info={"skipped": "too few uploads for flame"})
            r = flame(uploads, ctx.global_params, ctx.rng, float(p.get("noise_lambda", 0.001)))
        elif kind == "rflbat":
            if len(uploads) < 4:
                return AggregationResult(fedavg(list(uploads)), info={"skipped": "too few uploads for rflbat"})
            r = rflbat(uploads, ctx.global_params, seed=int(ctx.rng.integers(2**31)))
        elif kind == "flare":
            k = p.get("k")
            r = flare(uploads, _items(ctx), ctx.embed, ctx.global_params, None if k is None else int(k))
        else:  # pragma: no cover - guarded by DefenseConfig
            raise DefenseError(kind)
        return AggregationResult(r.params, r.flagged, None, r.info)


def _items(ctx: ServerContext) -> np.ndarray:
    if ctx.inspection is None:
        raise DefenseError("this defense needs an inspection set")
    return getattr(ctx.inspection, "items", ctx.inspection)


def make_defense(config: DefenseConfig | str | None) -> Defense:
    if config is None:
        config = DefenseConfig()
    elif isinstance(config, str):
        config = DefenseConfig(config)
    return Defense(config)
