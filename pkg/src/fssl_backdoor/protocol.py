"""Federated rounds: broadcast, selection, local training, defense, aggregation, evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .aggregation import ClientUpdate, fedavg
from .attack import (
    AttackPlan,
    MaliciousClientState,
    adaptive_variants,
    local_train_malicious,
    poison_client_images,
    with_anchor,
)
from .core import EncoderSpec, EncoderState, OptimizerConfig, ParameterVector, embed_many, init_params
from .core.losses import DEFAULT_TEMPERATURE
from .data import Dataset, GlobalTrigger, InspectionSet
from .defense import Defense, DefenseConfig, MaliciousScoreTable, ServerContext, make_defense
from .errors import ConfigError, FSSLError, NonFiniteError
from .evaluation import DetectionStats, EvalPlan, acc_and_asr, detection_stats, flag_stats
from .training import TrainConfig, contrastive_epochs

# stream tags keep the per-purpose RNGs of one master seed independent
_SELECT, _CLIENT, _DEFENSE, _SERVER, _INIT = 101, 202, 303, 404, 505


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 10
    clients_per_round: int = 5
    local_epochs: int = 3
    rounds: int = 45
    per_client_size: int = 200
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    seed: int = 0
    batch_size: int = 64
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if not 1 <= self.clients_per_round <= self.n_clients:
            raise ConfigError(f"clients_per_round must lie in [1, {self.n_clients}]")
        if self.local_epochs < 0:
            raise ConfigError("local_epochs must be >= 0")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if self.per_client_size < 1:
            raise ConfigError("per_client_size must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")

    def train_config(self) -> TrainConfig:
        return TrainConfig(optimizer=self.optimizer, batch_size=self.batch_size, temperature=self.temperature)


def select_clients(cfg: FederationConfig, round: int, seed=None) -> list[int]:
    """Uniform sample without replacement, sorted; a pure function of ``(seed, round)``."""
    seed = cfg.seed if seed is None else seed
    if cfg.clients_per_round == cfg.n_clients:
        return list(range(cfg.n_clients))
    rng = np.random.default_rng([int(seed), _SELECT, int(round)])
    return sorted(int(c) for c in rng.choice(cfg.n_clients, cfg.clients_per_round, replace=False))


def client_rng(seed, client_id: int, round: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), _CLIENT, int(round), int(client_id)])


def _images(ds) -> np.ndarray:
    return ds.images if isinstance(ds, Dataset) else np.asarray(ds)


def local_train_benign(global_params: ParameterVector, client_ds, cfg: FederationConfig, spec: EncoderSpec, *,
                       client_id: int = 0, round: int = 0, rng: np.random.Generator | None = None) -> ClientUpdate:
    global_params.check_layout(spec.layout())
    images = _images(client_ds)
    rng = client_rng(cfg.seed, client_id, round) if rng is None else rng
    st = contrastive_epochs(EncoderState(spec, global_params.copy()), images, cfg.local_epochs, cfg.train_config(), rng)
    return ClientUpdate(client_id, st.params, len(images))


@dataclass
class RoundReport:
    round: int
    selected: tuple
    flagged: frozenset
    acc: float | None
    asr: float | None
    scores: dict | None
    detection: DetectionStats | None
    wall_time: float
    attacking: bool = False
    malicious_selected: tuple = ()
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if not set(self.flagged) <= set(self.selected):
            raise FSSLError("flagged clients must be a subset of the selected ones")


@dataclass
class FederationResult:
    reports: list[RoundReport]
    params: ParameterVector
    tables: list[tuple[int, MaliciousScoreTable]]
    start_round: int | None
    initial_acc: float | None
    initial_asr: float | None
    anchor: ParameterVector | None = None
    attackers: dict[int, MaliciousClientState] = field(default_factory=dict)
    last_updates: list[ClientUpdate] = field(default_factory=list)

    @property
    def final(self) -> RoundReport:
        return self.reports[-1]


def _resolve_start(plan: AttackPlan, r: int, acc_hist: list[float]) -> bool:
    """Whether round ``r`` is the first attacking round."""
    if plan.start_round != "auto":
        return r >= int(plan.start_round)
    # attack-late: ACC gained less than one point over the last three rounds
    return len(acc_hist) >= 4 and acc_hist[-1] - acc_hist[-4] < 1.0


def run_federation(cfg: FederationConfig, attack_plan: AttackPlan | None, defense: Defense | DefenseConfig | str | None,
                   eval_plan: EvalPlan | None, *, spec: EncoderSpec, clients: Mapping[int, Dataset | np.ndarray],
                   global_trigger: GlobalTrigger | None = None, reference_pool: Dataset | None = None,
                   inspection: InspectionSet | np.ndarray | None = None, root_data=None,
                   initial_params: ParameterVector | None = None,
                   on_round: Callable[[RoundReport], None] | None = None) -> FederationResult:
    """Run ``cfg.rounds`` communication rounds and report on each.

    ``clients`` maps every client id in ``range(cfg.n_clients)`` to its local
    data.  The attack plan, when present, needs ``global_trigger`` and a
    labeled ``reference_pool`` to pick the target reference image from.
    """
    if sorted(clients) != list(range(cfg.n_clients)):
        raise ConfigError("clients must cover ids 0..n_clients-1")
    data = {c: _images(d) for c, d in clients.items()}
    defense = defense if isinstance(defense, Defense) else make_defense(defense)
    plan = attack_plan if attack_plan is not None and attack_plan.M > 0 else None
    if plan is not None:
        plan.validate(cfg.n_clients, cfg.local_epochs, allow_majority=True)
        if global_trigger is None:
            raise ConfigError("an attack needs a trigger")
        if plan.kind == "model_poisoning" and reference_pool is None:
            raise ConfigError("model poisoning needs a labeled reference pool")
    if defense.config.needs_inspection() and inspection is None:
        raise ConfigError(f"defense {defense.kind} needs an inspection set")
    items = getattr(inspection, "items", inspection)

    train_cfg = cfg.train_config()
    if initial_params is None:
        initial_params = init_params(spec, np.random.default_rng([cfg.seed, _INIT]))
    initial_params.check_layout(spec.layout())
    g = initial_params.copy()

    def embed(params: ParameterVector, x: np.ndarray) -> np.ndarray:
        return embed_many(EncoderState(spec, params), x)

    def evaluate(params):
        if eval_plan is None:
            return None, None
        return acc_and_asr(EncoderState(spec, params), eval_plan)

    server_update = None
    if root_data is not None:
        root = _images(root_data)

        def server_update(params, _r=[0]):
            rng = np.random.default_rng([cfg.seed, _SERVER, _r[0]])
            return contrastive_epochs(EncoderState(spec, params.copy()), root, cfg.local_epochs, train_cfg, rng).params

    acc0, asr0 = evaluate(g)
    acc_hist = [acc0] if acc0 is not None else []
    start = None
    attackers: dict[int, MaliciousClientState] = {}
    poisoned: dict[int, np.ndarray] = {}
    anchor = None
    reports, tables, last = [], [], []
    truth = set(plan.malicious_ids) if plan else set()

    for r in range(cfg.rounds):
        t0 = time.perf_counter()
        try:
            if plan is not None and start is None and _resolve_start(plan, r, acc_hist):
                start = r
                anchor = g.copy()
                if plan.kind == "model_poisoning":
                    attackers = adaptive_variants(plan, spec, anchor, global_trigger, reference_pool, cfg.seed,
                                                  data, train_cfg)
                else:
                    for c in sorted(truth):
                        src = clients[c]
                        if not isinstance(src, Dataset) or src.labels is None:
                            raise ConfigError("data poisoning needs labeled client data")
                        poisoned[c] = poison_client_images(src, plan, global_trigger, [cfg.seed, c]).images
            attacking = start is not None
            if attacking and plan.kind == "model_poisoning" and plan.clean_model_mode == "previous_round" and r > start:
                attackers = {c: with_anchor(m, spec, g.copy()) for c, m in attackers.items()}

            selected = select_clients(cfg, r)
            updates = []
            for c in selected:
                rng = client_rng(cfg.seed, c, r)
                if attacking and c in truth:
                    if plan.kind == "model_poisoning":
                        params, _ = local_train_malicious(g, attackers[c], data[c], plan, spec, cfg.local_epochs,
                                                          train_cfg, rng)
                        u = ClientUpdate(c, params, len(data[c]), True)
                    else:
                        u = local_train_benign(g, poisoned[c], cfg, spec, client_id=c, round=r, rng=rng)
                        u = ClientUpdate(c, u.params, u.data_size, True)
                else:
                    u = local_train_benign(g, data[c], cfg, spec, client_id=c, round=r, rng=rng)
                    u = ClientUpdate(c, u.params, u.data_size, c in truth)
                updates.append(u)

            if server_update is not None:
                server_update.__defaults__[0][0] = r
            ctx = ServerContext(g, embed, r, np.random.default_rng([cfg.seed, _DEFENSE, r]), items, server_update)
            res = defense.aggregate([u.upload() for u in updates], ctx)
            if not np.all(np.isfinite(res.params.values)):
                raise NonFiniteError("aggregated parameters are not finite")
            g = res.params
            acc, asr_ = evaluate(g)
            if acc is not None:
                acc_hist.append(acc)
            if res.table is not None:
                res.table.check_invariants()
                tables.append((r, res.table))
                det = detection_stats(res.table, truth)
            elif defense.kind != "fedavg":
                det = flag_stats(selected, res.flagged, truth)
            else:
                det = None
        except FSSLError as exc:
            raise type(exc)(f"round {r}: {exc}") from exc
        rep = RoundReport(r, tuple(selected), frozenset(res.flagged), acc, asr_,
                          dict(res.table.scores) if res.table is not None else None, det,
                          time.perf_counter() - t0, attacking, tuple(c for c in selected if c in truth),
                          {k: v for k, v in res.info.items() if k in ("fallback", "skipped", "selected")})
        reports.append(rep)
        last = updates
        if on_round is not None:
            on_round(rep)

    return FederationResult(reports, g, tables, start, acc0, asr0, anchor, attackers, last)
