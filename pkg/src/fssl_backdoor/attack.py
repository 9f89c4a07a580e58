"""Malicious clients: embedding-hijack backdoor training and data poisoning.

A model-poisoning attacker starts each round from the broadcast global
model, trains ``eta`` ordinary contrastive epochs (so its update looks like
everyone else's), then spends the remaining ``tau - eta`` epochs minimising
``lambda1 * L1 + lambda2 * L2`` with SGD while batch norm is frozen.  The
clean anchor model and the reference embedding are fixed when the attack
is launched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    CRITERIA,
    EncoderSpec,
    EncoderState,
    Optimizer,
    OptimizerConfig,
    ParameterVector,
    backdoor_loss,
    embed_many,
    normalize_rows,
)
from .data import Dataset, GlobalTrigger, TriggerPattern, poison_with_indices
from .errors import ConfigError, DataError
from .training import TrainConfig, contrastive_epochs, minibatches

ATTACK_KINDS = ("model_poisoning", "data_poisoning")
CLEAN_MODEL_MODES = ("shared_initial", "previous_round", "per_client_finetuned")


@dataclass(frozen=True)
class AttackPlan:
    malicious_ids: frozenset = frozenset()
    kind: str = "model_poisoning"
    collusion: str = "single"
    lambda1: float = 1.0
    lambda2: float = 1.0
    start_round: int | str = 0
    attack_optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig("sgd", 0.05))
    attack_batch_size: int = 8
    eta: int = 1
    bn_frozen: bool = True
    target_class: int = 0
    similarity_criterion: str = "cosine"
    reference_mode: str = "shared"
    reference_selection: str = "medoid"
    clean_model_mode: str = "shared_initial"
    finetune_epochs: int = 1
    poison_fraction: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "malicious_ids", frozenset(int(c) for c in self.malicious_ids))
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}")
        if self.collusion not in ("single", "coordinated"):
            raise ConfigError("collusion must be 'single' or 'coordinated'")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.lambda1 + self.lambda2 == 0:
            raise ConfigError("lambda1, lambda2 must be non-negative and not both zero")
        if self.similarity_criterion not in CRITERIA:
            raise ConfigError(f"similarity_criterion must be one of {CRITERIA}")
        if self.reference_mode not in ("shared", "per_client"):
            raise ConfigError("reference_mode must be 'shared' or 'per_client'")
        if self.reference_selection not in ("medoid", "random"):
            raise ConfigError("reference_selection must be 'medoid' or 'random'")
        if self.clean_model_mode not in CLEAN_MODEL_MODES:
            raise ConfigError(f"clean_model_mode must be one of {CLEAN_MODEL_MODES}")
        if isinstance(self.start_round, str) and self.start_round != "auto":
            raise ConfigError("start_round must be an integer or 'auto'")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.attack_batch_size < 1:
            raise ConfigError("attack_batch_size must be >= 1")
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ConfigError("poison_fraction must lie in [0, 1]")

    @property
    def M(self) -> int:
        return len(self.malicious_ids)

    def validate(self, n_clients: int, tau: int, allow_majority: bool = False) -> None:
        bad = [c for c in self.malicious_ids if not 0 <= c < n_clients]
        if bad:
            raise ConfigError(f"malicious ids {sorted(bad)} are not client ids")
        if not allow_majority and 2 * self.M >= n_clients:
            raise ConfigError(f"malicious clients must be a minority: M={self.M} >= N/2 with N={n_clients}")
        if self.eta > tau:
            raise ConfigError(f"eta={self.eta} exceeds local epochs tau={tau}")


@dataclass
class MaliciousClientState:
    client_id: int
    trigger: TriggerPattern | GlobalTrigger
    target_image: np.ndarray
    target_index: int
    clean_params: ParameterVector
    reference_embedding: np.ndarray
    _clean_cache: dict = field(default_factory=dict, repr=False)

    def clean_embeddings(self, spec: EncoderSpec, images: np.ndarray) -> np.ndarray:
        """``f(x, theta_clean)`` for the client's images, computed once per anchor."""
        key = id(images)
        if key not in self._clean_cache:
            self._clean_cache.clear()
            self._clean_cache[key] = embed_many(EncoderState(spec, self.clean_params), images)
        return self._clean_cache[key]


def assign_triggers(plan: AttackPlan, global_trigger: GlobalTrigger) -> dict[int, TriggerPattern | GlobalTrigger]:
    """Single pattern: everyone gets the assembled trigger.  Coordinated: local pieces, cycled."""
    if not global_trigger.locals:
        raise DataError("empty trigger set")
    ids = sorted(plan.malicious_ids)
    if plan.collusion == "single":
        return {c: global_trigger for c in ids}
    locs = global_trigger.locals
    return {c: locs[k % len(locs)] for k, c in enumerate(ids)}


def choose_reference_indices(plan: AttackPlan, pool: Dataset, seed, embed=None) -> dict[int, int]:
    """Index of ``x_target`` in ``pool`` per attacker (one shared, or distinct ones).

    ``medoid`` ranks target-class images by how close their embedding (under
    ``embed``, the clean anchor) lies to the normalised class mean; ``random``
    takes a seeded permutation.  Per-client mode hands out the top ``M``.
    """
    if pool.labels is None:
        raise DataError("reference selection needs labels")
    cand = np.flatnonzero(pool.labels == plan.target_class)
    if len(cand) == 0:
        raise DataError(f"target class {plan.target_class} absent from the reference pool")
    if plan.reference_selection == "medoid":
        if embed is None:
            raise ConfigError("medoid reference selection needs the clean encoder")
        E = normalize_rows(embed(pool.images[cand]))
        centre = normalize_rows(E.mean(axis=0, keepdims=True))[0]
        order = cand[np.argsort(-(E @ centre), kind="stable")]
    else:
        order = cand[np.random.default_rng([int(seed), 17]).permutation(len(cand))]
    ids = sorted(plan.malicious_ids)
    if plan.reference_mode == "shared":
        return {c: int(order[0]) for c in ids}
    if len(order) < len(ids):
        raise DataError("not enough target-class images for distinct references")
    return {c: int(order[k]) for k, c in enumerate(ids)}


def adaptive_variants(plan: AttackPlan, spec: EncoderSpec, anchor: ParameterVector, global_trigger: GlobalTrigger,
                      reference_pool: Dataset, seed, client_images: dict[int, np.ndarray] | None = None,
                      train_cfg: TrainConfig | None = None) -> dict[int, MaliciousClientState]:
    """Build every attacker's state when the attack is launched.

    ``per_client_finetuned`` first fine-tunes the anchor on each attacker's
    own data for ``plan.finetune_epochs`` contrastive epochs, giving each a
    distinct clean model.
    """
    triggers = assign_triggers(plan, global_trigger)
    refs = choose_reference_indices(plan, reference_pool, seed,
                                    lambda x: embed_many(EncoderState(spec, anchor), x))
    shared_img = None
    out = {}
    for c in sorted(plan.malicious_ids):
        if plan.reference_mode == "shared":
            if shared_img is None:
                shared_img = reference_pool.images[refs[c]]
            img = shared_img
        else:
            img = reference_pool.images[refs[c]]
        clean = anchor
        if plan.clean_model_mode == "per_client_finetuned":
            if client_images is None or train_cfg is None:
                raise ConfigError("per_client_finetuned needs client data and a training config")
            st = contrastive_epochs(EncoderState(spec, anchor.copy()), client_images[c], plan.finetune_epochs,
                                    train_cfg, np.random.default_rng([int(seed), 23, c]))
            clean = st.params
        ref = embed_many(EncoderState(spec, clean), img[None])[0]
        out[c] = MaliciousClientState(c, triggers[c], img, refs[c], clean, ref)
    return out


def local_train_malicious(global_params: ParameterVector, mstate: MaliciousClientState, images: np.ndarray,
                          plan: AttackPlan, spec: EncoderSpec, tau: int, train_cfg: TrainConfig,
                          rng: np.random.Generator) -> tuple[ParameterVector, list[dict]]:
    """``eta`` benign epochs then ``tau - eta`` backdoor epochs; returns params and the loss trace."""
    state = EncoderState(spec, global_params.copy())
    eta = min(plan.eta, tau)
    state = contrastive_epochs(state, images, eta, train_cfg, rng)
    trace: list[dict] = []
    if tau - eta <= 0:
        return state.params, trace
    state = state.frozen(plan.bn_frozen)
    clean_embs = mstate.clean_embeddings(spec, images)
    opt = Optimizer(plan.attack_optimizer)
    for _ in range(tau - eta):
        for idx in minibatches(len(images), plan.attack_batch_size, rng):
            res = backdoor_loss(state, images[idx], mstate.trigger, mstate.target_image,
                                mstate.reference_embedding, clean_embs[idx], plan.lambda1, plan.lambda2,
                                plan.similarity_criterion)
            state = opt.step(state, res.grads)
            if not state.bn_frozen:
                for name, val in res.running.items():
                    state.params.view(name)[...] = val
            trace.append({"loss": res.loss, **res.parts})
    return state.params, trace


def poison_client_images(ds: Dataset, plan: AttackPlan, global_trigger: GlobalTrigger, seed) -> Dataset:
    """Data-poisoning attacker's local set: target-class images carry the trigger."""
    poisoned, _ = poison_with_indices(ds, plan.target_class, global_trigger, plan.poison_fraction, seed)
    return poisoned


def data_poisoning_round(global_params: ParameterVector, poisoned_images: np.ndarray, spec: EncoderSpec, tau: int,
                         train_cfg: TrainConfig, rng: np.random.Generator) -> ParameterVector:
    """Plain contrastive training on a poisoned local set (the loss is untouched)."""
    return contrastive_epochs(EncoderState(spec, global_params.copy()), poisoned_images, tau, train_cfg, rng).params


def with_anchor(mstate: MaliciousClientState, spec: EncoderSpec, anchor: ParameterVector) -> MaliciousClientState:
    """Re-anchor on a new clean model (used when the anchor follows the previous round)."""
    ref = embed_many(EncoderState(spec, anchor), mstate.target_image[None])[0]
    return replace(mstate, clean_params=anchor, reference_embedding=ref, _clean_cache={})
