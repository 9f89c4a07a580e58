"""Experiment configuration: JSON file -> validated settings -> built experiment -> outputs.

A config is a JSON object with the sections ``federation``, ``data``,
``attack``, ``defense`` and ``eval`` plus top-level ``seed`` and
``output_dir``.  Missing keys take the values in :data:`DEFAULTS`; unknown
keys are rejected.  ``FSSL_SEED`` and ``FSSL_OUTPUT_DIR`` in the environment
override the seed and the output directory, nothing else.
"""

from __future__ import annotations

import copy
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .attack import AttackPlan
from .core import EncoderState, OptimizerConfig, default_spec
from .data import (
    Dataset,
    GlobalTrigger,
    InspectionSet,
    build_inspection_set,
    partition,
    split_probe,
    synthesize_dataset,
    trigger_from_config,
)
from .defense import DEFENSE_KINDS, DefenseConfig
from .errors import ConfigError, DataError, FSSLError
from .evaluation import EvalPlan, MetricsWriter, export_embedding_projection, gap_relative_error
from .protocol import FederationConfig, FederationResult, RoundReport, run_federation

DEFAULTS: dict = {
    "seed": 0,
    "output_dir": "runs/experiment",
    "federation": {
        "n_clients": 10,
        "clients_per_round": 5,
        "local_epochs": 3,
        "rounds": 45,
        "per_client_size": 200,
        "batch_size": 64,
        "temperature": 0.5,
        "optimizer": {"kind": "adam", "learning_rate": 0.001},
    },
    "data": {
        "classes": 4,
        "per_class": 300,
        "image_size": 16,
        "channels": 1,
        "noise": 0.05,
        "shift": 2,
        "smooth": 1.5,
        "brightness": 0.05,
        "partition": "noniid",
        "classes_per_client": 2,
        "balanced_classes": True,
        "probe_fraction": 0.3,
        "trigger": {"kind": "square", "size": 4},
        "inspection": {"source": "in-distribution", "count": 100},
        "root_size": 100,
        "encoder": {"width": 8, "embedding_dim": 32},
    },
    "attack": {
        "kind": "none",
        "malicious_fraction": 0.0,
        "malicious_ids": None,
        "allow_majority": False,
        "collusion": "single",
        "lambda1": 1.0,
        "lambda2": 1.0,
        "start_round": 15,
        "attack_optimizer": {"kind": "sgd", "learning_rate": 0.1},
        "attack_batch_size": 8,
        "eta": 1,
        "bn_frozen": True,
        "target_class": 0,
        "similarity_criterion": "cosine",
        "reference_mode": "shared",
        "reference_selection": "medoid",
        "clean_model_mode": "shared_initial",
        "finetune_epochs": 1,
        "poison_fraction": 1.0,
    },
    "defense": {"kind": "fedavg", "params": {}},
    "eval": {
        "knn_k": 5,
        "knn_temperature": 0.1,
        "gap_per_class": 50,
        "final_window": 5,
        "projection": False,
    },
}

# sections whose values are free-form dictionaries
_OPEN = {("defense", "params"), ("data", "trigger"), ("data", "inspection"), ("data", "encoder"),
         ("federation", "optimizer"), ("attack", "attack_optimizer")}

ENV_SEED = "FSSL_SEED"
ENV_OUTPUT = "FSSL_OUTPUT_DIR"


def _merge(base: dict, over: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {'.'.join(path + (k,))!r}")
        if isinstance(base[k], dict) and path + (k,) not in _OPEN:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(path + (k,))!r} must be an object")
            out[k] = _merge(base[k], v, path + (k,))
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve(raw: dict, env: dict | None = None) -> dict:
    """Fill defaults, apply environment overrides and validate."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS, raw)
    env = os.environ if env is None else env
    if env.get(ENV_SEED):
        try:
            cfg["seed"] = int(env[ENV_SEED])
        except ValueError:
            raise ConfigError(f"{ENV_SEED} must be an integer") from None
    if env.get(ENV_OUTPUT):
        cfg["output_dir"] = env[ENV_OUTPUT]
    validate(cfg)
    return cfg


def load_config(path, env: dict | None = None) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return resolve(raw, env)


# ---------------------------------------------------------------------------
# typed views


def federation_config(cfg: dict) -> FederationConfig:
    f = cfg["federation"]
    return FederationConfig(
        n_clients=int(f["n_clients"]), clients_per_round=int(f["clients_per_round"]),
        local_epochs=int(f["local_epochs"]), rounds=int(f["rounds"]), per_client_size=int(f["per_client_size"]),
        optimizer=_optimizer(f["optimizer"]), seed=int(cfg["seed"]), batch_size=int(f["batch_size"]),
        temperature=float(f["temperature"]),
    )


def _optimizer(d: dict) -> OptimizerConfig:
    try:
        return OptimizerConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad optimizer settings {d}: {exc}") from exc


def malicious_ids(cfg: dict) -> list[int]:
    a = cfg["attack"]
    n = int(cfg["federation"]["n_clients"])
    if a["malicious_ids"] is not None:
        return sorted(int(c) for c in a["malicious_ids"])
    frac = float(a["malicious_fraction"])
    if not 0.0 <= frac <= 1.0:
        raise ConfigError("malicious_fraction must lie in [0, 1]")
    return list(range(int(round(frac * n))))


def attack_plan(cfg: dict) -> AttackPlan | None:
    a = cfg["attack"]
    if a["kind"] == "none":
        return None
    start = a["start_round"]
    return AttackPlan(
        malicious_ids=frozenset(malicious_ids(cfg)), kind=a["kind"], collusion=a["collusion"],
        lambda1=float(a["lambda1"]), lambda2=float(a["lambda2"]),
        start_round=start if start == "auto" else int(start),
        attack_optimizer=_optimizer(a["attack_optimizer"]), attack_batch_size=int(a["attack_batch_size"]),
        eta=int(a["eta"]), bn_frozen=bool(a["bn_frozen"]), target_class=int(a["target_class"]),
        similarity_criterion=a["similarity_criterion"], reference_mode=a["reference_mode"],
        reference_selection=a["reference_selection"], clean_model_mode=a["clean_model_mode"],
        finetune_epochs=int(a["finetune_epochs"]), poison_fraction=float(a["poison_fraction"]),
    )


def defense_config(cfg: dict) -> DefenseConfig:
    d = cfg["defense"]
    if not isinstance(d["params"], dict):
        raise ConfigError("defense.params must be an object")
    return DefenseConfig(d["kind"], dict(d["params"]))


def validate(cfg: dict) -> None:
    """Cross-section checks; raises :class:`ConfigError` naming the violated rule."""
    try:
        int(cfg["seed"])
    except (TypeError, ValueError):
        raise ConfigError("seed must be an integer") from None
    fed = federation_config(cfg)
    d = cfg["data"]
    if int(d["classes"]) < 2:
        raise ConfigError("data.classes must be >= 2")
    if not 0 < float(d["probe_fraction"]) < 1:
        raise ConfigError("data.probe_fraction must lie in (0, 1)")
    if d["partition"] not in ("iid", "noniid"):
        raise ConfigError("data.partition must be 'iid' or 'noniid'")
    try:
        trig = trigger_from_config(d["trigger"], int(d["image_size"]), int(d["channels"]))
        for t in trig.locals:
            t.check_fits((int(d["image_size"]), int(d["image_size"]), int(d["channels"])))
    except (DataError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad trigger: {exc}") from exc
    if int(d["inspection"].get("count", 20)) < 1:
        raise ConfigError("inspection count must be >= 1")
    if cfg["defense"]["kind"] not in DEFENSE_KINDS:
        raise ConfigError(f"unknown defense {cfg['defense']['kind']!r}")
    defense_config(cfg)
    a = cfg["attack"]
    if a["kind"] not in ("none", "model_poisoning", "data_poisoning"):
        raise ConfigError(f"unknown attack kind {a['kind']!r}")
    if not 0 <= int(a["target_class"]) < int(d["classes"]):
        raise ConfigError(f"target_class {a['target_class']} does not exist among {d['classes']} classes")
    ids = malicious_ids(cfg)
    if any(not 0 <= c < fed.n_clients for c in ids):
        raise ConfigError("malicious ids must be client ids")
    if 2 * len(ids) >= fed.n_clients and not a["allow_majority"]:
        raise ConfigError(f"malicious clients must be a minority (M={len(ids)}, N={fed.n_clients}); "
                          "set attack.allow_majority to override")
    plan = attack_plan(cfg)
    if plan is not None:
        plan.validate(fed.n_clients, fed.local_epochs, allow_majority=bool(a["allow_majority"]))
        if plan.collusion == "coordinated" and len(trig.locals) < 2:
            raise ConfigError("coordinated collusion needs a trigger with several local patterns")
    if int(cfg["eval"]["knn_k"]) < 1 or int(cfg["eval"]["final_window"]) < 1:
        raise ConfigError("eval.knn_k and eval.final_window must be >= 1")


# ---------------------------------------------------------------------------
# building


@dataclass
class Experiment:
    config: dict
    federation: FederationConfig
    spec: object
    clients: dict[int, Dataset]
    eval_plan: EvalPlan
    attack: AttackPlan | None
    defense: DefenseConfig
    trigger: GlobalTrigger
    reference_pool: Dataset
    inspection: InspectionSet
    root_data: Dataset


def build(cfg: dict) -> Experiment:
    """Synthesize data, split it and assemble every component from a resolved config."""
    seed = int(cfg["seed"])
    d = cfg["data"]
    fed = federation_config(cfg)
    size, ch = int(d["image_size"]), int(d["channels"])
    ds = synthesize_dataset(int(d["classes"]), int(d["per_class"]), [seed, 1], size=size, channels=ch,
                            noise=float(d["noise"]), shift=int(d["shift"]), smooth=float(d["smooth"]),
                            brightness=float(d["brightness"]))
    pool_idx, probe_idx = split_probe(ds, float(d["probe_fraction"]), [seed, 3])
    pool, probe = ds.subset(pool_idx), ds.subset(probe_idx)
    tr, te = split_probe(probe, 0.5, [seed, 6])
    trigger = trigger_from_config(d["trigger"], size, ch)
    plan = attack_plan(cfg)
    target = int(cfg["attack"]["target_class"])
    required = None
    if plan is not None and plan.kind == "data_poisoning":
        required = {c: target for c in plan.malicious_ids}
    part = partition(pool, fed.n_clients, fed.per_client_size, d["partition"], int(d["classes_per_client"]),
                     [seed, 2], required_classes=required, balanced=bool(d["balanced_classes"]))
    clients = {c: pool.subset(idx) for c, idx in part.assignments.items()}
    e = cfg["eval"]
    plan_eval = EvalPlan(probe.subset(tr), probe.subset(te), target, trigger, int(e["knn_k"]),
                         float(e["knn_temperature"]), int(e["gap_per_class"]))
    ins = d["inspection"]
    inspection = build_inspection_set(ins.get("source", "in-distribution"), int(ins.get("count", 20)), [seed, 4],
                                      pool=pool, image_shape=(size, size, ch))
    rng = np.random.default_rng([seed, 5])
    root = pool.subset(np.sort(rng.choice(len(pool), size=min(int(d["root_size"]), len(pool)), replace=False)))
    enc = d["encoder"]
    spec = default_spec(channels=ch, size=size, embedding_dim=int(enc.get("embedding_dim", 32)),
                        width=int(enc.get("width", 8)))
    return Experiment(cfg, fed, spec, clients, plan_eval, plan, defense_config(cfg), trigger, pool, inspection, root)


# ---------------------------------------------------------------------------
# running


@dataclass
class ExperimentResult:
    experiment: Experiment
    federation: FederationResult
    summary: dict

    @property
    def reports(self) -> list[RoundReport]:
        return self.federation.reports


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def summarize(exp: Experiment, res: FederationResult, wall: float) -> dict:
    reps = res.reports
    w = int(exp.config["eval"]["final_window"])
    tail = reps[-w:] if reps else []
    after = [r for r in reps if r.attacking] if res.start_round is not None else reps
    truth = set(exp.attack.malicious_ids) if exp.attack else set()
    exact = [set(r.flagged) == set(r.malicious_selected) for r in after]
    out = {
        "seed": exp.config["seed"],
        "rounds": len(reps),
        "start_round": res.start_round,
        "initial_acc": res.initial_acc,
        "initial_asr": res.initial_asr,
        "final_acc": reps[-1].acc if reps else None,
        "final_asr": reps[-1].asr if reps else None,
        "window_acc": _mean(r.acc for r in tail),
        "window_asr": _mean(r.asr for r in tail),
        "mean_fpr": _mean(r.detection.fpr for r in after if r.detection),
        "mean_tpr": _mean(r.detection.tpr for r in after if r.detection),
        "mean_b_ms": _mean(r.detection.b_ms for r in after if r.detection),
        "mean_m_ms": _mean(r.detection.m_ms for r in after if r.detection),
        "exact_flag_fraction": float(np.mean(exact)) if exact and exp.defense.kind != "fedavg" else None,
        "malicious_ids": sorted(truth),
        "defense": exp.defense.kind,
        "attack": exp.attack.kind if exp.attack else "none",
        "gap_relative_error": None,
        "wall_time": wall,
    }
    if res.anchor is not None and exp.attack is not None and exp.attack.kind == "model_poisoning":
        out["gap_relative_error"] = gap_relative_error(EncoderState(exp.spec, res.anchor),
                                                       EncoderState(exp.spec, res.params), exp.eval_plan,
                                                       seed=[int(exp.config["seed"]), 7])
    return out


def run_experiment(cfg: dict, *, write: bool = True, on_round: Callable[[RoundReport], None] | None = None
                   ) -> ExperimentResult:
    """Build and run one experiment; with ``write`` the CSV, JSON summary and score tables land in ``output_dir``."""
    exp = build(cfg)
    out_dir = Path(cfg["output_dir"])
    writer = None
    if write:
        out_dir.mkdir(parents=True, exist_ok=True)
        writer = MetricsWriter(out_dir / "metrics.csv")

    def hook(rep: RoundReport) -> None:
        if writer is not None:
            writer.write(rep)
        if on_round is not None:
            on_round(rep)

    t0 = time.perf_counter()
    try:
        res = run_federation(exp.federation, exp.attack, exp.defense, exp.eval_plan, spec=exp.spec,
                             clients=exp.clients, global_trigger=exp.trigger, reference_pool=exp.reference_pool,
                             inspection=exp.inspection, root_data=exp.root_data, on_round=hook)
    finally:
        if writer is not None:
            writer.close()
    summary = summarize(exp, res, time.perf_counter() - t0)
    if write:
        with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
            json.dump({"summary": summary, "config": cfg}, fh, indent=2, sort_keys=True)
        with open(out_dir / "scores.json", "w", encoding="utf-8") as fh:
            json.dump([{"round": r, **t.to_json()} for r, t in res.tables], fh, indent=1)
        if cfg["eval"]["projection"] and len(res.last_updates) >= 3:
            truth = set(exp.attack.malicious_ids) if exp.attack else set()
            encs = [(u.client_id, "malicious" if u.client_id in truth else "benign", EncoderState(exp.spec, u.params))
                    for u in res.last_updates]
            export_embedding_projection(encs, EncoderState(exp.spec, res.params), exp.eval_plan.test.images[0],
                                        out_dir / "projection.txt", seed=int(cfg["seed"]))
    return ExperimentResult(exp, res, summary)


def set_path(cfg: dict, dotted: str, value) -> dict:
    """Copy of ``cfg`` with one dotted key replaced (the key must already exist)."""
    out = copy.deepcopy(cfg)
    node = out
    keys = dotted.split(".")
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[k]
    if not isinstance(node, dict) or (keys[-1] not in node and tuple(keys[:-1]) not in _OPEN):
        raise ConfigError(f"unknown config key {dotted!r}")
    node[keys[-1]] = value
    return out


__all__ = [
    "DEFAULTS", "ENV_OUTPUT", "ENV_SEED", "Experiment", "ExperimentResult", "FSSLError", "attack_plan", "build",
    "defense_config", "federation_config", "load_config", "malicious_ids", "resolve", "run_experiment",
    "set_path", "summarize", "validate",
]
