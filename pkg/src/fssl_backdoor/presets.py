"""Canned desk-scale scenarios, one per experiment family, each crossed with every defense."""

from __future__ import annotations

import copy

from .config import DEFAULTS, _merge
from .defense import DEFENSE_KINDS
from .errors import ConfigError

_MODEL = {"kind": "model_poisoning", "malicious_fraction": 0.2}

FAMILIES: dict[str, dict] = {
    "no-attack": {"attack": {"kind": "none"}},
    "single-pattern-10pct": {"attack": {**_MODEL, "malicious_fraction": 0.1}},
    "single-pattern-20pct": {"attack": dict(_MODEL)},
    "single-pattern-30pct": {"attack": {**_MODEL, "malicious_fraction": 0.3}},
    "single-pattern-40pct": {"attack": {**_MODEL, "malicious_fraction": 0.4}},
    "coordinated-pattern-20pct": {
        "attack": {**_MODEL, "collusion": "coordinated"},
        # two 4x2 halves of the bottom-right 4x4 square
        "data": {"trigger": {"kind": "patches", "patches": [
            {"anchor": [12, 12], "height": 4, "width": 2, "id": "left"},
            {"anchor": [12, 14], "height": 4, "width": 2, "id": "right"},
        ]}},
    },
    "data-poisoning": {"attack": {"kind": "data_poisoning", "malicious_fraction": 0.2, "poison_fraction": 1.0}},
}

# families that only make sense against the proposed defense
SPECIALS: dict[str, dict] = {
    "adaptive-reference": {"attack": {**_MODEL, "reference_mode": "per_client"},
                           "defense": {"kind": "eminspector"}},
    "adaptive-clean-model": {"attack": {**_MODEL, "clean_model_mode": "per_client_finetuned"},
                             "defense": {"kind": "eminspector"}},
    "random-vector-inspection": {"attack": dict(_MODEL), "defense": {"kind": "eminspector"},
                                 "data": {"inspection": {"source": "random-vectors", "count": 20}}},
    "knowledge-adjusted": {"attack": dict(_MODEL),
                           "defense": {"kind": "eminspector",
                                       "params": {"est_malicious_frac": 0.2, "fluctuation": 0.1}}},
}

ALIASES = {"no-attack-baseline": "no-attack-fedavg", "desk": "single-pattern-20pct-fedavg"}


def _deep_update(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("trigger", "inspection", "params"):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _table() -> dict[str, dict]:
    out = {}
    for fam, over in FAMILIES.items():
        for d in DEFENSE_KINDS:
            out[f"{fam}-{d}"] = _deep_update(over, {"defense": {"kind": d}})
    out.update(SPECIALS)
    return out


PRESETS = _table()


def preset_names() -> list[str]:
    return sorted(PRESETS) + sorted(ALIASES)


def preset(name: str, **top) -> dict:
    """Full config for a preset (defaults filled in); ``top`` sets ``seed``/``output_dir``."""
    key = ALIASES.get(name, name)
    if key not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    over = _deep_update(PRESETS[key], {"output_dir": f"runs/{name}"})
    over.update(top)
    return _merge(DEFAULTS, over)
