"""Command line driver.

    fssl-backdoor run <config>
    fssl-backdoor sweep <config> --axis <name> --values <v1,v2,...>
    fssl-backdoor validate <config>
    fssl-backdoor presets list | emit <name>

``<config>`` is a JSON file or ``preset:<name>``.  Exit status is 0 on
success, 2 for configuration errors and 1 for failures during a run.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from .config import load_config, resolve, run_experiment, set_path
from .errors import ConfigError
from .presets import preset, preset_names

SWEEP_AXES = {
    "malicious_fraction": "attack.malicious_fraction",
    "lambda_ratio": None,
    "inspection_size": "data.inspection.count",
    "eta": "attack.eta",
}

SUMMARY_FIELDS = ("value", "final_acc", "final_asr", "window_acc", "window_asr", "mean_fpr", "mean_tpr",
                  "start_round", "gap_relative_error")


def _load(ref: str) -> dict:
    if ref.startswith("preset:"):
        return resolve(preset(ref[len("preset:"):]))
    return load_config(ref)


def _parse_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def apply_axis(cfg: dict, axis: str, value) -> dict:
    """Config with one sweep value applied; ``lambda_ratio`` takes ``a:b``."""
    if axis == "lambda_ratio":
        try:
            a, b = (float(x) for x in str(value).split(":"))
        except ValueError:
            raise ConfigError(f"lambda_ratio values look like '1:2', got {value!r}") from None
        return set_path(set_path(cfg, "attack.lambda1", a), "attack.lambda2", b)
    path = SWEEP_AXES.get(axis, axis)
    if path is None or "." not in path:
        raise ConfigError(f"unknown sweep axis {axis!r}; use one of {', '.join(SWEEP_AXES)} or a dotted key")
    return set_path(cfg, path, value)


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def cmd_run(args) -> int:
    cfg = _load(args.config)
    res = run_experiment(cfg, on_round=None if args.quiet else _progress)
    s = res.summary
    print(f"done: acc={_fmt(s['final_acc'])} asr={_fmt(s['final_asr'])} -> {cfg['output_dir']}")
    return 0


def _progress(rep) -> None:
    asr = "" if rep.asr is None else f" asr={rep.asr:.1f}"
    flagged = ",".join(str(c) for c in sorted(rep.flagged))
    print(f"round {rep.round:3d} acc={rep.acc:.1f}{asr} flagged=[{flagged}]", flush=True)


def cmd_sweep(args) -> int:
    base = _load(args.config)
    values = [_parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    root = Path(base["output_dir"])
    cfgs = []
    for v in values:
        cfg = apply_axis(base, args.axis, v)
        cfg["output_dir"] = str(root / f"{args.axis}={v}")
        cfgs.append(resolve(cfg, env={}))
    rows = []
    for v, cfg in zip(values, cfgs):
        res = run_experiment(cfg)
        rows.append({"value": v, **{k: res.summary.get(k) for k in SUMMARY_FIELDS if k != "value"}})
        print(f"{args.axis}={v}: acc={_fmt(res.summary['final_acc'])} asr={_fmt(res.summary['final_asr'])}", flush=True)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "sweep_summary.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("axis",) + SUMMARY_FIELDS)
        for r in rows:
            w.writerow([args.axis, str(r["value"])] + [_fmt(r[k]) for k in SUMMARY_FIELDS[1:]])
    with open(root / "sweep_summary.json", "w", encoding="utf-8") as fh:
        json.dump({"axis": args.axis, "rows": rows}, fh, indent=2)
    return 0


def cmd_validate(args) -> int:
    cfg = _load(args.config)
    print(f"ok: {args.config} (seed {cfg['seed']}, output {cfg['output_dir']})")
    return 0


def cmd_presets(args) -> int:
    if args.action == "list":
        for name in preset_names():
            print(name)
        return 0
    if not args.name:
        raise ConfigError("presets emit needs a preset name")
    print(json.dumps(preset(args.name), indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fssl-backdoor", description="Federated SSL backdoor attack/defense simulator")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config")
    r.add_argument("--quiet", action="store_true")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("sweep", help="run one experiment per value of an axis")
    s.add_argument("config")
    s.add_argument("--axis", required=True)
    s.add_argument("--values", required=True, help="comma-separated list")
    s.set_defaults(func=cmd_sweep)
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    pr = sub.add_parser("presets", help="list or print canned configs")
    pr.add_argument("action", choices=("list", "emit"))
    pr.add_argument("name", nargs="?")
    pr.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report any run failure as exit 1
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
