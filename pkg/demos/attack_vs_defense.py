"""Undefended vs. EmInspector-defended federation under the same backdoor attack.

Both runs share seed, data partition and attacker ids.  The attack starts at
round 15 of 45; ASR is measured on the global encoder with a kNN monitor.
Expect a minute or two per run on one core.

    python demos/attack_vs_defense.py [seed]
"""

import sys

from fssl_backdoor import preset, resolve, run_experiment

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0


def show(report):
    tag = "attack" if report.attacking else "      "
    flagged = sorted(report.flagged) if report.flagged else ""
    print(f"  round {report.round:2d} {tag} acc {report.acc:6.2f} asr {report.asr:6.2f}  "
          f"attackers {list(report.malicious_selected)} flagged {flagged}")


for name in ("single-pattern-20pct-fedavg", "single-pattern-20pct-eminspector"):
    print(name)
    cfg = resolve(preset(name, seed=seed), env={})
    res = run_experiment(cfg, write=False, on_round=show)
    s = res.summary
    print(f"  last-5-round mean: ACC {s['window_acc']:.2f}  ASR {s['window_asr']:.2f}")
    if s["mean_tpr"] is not None:
        print(f"  detection: TPR {s['mean_tpr']:.2f}  FPR {s['mean_fpr']:.2f}")
    print()
