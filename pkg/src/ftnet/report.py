"""Render experiment CSVs into a markdown summary.

The output depends only on the files in the directory, so rendering twice
gives the same bytes. Numbers are copied from CSV cells, rounded for display.
"""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

from .config import parse_kv_file

# reference values the suite is compared against, shown next to measurements
TARGETS = {
    "degradation": "k=1 small (+4.2%), k=7 large (+180.3%)",
    "p_c_dropout": "0.15-0.20 (accepted band 0.10-0.35)",
    "p_c_plain": "~0.05",
    "k5": "dropout +49%, plain +437%",
    "detection": "50 ms",
    "handover": "200 ms",
    "disconnect": {"exp1": "+5%", "exp2": "+12%", "exp3": "+20%", "exp4": "+45%", "exp5": "critical"},
}


def _read(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _num(text: str, digits: int = 4) -> str:
    if text == "":
        return "-"
    try:
        return f"{float(text):.{digits}g}"
    except ValueError:
        return text


def _pct(text: str) -> str:
    return "-" if text == "" else f"{float(text):+.1f}%"


def _ms(text: str) -> str:
    return "-" if text == "" else f"{int(text) / 1000:.3f}"


def _table(header: list[str], rows: list[list[str]]) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join(r) + " |" for r in rows]
    return out


def render_report(directory) -> str:
    d = Path(directory)
    lines = ["# Experiment report", ""]
    cfg_path = d / "experiment.cfg"
    entries = parse_kv_file(cfg_path) if cfg_path.exists() else {}
    if "meta.version" in entries:
        lines += [f"Version: `{entries['meta.version']}`", ""]

    if (d / "degradation.csv").exists():
        rows = _read(d / "degradation.csv")
        lines += ["## Degradation under random hidden-neuron failures", "",
                  "Source: `degradation.csv`. Failure sets drawn uniformly over both hidden layers. "
                  f"Target shape: {TARGETS['degradation']}.", ""]
        by_seed = defaultdict(list)
        for r in rows:
            by_seed[r["seed"]].append(r)
        for seed, group in by_seed.items():
            lines += [f"Seed {seed}:", ""]
            lines += _table(["k", "mean MSE", "vs baseline", "std", "trials", "p-value"],
                            [[r["k"], _num(r["mean_mse"]), _pct(r["degradation_pct"]), _num(r["std"]),
                              r["trials"], _num(r["p_value"])] for r in group])
            lines.append("")

    if (d / "dropout_vs_plain.csv").exists():
        rows = _read(d / "dropout_vs_plain.csv")
        lines += ["## Dropout versus plain training", "",
                  f"Source: `dropout_vs_plain.csv`. Target at k=5: {TARGETS['k5']}.", ""]
        lines += _table(["seed", "k", "dropout MSE", "dropout vs baseline", "plain MSE", "plain vs baseline"],
                        [[r["seed"], r["k"], _num(r["dropout_mse"]), _pct(r["dropout_pct"]), _num(r["plain_mse"]),
                          _pct(r["plain_pct"])] for r in rows])
        lines.append("")
    if (d / "thresholds.csv").exists():
        rows = _read(d / "thresholds.csv")
        factor = entries.get("experiment.factor", "2.0")
        lines += [f"Critical failure fraction p_c (mean MSE above {_num(factor)}x baseline), source `thresholds.csv`. "
                  f"Targets: dropout {TARGETS['p_c_dropout']}, plain {TARGETS['p_c_plain']}.", ""]
        lines += _table(["seed", "variant", "baseline MSE", "p_c", "crossing k", "censored"],
                        [[r["seed"], r["variant"], _num(r["baseline_mse"]), _num(r["p_c"]), _num(r["k_cross"]),
                          "yes" if r["censored"] == "1" else "no"] for r in rows])
        lines.append("")

    if (d / "recovery.csv").exists():
        rows = _read(d / "recovery.csv")
        lines += ["## Failure detection and recovery (simulated time)", "",
                  f"Source: `recovery.csv`. Budgets: node detection {TARGETS['detection']}, "
                  f"coordinator handover {TARGETS['handover']}. Times in ms.", ""]
        lines += _table(["scenario", "target", "injected", "detection", "stabilization", "total", "silence",
                         "censored"],
                        [[r["scenario"], r["target"], _ms(r["injected_us"]), _ms(r["detection_us"]),
                          _ms(r["stabilization_us"]), _ms(r["total_us"]), _ms(r["silence_us"]),
                          "yes" if r["censored"] == "1" else "no"] for r in rows])
        lines.append("")

    if (d / "disconnect.csv").exists():
        rows = _read(d / "disconnect.csv")
        lines += ["## Scheduled node disconnections", "",
                  "Source: `disconnect.csv`. Nodes are killed halfway through the workload; MSE is taken over "
                  "inputs requested after the kill and compared with the fault-free network on the same inputs.", ""]
        lines += _table(["experiment", "killed", "inputs", "answered", "failure markers", "unanswered",
                         "fault-free MSE", "post-kill MSE", "inflation", "target", "over factor"],
                        [[r["experiment"], r["killed"], r["inputs"], r["answered"], r["failure_markers"],
                          r["unanswered"], _num(r["mse_nofault"]), _num(r["mse_post"]), _pct(r["inflation_pct"]),
                          TARGETS["disconnect"].get(r["experiment"], "-"),
                          "yes" if r["exceeds_factor"] == "1" else "no"] for r in rows])
        lines.append("")

    if entries:
        lines += ["## Effective configuration", "",
                  "Rerun with `ftnet experiment --config experiment.cfg` to reproduce these files.", "", "```"]
        lines += [f"{k}={v}" for k, v in entries.items()]
        lines += ["```", ""]
    return "\n".join(lines)
