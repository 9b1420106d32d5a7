"""Experiment suite: degradation tables, dropout-vs-plain, recovery timing and
scheduled node disconnections.

Every table lands in its own CSV; ``summary.md`` is rendered from those files
alone (see :mod:`ftnet.report`). Runs are deterministic per seed list.
"""

from __future__ import annotations

import subprocess
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__, faults, nn
from . import data as datagen
from .config import DATA_KEYS, TRAIN_KEYS, section
from .exceptions import ConfigError
from .rng import Rng
from .runtime.sim import ClusterConfig, run_simulation
from .runtime.trace import RecoveryRecord, measure_recovery
from .trainer import TrainConfig

SUITES = ("degradation", "dropout_vs_plain", "recovery", "disconnect")
_DISCONNECT_STREAM = 7

# (name, number of kills, layers to draw from, workload multiplier)
DISCONNECT_PLAN = (
    ("exp1", 1, (1,), 1),
    ("exp2", 2, (2,), 1),
    ("exp3", 3, "across", 10),
    ("exp4", 5, None, 1),
    ("exp5", 7, None, 1),
)

RECOVERY_PLAN = (
    ("single_node_t0", ((0, "1:3"),)),
    ("single_node", ((500_000, "1:3"),)),
    ("multiple_nodes", ((500_000, "1:3"), (500_000, "2:5"))),
    ("coordinator", ((500_000, "coord:0"),)),
)

_EXP_KEYS = {
    "seeds": ("seeds", lambda v: tuple(int(s) for s in v.split(",") if s.strip())),
    "trials": ("trials", int),
    "k_max": ("k_max", int),
    "permutations": ("n_permutations", int),
    "factor": ("factor", float),
    "workload": ("workload", int),
    "recovery_workload": ("recovery_workload", int),
    "suites": ("suites", lambda v: tuple(s.strip() for s in v.split(",") if s.strip())),
}


@dataclass
class ExperimentConfig:
    seeds: tuple[int, ...] = (1, 2, 3)
    trials: int = 100
    k_max: int = 7
    n_permutations: int = faults.N_PERMUTATIONS
    factor: float = 2.0
    workload: int = 200
    recovery_workload: int = 100
    suites: tuple[str, ...] = SUITES
    data: datagen.DataGenConfig = field(default_factory=datagen.DataGenConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("the seed list is empty")
        unknown = set(self.suites) - set(SUITES)
        if unknown:
            raise ConfigError(f"unknown suite(s): {', '.join(sorted(unknown))}")
        if self.trials < 1 or self.workload < 2 or self.recovery_workload < 2:
            raise ConfigError("trials must be >= 1 and workloads >= 2")

    @classmethod
    def from_entries(cls, entries: dict[str, str], **overrides) -> "ExperimentConfig":
        kwargs = {}
        for key, value in entries.items():
            if key.startswith("experiment."):
                name = key.split(".", 1)[1]
                if name not in _EXP_KEYS:
                    raise ConfigError(f"unknown config key {key!r}")
                attr, conv = _EXP_KEYS[name]
                try:
                    kwargs[attr] = conv(value)
                except ValueError:
                    raise ConfigError(f"bad value for {key}: {value!r}") from None
        data_kw = {k: v for k, v in section({k: v for k, v in entries.items() if k.startswith("data.")},
                                            "data", DATA_KEYS).items()}
        train_kw = section({k: v for k, v in entries.items() if k.startswith("train.")}, "train", TRAIN_KEYS)
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(data=datagen.DataGenConfig(**data_kw), train=TrainConfig(**train_kw), **kwargs)

    def to_entries(self) -> dict[str, str]:
        out = {
            "experiment.seeds": ",".join(str(s) for s in self.seeds),
            "experiment.trials": str(self.trials),
            "experiment.k_max": str(self.k_max),
            "experiment.permutations": str(self.n_permutations),
            "experiment.factor": repr(self.factor),
            "experiment.workload": str(self.workload),
            "experiment.recovery_workload": str(self.recovery_workload),
            "experiment.suites": ",".join(self.suites),
        }
        for f in fields(self.data):
            out[f"data.{f.name}"] = repr(getattr(self.data, f.name))
        for f in fields(self.train):
            val = getattr(self.train, f.name)
            out[f"train.{f.name}"] = str(int(val)) if isinstance(val, bool) else (val if isinstance(val, str) else repr(val))
        return out


def version_tag() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if res.returncode == 0 and res.stdout.strip():
            return f"{__version__}+g{res.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _workload(testset: datagen.Dataset, n: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n) % len(testset)
    return testset.X[idx], testset.y[idx]


def _pick_disconnect_targets(spec, seed: int, index: int, count: int, layers) -> list[tuple[int, int]]:
    rng = Rng(seed).derive(_DISCONNECT_STREAM, index)
    if layers == "across":
        # one from every hidden layer, the rest uniformly from what is left
        chosen = [sorted(faults.draw_failure_set(spec, 1, rng, (l,)))[0] for l in spec.hidden_layers]
        pool = [u for u in spec.hidden_units if u not in chosen]
        chosen += [pool[i] for i in rng.sample(len(pool), count - len(chosen))]
        return sorted(chosen)
    return sorted(faults.draw_failure_set(spec, count, rng, layers))


def run_disconnect(spec, params, testset, seed: int, base_workload: int, factor: float = 2.0,
                   cluster: ClusterConfig | None = None) -> list[dict]:
    """Kill a scheduled set of hidden nodes halfway through each workload."""
    cluster = cluster or ClusterConfig(spec, trace_frames=False)
    p32 = params.astype(np.float32)
    rows = []
    for i, (name, count, layers, mult) in enumerate(DISCONNECT_PLAN, start=1):
        n = base_workload * mult
        X, y = _workload(testset, n)
        targets = _pick_disconnect_targets(spec, seed, i, count, layers)
        half = n // 2
        kill_us = cluster.start_us + half * cluster.request_interval_us
        res = run_simulation(cluster, params, X, [(kill_us, t) for t in targets], seed=seed)
        post = np.arange(half, n)
        pred = res.prediction_array()[post, 0]
        answered = ~np.isnan(pred)
        ref = nn.forward(spec, p32, X[post].astype(np.float32)).output.reshape(-1).astype(np.float64)
        yt = np.asarray(y[post], dtype=np.float64)
        mse_ref = float(np.mean((ref[answered] - yt[answered]) ** 2)) if answered.any() else float("nan")
        mse_post = float(np.mean((pred[answered] - yt[answered]) ** 2)) if answered.any() else float("nan")
        inflation = 100.0 * (mse_post - mse_ref) / mse_ref
        rows.append({
            "experiment": name,
            "killed": " ".join(f"{l}:{k}" for l, k in targets),
            "kill_time_us": kill_us,
            "inputs": n,
            "post_kill_inputs": len(post),
            "answered": int(sum(p is not None for p in res.predictions)),
            "failure_markers": int(sum(p is None for p in res.predictions)) - len(res.unanswered),
            "unanswered": len(res.unanswered),
            "mse_nofault": mse_ref,
            "mse_post": mse_post,
            "inflation_pct": inflation,
            "exceeds_factor": int(mse_post > factor * mse_ref),
        })
    return rows


def run_recovery(spec, params, testset, seed: int, n: int, cluster: ClusterConfig | None = None
                 ) -> list[tuple[str, RecoveryRecord]]:
    cluster = cluster or ClusterConfig(spec, trace_frames=False)
    X, _ = _workload(testset, n)
    out = []
    timing = cluster.timing
    for name, schedule in RECOVERY_PLAN:
        # run past the last fault even when the workload ends first, so every kill is injected and judged
        until = max(t for t, _ in schedule) + timing.handover_timeout_us + timing.inference_deadline_us
        res = run_simulation(cluster, params, X, schedule, seed=seed, until_us=until)
        for rec in measure_recovery(res.trace):
            out.append((name, rec))
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_table(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)] + [",".join(_fmt(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def run_suite(config: ExperimentConfig, out_dir, render: bool = True) -> dict[str, Path]:
    """Run the selected suites and write their CSVs (plus ``summary.md``) to ``out_dir``."""
    from .config import dump_kv
    from .report import render_report

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    spec = nn.REFERENCE_SPEC
    train_set, test_set = datagen.generate(config.data)
    k_table = list(range(config.k_max + 1))
    written: dict[str, Path] = {}

    needs_training = set(config.suites)
    models: dict[int, nn.Parameters] = {}
    if needs_training & {"degradation", "dropout_vs_plain"}:
        deg_rows, pair_rows, thr_rows = [], [], []
        for seed in config.seeds:
            rep = faults.compare_dropout_vs_plain(
                train_set, test_set, spec, replace(config.train, seed=seed), k_table, config.trials,
                rng=seed, factor=config.factor, n_permutations=config.n_permutations,
            )
            models[seed] = rep.dropout_params
            for r in rep.dropout_rows:
                deg_rows.append([seed, r.k, r.mean_mse, r.degradation_pct, r.std_mse, r.trials, r.p_value])
            for d, p in rep.pairs():
                pair_rows.append([seed, d.k, d.mean_mse, d.degradation_pct, p.mean_mse, p.degradation_pct])
            for variant, rows, thr in (("dropout", rep.dropout_rows, rep.dropout_threshold),
                                       ("plain", rep.plain_rows, rep.plain_threshold)):
                thr_rows.append([seed, variant, rows[0].mean_mse, thr.p_c,
                                 "" if thr.k_cross is None else thr.k_cross, int(thr.censored)])
        if "degradation" in config.suites:
            written["degradation"] = out / "degradation.csv"
            _write_table(written["degradation"], ["seed"] + faults.DegradationRow.CSV_HEADER.split(","), deg_rows)
        if "dropout_vs_plain" in config.suites:
            written["dropout_vs_plain"] = out / "dropout_vs_plain.csv"
            _write_table(written["dropout_vs_plain"],
                         ["seed", "k", "dropout_mse", "dropout_pct", "plain_mse", "plain_pct"], pair_rows)
            written["thresholds"] = out / "thresholds.csv"
            _write_table(written["thresholds"], ["seed", "variant", "baseline_mse", "p_c", "k_cross", "censored"],
                         thr_rows)

    seed0 = config.seeds[0]
    if needs_training & {"recovery", "disconnect"} and seed0 not in models:
        from .trainer import train

        models[seed0], _ = train(train_set, spec, replace(config.train, seed=seed0))
    if "recovery" in config.suites:
        recs = run_recovery(spec, models[seed0], test_set, seed0, config.recovery_workload)
        written["recovery"] = out / "recovery.csv"
        written["recovery"].write_text(
            "scenario," + RecoveryRecord.CSV_HEADER + "\n" + "".join(f"{name},{r.csv_line()}\n" for name, r in recs))
    if "disconnect" in config.suites:
        rows = run_disconnect(spec, models[seed0], test_set, seed0, config.workload, config.factor)
        written["disconnect"] = out / "disconnect.csv"
        _write_table(written["disconnect"], list(rows[0]), [list(r.values()) for r in rows])

    entries = config.to_entries()
    entries["meta.version"] = version_tag()
    written["config"] = out / "experiment.cfg"
    written["config"].write_text(dump_kv(entries))
    if render:
        written["summary"] = out / "summary.md"
        written["summary"].write_text(render_report(out))
    return written
