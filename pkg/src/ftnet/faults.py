"""Failure analysis on the centralised model.

A failed neuron is modelled by forcing its activation to zero. This module
evaluates a trained network under such failure sets, sweeps the number of
failed hidden neurons, estimates the critical failure fraction and compares
dropout-trained against plain networks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nn
from .rng import Rng, as_rng
from .trainer import TrainConfig, train

N_PERMUTATIONS = 10_000
_SET_STREAM = 1
_PERM_STREAM = 2


@dataclass
class DegradationRow:
    k: int
    mean_mse: float
    degradation_pct: float
    std_mse: float
    trials: int
    p_value: float

    CSV_HEADER = "k,mean_mse,degradation_pct,std,trials,p_value"

    def csv_line(self) -> str:
        return f"{self.k},{self.mean_mse!r},{self.degradation_pct!r},{self.std_mse!r},{self.trials},{self.p_value!r}"


@dataclass
class ThresholdEstimate:
    p_c: float
    criterion: str
    censored: bool
    k_cross: float | None = None


def rows_to_csv(rows: Sequence[DegradationRow]) -> str:
    return "\n".join([DegradationRow.CSV_HEADER] + [r.csv_line() for r in rows]) + "\n"


def predictions(spec, params, X, failure_set=()) -> np.ndarray:
    return nn.forward(spec, params, X, failure_set).output


def squared_errors(spec, params, dataset, failure_set=()) -> np.ndarray:
    pred = predictions(spec, params, dataset.X, failure_set).astype(np.float64)
    y = np.asarray(dataset.y, dtype=np.float64).reshape(pred.shape)
    err = (y - pred) ** 2
    return err.mean(axis=1) if err.ndim == 2 else err


def evaluate(spec, params, dataset, failure_set=()) -> float:
    """Test-set MSE with every neuron in ``failure_set`` silenced."""
    return float(np.mean(squared_errors(spec, params, dataset, failure_set)))


def significance_test(baseline_errors, failed_errors, rng=None, n_permutations: int = N_PERMUTATIONS) -> float:
    """Two-sided permutation test on the difference of means.

    Returns ``(1 + #{|perm diff| >= |observed diff|}) / (1 + n_permutations)``,
    or exactly 1 when the pooled sample is constant.
    """
    a = np.asarray(baseline_errors, dtype=np.float64).ravel()
    b = np.asarray(failed_errors, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    if np.all(pooled == pooled[0]):
        return 1.0
    rng = as_rng(rng)
    observed = abs(a.mean() - b.mean())
    # tolerance absorbs summation-order noise when a permutation reproduces the observed split
    tol = 1e-12 * max(1.0, observed)
    na = a.size
    hits = 0
    chunk = max(1, min(n_permutations, 4_000_000 // pooled.size))
    done = 0
    while done < n_permutations:
        rows = min(chunk, n_permutations - done)
        perms = rng.permutations(pooled.size, rows)
        shuffled = pooled[perms]
        diff = np.abs(shuffled[:, :na].mean(axis=1) - shuffled[:, na:].mean(axis=1))
        hits += int(np.count_nonzero(diff >= observed - tol))
        done += rows
    return (hits + 1) / (n_permutations + 1)


def draw_failure_set(spec, k: int, rng: Rng, layers: Sequence[int] | None = None) -> frozenset:
    """Uniform random set of ``k`` hidden neurons, optionally from given layers only."""
    pool = [u for u in spec.hidden_units if layers is None or u[0] in layers]
    if k > len(pool):
        raise ValueError(f"cannot fail {k} neurons out of {len(pool)}")
    return frozenset(pool[i] for i in rng.sample(len(pool), k))


def degradation_sweep(spec, params, testset, k_values: Sequence[int], trials: int = 100, rng=None,
                      layers: Sequence[int] | None = None,
                      n_permutations: int = N_PERMUTATIONS) -> list[DegradationRow]:
    if trials < 1:
        raise ValueError("trials must be at least 1")
    rng = as_rng(rng)
    population = sum(1 for u in spec.hidden_units if layers is None or u[0] in layers)
    for k in k_values:
        if not 0 <= k <= population:
            raise ValueError(f"k={k} exceeds the {population} hidden neurons available")

    base_err = squared_errors(spec, params, testset)
    baseline = float(base_err.mean())
    rows = []
    for k in k_values:
        if k == 0:
            rows.append(DegradationRow(0, baseline, 0.0, 0.0, trials, 1.0))
            continue
        set_rng = rng.derive(_SET_STREAM, k)
        mses = np.empty(trials)
        per_sample = np.zeros_like(base_err)
        for t in range(trials):
            err = squared_errors(spec, params, testset, draw_failure_set(spec, k, set_rng, layers))
            mses[t] = err.mean()
            per_sample += err
        per_sample /= trials
        p = significance_test(base_err, per_sample, rng.derive(_PERM_STREAM, k), n_permutations)
        mean = float(mses.mean())
        std = float(mses.std(ddof=1)) if trials > 1 else 0.0
        rows.append(DegradationRow(k, mean, 100.0 * (mean - baseline) / baseline, std, trials, p))
    return rows


def is_graceful(rows: Sequence[DegradationRow]) -> bool:
    """Mean MSE never drops by more than one pooled standard error as k grows."""
    rows = sorted(rows, key=lambda r: r.k)
    for prev, cur in zip(rows, rows[1:]):
        if not (math.isfinite(prev.mean_mse) and math.isfinite(cur.mean_mse)):
            return False
        se = math.sqrt(prev.std_mse ** 2 / prev.trials + cur.std_mse ** 2 / cur.trials)
        if cur.mean_mse < prev.mean_mse - se:
            return False
    return True


def estimate_critical_threshold(rows: Sequence[DegradationRow], factor: float = 2.0,
                                hidden_total: int = 20) -> ThresholdEstimate:
    """Failure fraction at which mean MSE first exceeds ``factor`` x baseline.

    The crossing is linearly interpolated between the last acceptable k and
    the first unacceptable one. If no tested k crosses, the estimate is
    censored at the largest tested fraction.
    """
    if not rows:
        raise ValueError("no degradation rows")
    rows = sorted(rows, key=lambda r: r.k)
    if rows[0].k != 0:
        raise ValueError("rows must include the k = 0 baseline")
    limit = factor * rows[0].mean_mse
    criterion = f"mean_mse <= {factor:g} x baseline"
    for prev, cur in zip(rows, rows[1:]):
        if cur.mean_mse > limit:
            frac = (limit - prev.mean_mse) / (cur.mean_mse - prev.mean_mse)
            k_cross = prev.k + frac * (cur.k - prev.k)
            return ThresholdEstimate(k_cross / hidden_total, criterion, False, k_cross)
    return ThresholdEstimate(rows[-1].k / hidden_total, criterion, True, None)


def single_failure_effects(spec, params, dataset) -> dict[tuple[int, int], dict[str, float]]:
    """Max absolute output change and MSE ratio for every single hidden failure."""
    base_pred = predictions(spec, params, dataset.X).astype(np.float64)
    base = evaluate(spec, params, dataset)
    out = {}
    for unit in spec.hidden_units:
        pred = predictions(spec, params, dataset.X, {unit}).astype(np.float64)
        out[unit] = {
            "max_abs_change": float(np.max(np.abs(pred - base_pred))),
            "mse_ratio": evaluate(spec, params, dataset, {unit}) / base,
        }
    return out


@dataclass
class ComparisonReport:
    dropout_rows: list[DegradationRow]
    plain_rows: list[DegradationRow]
    dropout_threshold: ThresholdEstimate
    plain_threshold: ThresholdEstimate
    dropout_params: nn.Parameters = field(repr=False)
    plain_params: nn.Parameters = field(repr=False)

    @property
    def baselines(self) -> tuple[float, float]:
        return self.dropout_rows[0].mean_mse, self.plain_rows[0].mean_mse

    def pairs(self):
        plain = {r.k: r for r in self.plain_rows}
        return [(r, plain[r.k]) for r in self.dropout_rows if r.k in plain]

    def to_csv(self) -> str:
        lines = ["k,dropout_mse,dropout_pct,plain_mse,plain_pct"]
        for d, p in self.pairs():
            lines.append(f"{d.k},{d.mean_mse!r},{d.degradation_pct!r},{p.mean_mse!r},{p.degradation_pct!r}")
        lines.append(f"p_c,{self.dropout_threshold.p_c!r},{int(self.dropout_threshold.censored)},"
                     f"{self.plain_threshold.p_c!r},{int(self.plain_threshold.censored)}")
        return "\n".join(lines) + "\n"


def compare_dropout_vs_plain(train_set, test_set, spec, config: TrainConfig, k_values: Sequence[int],
                             trials: int = 100, rng=None, factor: float = 2.0,
                             threshold_k_values: Sequence[int] | None = None,
                             n_permutations: int = N_PERMUTATIONS) -> ComparisonReport:
    """Train twin networks differing only in dropout and sweep both.

    ``threshold_k_values`` (default: every k from 0 to the hidden count) feeds
    the critical-threshold estimate so it is not censored by a short table.
    """
    from dataclasses import replace

    seed_rng = as_rng(rng if rng is not None else config.seed)
    results = {}
    for flag in (True, False):
        params, _ = train(train_set, spec, replace(config, dropout=flag))
        ks = sorted(set(k_values) | set(threshold_k_values or range(spec.n_hidden + 1)) | {0})
        rows = degradation_sweep(spec, params, test_set, ks, trials, seed_rng, n_permutations=n_permutations)
        results[flag] = (params, rows)

    def table(rows):
        return [r for r in rows if r.k in set(k_values) | {0}]

    thresholds = {flag: estimate_critical_threshold(rows, factor, spec.n_hidden) for flag, (_, rows) in results.items()}
    return ComparisonReport(
        table(results[True][1]), table(results[False][1]),
        thresholds[True], thresholds[False],
        results[True][0], results[False][0],
    )


def write_rows(rows: Sequence[DegradationRow], path) -> None:
    Path(path).write_text(rows_to_csv(rows))
