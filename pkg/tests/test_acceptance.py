"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The lines are printed in the terminal summary (section "acceptance criteria")
and also written to stdout when the test runs with ``-s``. Tolerances below
are fixed and not tuned to the measured values.
"""

import random
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from ftnet import faults, nn, wire
from ftnet.cli import main
from ftnet.experiments import run_recovery
from ftnet.rng import Rng
from ftnet.runtime.sim import ClusterConfig, run_simulation
from ftnet.trainer import AdamState, TrainConfig, adam_step
from oracles import adam_hand, crc32_bitwise, finite_difference
from socket_helpers import count_exact, make_bundle, run_exact, run_sigkill

SPEC = nn.REFERENCE_SPEC
SEEDS = (1, 2, 3)
K_TABLE = list(range(8))

# reference figures reported alongside the measurements
REF_P_C = {"dropout": "0.15-0.20", "plain": "~0.05"}
REF_K5 = {"dropout": 49.0, "plain": 437.0}


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (title, bool(ok), detail)
    print(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
    assert ok, detail


# 1 -------------------------------------------------------------------------

def test_criterion_01_gradient_check():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(1, 6):
        p = nn.init_params(SPEC, rng=seed)
        r = Rng(seed).derive(5)
        for b in p.biases:
            b[:] = r.normal(b.shape, scale=0.1)
        X, y = r.uniform(-1, 1, (8, 10)), r.normal(8)
        g = nn.backward(SPEC, p, X, y)
        fd = finite_difference(lambda: nn.loss("mse", nn.forward(SPEC, p, X).output[:, 0], y),
                               [*p.weights, *p.biases], h=1e-5)
        for a, f in zip([*g.weights, *g.biases], fd):
            rel = np.abs(a - f) / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)
            worst = max(worst, float(rel.max()))
    elapsed = time.perf_counter() - t0
    verdict(1, "gradient vs central differences", worst < 1e-6 and elapsed < 10,
            f"max rel err {worst:.2e} (< 1e-6) over 5 seeds, {elapsed:.1f} s (< 10 s)")


# 2 -------------------------------------------------------------------------

def test_criterion_02_adam_recurrence():
    cfg = TrainConfig()
    p = nn.Parameters([np.array([[0.0]])], [np.array([0.0])])
    st = AdamState.zeros_like(p)
    worst = 0.0
    for want in adam_hand(1.0, 3):
        before = p.weights[0][0, 0]
        p, st = adam_step(p, nn.Parameters([np.array([[1.0]])], [np.array([1.0])]), st, cfg)
        worst = max(worst, abs((p.weights[0][0, 0] - before) - want))
    step1 = 0.0
    for g in (1.0, -1.0, 3.5, 100.0, -1e4, 1e8):
        p1, _ = adam_step(nn.Parameters([np.array([[0.0]])], [np.array([0.0])]),
                          nn.Parameters([np.array([[g]])], [np.array([g])]),
                          AdamState.zeros_like(p), cfg)
        step1 = max(step1, abs(abs(p1.weights[0][0, 0]) - cfg.eta) / cfg.eta)
    verdict(2, "Adam recurrence", worst < 1e-12 and step1 < 1e-3,
            f"3-step max |diff| {worst:.1e} (< 1e-12); step-1 |update| off eta by {100 * step1:.4f}% (< 0.1%)")


# 3 and 4 share the trained twins ------------------------------------------

@pytest.fixture(scope="session")
def comparisons(reference_data):
    train_set, test_set = reference_data
    t0 = time.perf_counter()
    reports = {seed: faults.compare_dropout_vs_plain(train_set, test_set, SPEC, TrainConfig(seed=seed), K_TABLE,
                                                     trials=100, rng=seed)
               for seed in SEEDS}
    return reports, time.perf_counter() - t0


def test_criterion_03_degradation_ordering(comparisons):
    reports, elapsed = comparisons
    ok = elapsed < 600
    parts = []
    for seed, rep in reports.items():
        rows = rep.dropout_rows
        finite = all(np.isfinite(r.mean_mse) for r in rows)
        graceful = faults.is_graceful(rows)
        base = rows[0].mean_mse
        r1, r7 = rows[1].mean_mse / base, rows[7].mean_mse / base
        factor = r7 / r1
        ok &= finite and graceful and factor >= 2
        parts.append(f"seed {seed}: ratio(1)={r1:.3f} ratio(7)={r7:.3f} factor={factor:.2f} "
                     f"deg +{rows[1].degradation_pct:.1f}% -> +{rows[7].degradation_pct:.1f}% "
                     f"monotone={'yes' if graceful else 'no'}")
    verdict(3, "degradation ordering (k=0..7, 100 trials)", ok,
            "; ".join(parts) + f"; need factor >= 2; {elapsed:.0f} s (< 600 s)")


def test_criterion_04_dropout_vs_plain(comparisons):
    reports, _ = comparisons
    ok = True
    parts = []
    pcs_d, pcs_p = [], []
    for seed, rep in reports.items():
        d = {r.k: r for r in rep.dropout_rows}
        p = {r.k: r for r in rep.plain_rows}
        ordered = all(p[k].degradation_pct > d[k].degradation_pct for k in (3, 5))
        pc_d, pc_p = rep.dropout_threshold.p_c, rep.plain_threshold.p_c
        pcs_d.append(pc_d)
        pcs_p.append(pc_p)
        ok &= ordered and pc_d > pc_p and 0.10 <= pc_d <= 0.35
        parts.append(f"seed {seed}: k=5 dropout +{d[5].degradation_pct:.0f}% vs plain +{p[5].degradation_pct:.0f}% "
                     f"(ref +{REF_K5['dropout']:.0f}% vs +{REF_K5['plain']:.0f}%), "
                     f"p_c dropout {pc_d:.3f} vs plain {pc_p:.4f}")
    verdict(4, "dropout vs plain", ok,
            "; ".join(parts) + f"; mean p_c dropout {np.mean(pcs_d):.3f} (band 0.10-0.35, ref {REF_P_C['dropout']}), "
            f"plain {np.mean(pcs_p):.4f} (ref {REF_P_C['plain']})")


# 5 -------------------------------------------------------------------------

def test_criterion_05_oracle_equivalence():
    t0 = time.perf_counter()
    rng = Rng(2024)
    cluster = ClusterConfig(SPEC, trace_frames=False)
    mismatches = 0
    for case in range(100):
        params = nn.init_params(SPEC, rng=rng.derive(case, 0))
        for b in params.biases:
            b[:] = rng.normal(b.shape, scale=0.2)
        x = rng.uniform(-1, 1, (1, 10)).astype(np.float32)
        k = rng.integers(8)
        failed = {SPEC.hidden_units[i] for i in rng.sample(20, k)}
        res = run_simulation(cluster, params, x, [(0, u) for u in failed], seed=case)
        got = np.float32(res.predictions[0][0]) if res.predictions[0] is not None else None
        want = faults.predictions(SPEC, params.astype(np.float32), x, failed)[0, 0]
        mismatches += got is None or got != want
    elapsed = time.perf_counter() - t0
    verdict(5, "simulated cluster == fault model (float32, bitwise)", mismatches == 0 and elapsed < 60,
            f"{100 - mismatches}/100 exact, {elapsed:.1f} s (< 60 s)")


# 6 -------------------------------------------------------------------------

def test_criterion_06_detection_and_recovery(reference_data):
    _, test = reference_data
    params = nn.init_params(SPEC, rng=6)
    records = run_recovery(SPEC, params, test, seed=1, n=100)
    node = [(name, r) for name, r in records if r.kind == "node"]
    coord = [(name, r) for name, r in records if r.kind == "coordinator"]
    complete = all(not r.censored and None not in (r.detection_us, r.stabilization_us, r.total_us)
                   for _, r in records)
    t0_exact = all(r.detection_us == 50_000 for name, r in node if name == "single_node_t0")
    node_ok = all(abs(r.detection_us - 50_000) < 25_000 for _, r in node)
    coord_ok = len(coord) == 1 and coord[0][1].silence_us == 200_000 and coord[0][1].detection_us <= 200_000
    detail = ", ".join(f"{name}[{r.target}] det {r.detection_us / 1000:.1f} ms stab "
                       f"{'-' if r.stabilization_us is None else f'{r.stabilization_us / 1000:.1f}'} ms"
                       for name, r in records)
    verdict(6, "failure detection and recovery (simulated time)",
            complete and t0_exact and node_ok and coord_ok and len(records) == 5,
            detail + f"; coordinator silence {coord[0][1].silence_us / 1000:.0f} ms (budget 200 ms)")


# 7 -------------------------------------------------------------------------

def test_criterion_07_liveness_campaign():
    t0 = time.perf_counter()
    params = nn.init_params(SPEC, rng=7)
    cluster = ClusterConfig(SPEC, trace_frames=False)
    X = np.random.default_rng(7).uniform(-1, 1, (10, 10)).astype(np.float32)
    hangs = aborts = markers = 0
    for i in range(1000):
        rng = Rng(10_000 + i)
        k = 1 + rng.integers(7)
        units = [SPEC.hidden_units[j] for j in rng.sample(20, k)]
        sched = [(rng.integers(150_000), u) for u in units]
        if rng.random() < 0.2:
            sched.append((rng.integers(150_000), "coord:0"))
        try:
            res = run_simulation(cluster, params, X, sched, seed=i)
        except Exception:  # noqa: BLE001 - any abort counts against liveness
            aborts += 1
            continue
        hangs += len(res.unanswered)
        markers += sum(p is None for p in res.predictions)
    elapsed = time.perf_counter() - t0
    verdict(7, "liveness under 1000 random fault schedules", hangs == 0 and aborts == 0,
            f"unanswered {hangs}, aborts {aborts}, explicit failure markers {markers}, {elapsed:.0f} s")


# 8 -------------------------------------------------------------------------

def _random_frame(r: random.Random) -> wire.Frame:
    f32 = lambda: float(np.float32(r.uniform(-1e6, 1e6)))  # noqa: E731
    kind = r.randrange(8)
    if kind < 4 and kind != 2:
        cls = (wire.WeightChunk, wire.InputVector, None, wire.Result)[kind]
        body = cls(tuple(f32() for _ in range(r.randrange(57))))
    elif kind == 2:
        body = wire.Activation(f32())
    elif kind == 4:
        body = wire.Heartbeat(r.randrange(3), r.randrange(2**32))
    elif kind == 5:
        body = wire.FaultInject(r.randrange(256), r.randrange(256))
    elif kind == 6:
        body = wire.Ack()
    else:
        body = wire.Roster(tuple(r.randrange(256) for _ in range(r.randrange(6))),
                           tuple((r.randrange(256), r.randrange(256)) for _ in range(r.randrange(100))))
    return wire.Frame(body, r.randrange(2**32), r.randrange(256), r.randrange(256), r.randrange(65536),
                      r.randrange(256))


def test_criterion_08_wire_codec():
    r = random.Random(8)
    # half pure noise, half mutated valid frames so deeper decode paths are reached
    valid = [wire.encode_frame(_random_frame(r)) for _ in range(2000)]
    aborts = classified = decoded = 0
    for i in range(1_000_000):
        if i % 2:
            blob = r.randbytes(r.randrange(260))
        else:
            b = bytearray(valid[i % len(valid)])
            for _ in range(1 + r.randrange(3)):
                op = r.randrange(3)
                if op == 0 and b:
                    b[r.randrange(len(b))] = r.randrange(256)
                elif op == 1 and b:
                    del b[r.randrange(len(b)):]
                else:
                    b += r.randbytes(r.randrange(4))
            blob = bytes(b)
        try:
            wire.decode_frame(blob)
            decoded += 1
        except wire.FrameError:
            classified += 1
        except Exception:  # noqa: BLE001
            aborts += 1
    roundtrip_bad = 0
    for _ in range(5000):
        f = _random_frame(r)
        data = wire.encode_frame(f)
        roundtrip_bad += wire.decode_frame(data) != f or len(data) != 19 + len(f.body.payload()) or len(data) > 250
    partition_bad = 0
    for fan_in in range(1, 2001):
        n = wire.NeuronParams(1, 0, np.float32(np.arange(fan_in) * 0.5 - 3), np.float32(fan_in), "relu")
        chunks = wire.chunk_weight_load(n)
        joined = b"".join(c.body.payload() for c in chunks)
        partition_bad += joined != np.concatenate([[n.bias], n.weights]).astype("<f4").tobytes()
        partition_bad += not wire.reassemble(reversed(chunks)).equal(n)
    ex = wire.encode_frame(wire.Frame(wire.Activation(1.0), inference_id=7, layer=1, neuron=3))
    example_ok = (len(ex) == 23 and ex[:19] == bytes.fromhex("4e43010300070000000103000004000000803f")
                  and int.from_bytes(ex[19:], "little") == crc32_bitwise(ex[:19]))
    verdict(8, "wire codec", aborts == 0 and roundtrip_bad == 0 and partition_bad == 0 and example_ok,
            f"1e6 fuzzed decodes: {aborts} aborts, {classified} rejected, {decoded} accepted; "
            f"5000 roundtrips bad {roundtrip_bad}; fan_in 1..2000 partition bad {partition_bad}; "
            f"23-byte example {'ok' if example_ok else 'wrong'}")


# 9 -------------------------------------------------------------------------

def test_criterion_09_socket_cluster(tmp_path):
    bundle, p32 = make_bundle(tmp_path)
    X = np.random.default_rng(9).uniform(-1, 1, (100, 10)).astype(np.float32)
    preds, oracle = run_exact(bundle, p32, X, tmp_path / "exact")
    exact = count_exact(preds, oracle)
    detection, kill_preds = run_sigkill(bundle, X, tmp_path / "kill")
    budget = 50_000
    det_ok = detection is not None and 0 < detection < 2 * budget
    verdict(9, "socket-mode loopback cluster", exact == 100 and det_ok,
            f"{exact}/100 oracle-exact; SIGKILL of 1:3 detected in "
            f"{'never' if detection is None else f'{detection / 1000:.1f} ms'} (< {2 * budget / 1000:.0f} ms)")


# 10 ------------------------------------------------------------------------

def test_criterion_10_experiment_determinism(tmp_path):
    names = ("degradation.csv", "dropout_vs_plain.csv", "thresholds.csv", "recovery.csv", "disconnect.csv")
    t0 = time.perf_counter()
    for run in ("a", "b"):
        assert main(["experiment", "--out", str(tmp_path / run)]) == 0
    elapsed = time.perf_counter() - t0
    differing = [n for n in names if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    verdict(10, "experiment rerun is byte-identical", not differing,
            f"{len(names) - len(differing)}/{len(names)} CSVs identical over two default runs ({elapsed:.0f} s)"
            + (f"; differing: {', '.join(differing)}" if differing else ""))
