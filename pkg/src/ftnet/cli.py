"""Command-line front end: ``ftnet <subcommand> [--seed N] [--config FILE] [--out DIR] ...``.

Heavy modules are imported inside each handler so that socket-mode node
processes start quickly.
"""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

from .exceptions import ConfigError, DataFormatError, FtnetError

log = logging.getLogger("ftnet")

_TIME_RE = re.compile(r"^t?(\d+(?:\.\d+)?)(us|ms|s)?$")
_UNITS = {"us": 1, "ms": 1000, "s": 1_000_000}


class UsageError(FtnetError):
    """Bad arguments or missing inputs; exit status 2."""


def parse_time_us(text: str) -> int:
    m = _TIME_RE.match(text.strip())
    if not m or (m.group(2) is None and float(m.group(1)) != 0):
        raise UsageError(f"bad time {text!r}; use t0, 250ms, 1200us or 1.5s")
    return int(round(float(m.group(1)) * _UNITS[m.group(2) or "us"]))


def parse_faults(text: str) -> list[tuple[int, str]]:
    """``none`` or comma-separated ``kill:L:N@TIME`` / ``kill:coord:I@TIME`` items."""
    if text.strip() in ("", "none"):
        return []
    out = []
    for item in text.split(","):
        what, sep, when = item.strip().partition("@")
        parts = what.split(":")
        if not sep or len(parts) != 3 or parts[0] != "kill":
            raise UsageError(f"bad fault {item!r}; expected kill:LAYER:NEURON@TIME")
        if parts[1] == "coord":
            target = f"coord:{parts[2]}"
        else:
            if not (parts[1].isdigit() and parts[2].isdigit()):
                raise UsageError(f"bad fault target in {item!r}")
            target = f"{int(parts[1])}:{int(parts[2])}"
        out.append((parse_time_us(when), target))
    return out


def _entries(args) -> dict[str, str]:
    from .config import parse_kv_file

    return parse_kv_file(args.config) if args.config else {}


def _need(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"no {what} given")
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(args, split: str):
    """``--data DIR`` holding train.csv/test.csv, or generate from the config and seed."""
    from . import data
    from .config import data_config

    if getattr(args, "data", None):
        return data.read_csv(_need(Path(args.data) / f"{split}.csv", f"{split} set"), split)
    entries = _entries(args)
    train, test = data.generate(data_config(entries, seed=args.seed if "data.seed" not in entries else None))
    return train if split == "train" else test


def _load_model(args):
    from . import nn
    from .deploy import read_bundle

    if getattr(args, "params", None):
        return nn.load_params(_need(args.params, "parameter file"))
    if getattr(args, "bundle", None):
        _need(Path(args.bundle) / "manifest.txt", "bundle manifest")
        return read_bundle(args.bundle)
    raise UsageError("give --params FILE or --bundle DIR")


# handlers ------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from . import data
    from .config import data_config

    cfg = data_config(_entries(args), seed=args.seed, n_train=args.n_train, n_test=args.n_test,
                      noise_sigma=args.sigma)
    train, test = data.generate(cfg)
    paths = data.write_split(train, test, cfg, _out(args))
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return 0


def cmd_train(args) -> int:
    from . import nn
    from .config import train_config

    cfg = train_config(_entries(args), seed=args.seed, epochs=args.epochs,
                       dropout=False if args.no_dropout else None)
    echo = ",".join(f"{k}={v}" for k, v in cfg.echo().items())
    print(f"# {echo}")
    from .trainer import train

    train_set = _load_dataset(args, "train")
    test_set = _load_dataset(args, "test")
    params, tlog = train(train_set, nn.REFERENCE_SPEC, cfg, validation=test_set)
    out = _out(args)
    nn.save_params(out / "params.npz", nn.REFERENCE_SPEC, params)
    tlog.write_csv(out / "training_log.csv")
    print(f"final train_loss={tlog.train_loss[-1]:.6g} val_loss={tlog.val_loss[-1]:.6g} "
          f"wall_time={tlog.wall_time:.1f}s -> {out / 'params.npz'}")
    return 0


def cmd_deploy(args) -> int:
    from .deploy import write_bundle

    spec, params = _load_model(args)
    manifest = write_bundle(spec, params, _out(args))
    print(f"wrote {manifest}")
    return 0


def cmd_simulate(args) -> int:
    import numpy as np

    from .runtime.sim import ClusterConfig, run_simulation
    from .runtime.trace import measure_recovery, records_to_csv

    spec, params = _load_model(args)
    schedule = parse_faults(args.faults)
    test_set = _load_dataset(args, "test")
    X = test_set.X[: args.n]
    cluster = ClusterConfig(spec, standby=not args.no_standby, loss_prob=args.loss)
    res = run_simulation(cluster, params, X, schedule, seed=args.seed)
    out = _out(args)
    width = spec.layer_sizes[-1]
    lines = ["index," + ",".join(f"y{j + 1}" for j in range(width))]
    for i, p in enumerate(res.predictions):
        lines.append(f"{i}," + (",".join("" for _ in range(width)) if p is None else ",".join(repr(v) for v in p)))
    (out / "predictions.csv").write_text("\n".join(lines) + "\n")
    res.trace.write_csv(out / "trace.csv")
    (out / "recovery.csv").write_text(records_to_csv(measure_recovery(res.trace)))
    pred = res.prediction_array()[:, 0]
    ok = ~np.isnan(pred)
    mse = float(np.mean((pred[ok] - test_set.y[: args.n][ok]) ** 2)) if ok.any() else float("nan")
    print(f"inputs={len(X)} answered={int(ok.sum())} unanswered={len(res.unanswered)} mse={mse:.6g} "
          f"end_us={res.end_us} -> {out}")
    return 0


def cmd_node(args) -> int:
    from .runtime.sockets import SocketCluster, run_node

    cluster = SocketCluster.load(_need(args.config, "cluster file"), args.bundle)
    run_node(cluster, args.id, args.lifetime)
    return 0


def cmd_coordinator(args) -> int:
    import time

    from .runtime.sockets import SocketCluster, run_coordinator

    cluster = SocketCluster.load(_need(args.config, "cluster file"), args.bundle)
    workload = None
    if args.workload:
        from . import data

        workload = data.read_csv(_need(args.workload, "workload")).X[: args.n]
    first_id = args.first_id if args.first_id is not None else (time.time_ns() // 1_000_000) % (1 << 31)
    preds = run_coordinator(cluster, args.index, workload, _out(args), args.interval_ms, first_id,
                            linger_s=args.linger, lifetime_s=args.lifetime)
    if workload is not None:
        answered = sum(p is not None for p in preds)
        print(f"inputs={len(preds)} answered={answered} -> {Path(args.out) / 'predictions.csv'}")
    return 0


def cmd_inject(args) -> int:
    from .runtime.sockets import SocketCluster, send_fault

    cluster = SocketCluster.load(_need(args.config, "cluster file"), args.bundle)
    send_fault(cluster, args.target)
    print(f"sent FAULT_INJECT to {args.target}")
    return 0


def cmd_sweep(args) -> int:
    from . import faults

    spec, params = _load_model(args)
    test_set = _load_dataset(args, "test")
    ks = list(range(args.k_max + 1))
    rows = faults.degradation_sweep(spec, params, test_set, ks, args.trials, args.seed,
                                    n_permutations=args.permutations)
    out = _out(args)
    faults.write_rows(rows, out / "degradation.csv")
    thr = faults.estimate_critical_threshold(rows, args.factor, spec.n_hidden)
    print(faults.rows_to_csv(rows), end="")
    print(f"p_c={thr.p_c:.4f} censored={int(thr.censored)} -> {out / 'degradation.csv'}")
    return 0


def cmd_experiment(args) -> int:
    from .experiments import ExperimentConfig, run_suite

    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else None
    suites = tuple(args.suite.split(",")) if args.suite and args.suite != "all" else None
    cfg = ExperimentConfig.from_entries(_entries(args), seeds=seeds, suites=suites, trials=args.trials)
    written = run_suite(cfg, _out(args))
    for name, path in written.items():
        print(f"{name}: {path}")
    return 0


def cmd_report(args) -> int:
    from .report import render_report

    src = _need(args.input or args.out, "report input directory")
    out = _out(args)
    (out / "summary.md").write_text(render_report(src))
    print(f"wrote {out / 'summary.md'}")
    return 0


# parser --------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--out", default=".", help="output directory (default .)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="ftnet", description="Fault-tolerant one-neuron-per-node inference.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        sp.set_defaults(func=func)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the synthetic regression dataset")
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--sigma", type=float, help="noise standard deviation")

    sp = add("train", cmd_train, "train the 10-10-10-1 network")
    sp.add_argument("--data", help="directory with train.csv and test.csv (default: generate)")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--no-dropout", action="store_true")

    sp = add("deploy", cmd_deploy, "write a per-neuron deployment bundle")
    sp.add_argument("--params", required=True, help="params.npz from train")

    sp = add("simulate", cmd_simulate, "run the workload through the simulated cluster")
    model = sp.add_mutually_exclusive_group()
    model.add_argument("--params")
    model.add_argument("--bundle")
    sp.add_argument("--data", help="directory with test.csv (default: generate)")
    sp.add_argument("--n", type=int, default=100, help="number of test rows to run")
    sp.add_argument("--faults", default="none", help="none or kill:L:N@TIME[,...], e.g. kill:1:3@t0")
    sp.add_argument("--loss", type=float, default=0.0, help="datagram loss probability")
    sp.add_argument("--no-standby", action="store_true")

    sp = add("node", cmd_node, "run one neuron node over UDP (config = cluster file)")
    sp.add_argument("--id", required=True, help="LAYER:NEURON")
    sp.add_argument("--bundle", help="override the cluster file's bundle directory")
    sp.add_argument("--lifetime", type=float, help="exit after this many seconds")

    sp = add("coordinator", cmd_coordinator, "run a coordinator over UDP (config = cluster file)")
    sp.add_argument("--index", type=int, default=0, help="0 = primary, 1 = standby")
    sp.add_argument("--bundle")
    sp.add_argument("--workload", help="CSV of inputs (data-gen format)")
    sp.add_argument("--n", type=int, default=100)
    sp.add_argument("--interval-ms", type=float, default=10.0)
    sp.add_argument("--first-id", type=int, help="first inference id (default: from the clock)")
    sp.add_argument("--linger", type=float, default=0.0, help="seconds to keep running after the last output")
    sp.add_argument("--lifetime", type=float, help="exit after this many seconds")

    sp = add("inject", cmd_inject, "send FAULT_INJECT to a live node (config = cluster file)")
    sp.add_argument("--target", required=True, help="LAYER:NEURON")
    sp.add_argument("--bundle")

    sp = add("sweep", cmd_sweep, "degradation table over k failed hidden neurons")
    model = sp.add_mutually_exclusive_group()
    model.add_argument("--params")
    model.add_argument("--bundle")
    sp.add_argument("--data")
    sp.add_argument("--k-max", type=int, default=7)
    sp.add_argument("--trials", type=int, default=100)
    sp.add_argument("--permutations", type=int, default=10_000)
    sp.add_argument("--factor", type=float, default=2.0)

    sp = add("experiment", cmd_experiment, "run experiment suites and write CSVs plus summary.md")
    sp.add_argument("--suite", default="all",
                    help="all or comma list of degradation,dropout_vs_plain,recovery,disconnect")
    sp.add_argument("--seeds", help="comma-separated training seeds (default 1,2,3)")
    sp.add_argument("--trials", type=int)

    sp = add("report", cmd_report, "render experiment CSVs to summary.md")
    sp.add_argument("--in", dest="input", help="directory with the CSVs (default: --out)")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except (UsageError, ConfigError, DataFormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"ftnet {args.command}: error: {_first_line(exc)}", file=sys.stderr)
        return 2
    except (FtnetError, ValueError, OSError) as exc:
        print(f"ftnet {args.command}: error: {_first_line(exc)}", file=sys.stderr)
        return 1


def _first_line(exc: BaseException) -> str:
    text = str(exc)
    return text.splitlines()[0] if text else type(exc).__name__

if __name__ == "__main__":
    sys.exit(main())
