"""Datagram-socket transport for the neuron and coordinator state machines.

Each node or coordinator runs in its own OS process with one UDP socket.
Broadcast is iterated unicast to the subscribers of a frame. Timers use
the system monotonic clock, which is shared by every process on a host, so
trace timestamps from different processes can be compared directly.

Cluster files are key=value lines::

    bundle=/path/to/bundle
    coordinator.0=127.0.0.1:9000
    node.1:0=127.0.0.1:9101
    timing.layer_timeout_ms=50
    transport.duplicate=0
"""

from __future__ import annotations

import csv
import heapq
import logging
import select
import socket
import time
from dataclasses import dataclass, field
from pathlib import Path

from .. import nn
from ..config import parse_kv_file
from ..deploy import bundle_spec, node_id, parse_node_id, read_manifest, read_neuron
from ..exceptions import ConfigError
from ..wire import FaultInject, Frame, FrameError, decode_frame, encode_frame
from .actors import (
    Coordinator, Deliver, Log, NeuronNode, Output, Request, Send, SetTimer, TimerFired, Timing,
    coordinator_name, node_name, subscribers,
)

log = logging.getLogger(__name__)

_TIMING_KEYS = {
    "layer_timeout_ms": "layer_timeout_us",
    "heartbeat_interval_ms": "heartbeat_interval_us",
    "heartbeat_miss_threshold": "heartbeat_miss_threshold",
    "handover_timeout_ms": "handover_timeout_us",
    "inference_deadline_ms": "inference_deadline_us",
}


def now_us() -> int:
    return time.monotonic_ns() // 1000


def parse_endpoint(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ConfigError(f"endpoint must be host:port, got {text!r}")
    return host, int(port)


@dataclass
class SocketCluster:
    spec: nn.NetworkSpec
    bundle: Path
    endpoints: dict[str, tuple[str, int]]
    timing: Timing = field(default_factory=Timing)
    duplicate: bool = False

    @property
    def n_coordinators(self) -> int:
        return sum(1 for k in self.endpoints if k.startswith("coord:"))

    @classmethod
    def load(cls, path, bundle=None) -> "SocketCluster":
        entries = parse_kv_file(path)
        bundle = Path(bundle or entries.get("bundle", ""))
        if not bundle or not (bundle / "manifest.txt").exists():
            raise ConfigError(f"cluster file {path} names no readable bundle")
        if not bundle.is_absolute():
            bundle = (Path(path).parent / bundle).resolve() if not bundle.exists() else bundle.resolve()
        spec = bundle_spec(read_manifest(bundle))
        endpoints = {}
        timing = Timing()
        duplicate = False
        for key, value in entries.items():
            if key.startswith("node."):
                endpoints[node_name(parse_node_id(key[5:]))] = parse_endpoint(value)
            elif key.startswith("coordinator."):
                endpoints[coordinator_name(int(key.split(".", 1)[1]))] = parse_endpoint(value)
            elif key.startswith("timing."):
                name = key.split(".", 1)[1]
                if name not in _TIMING_KEYS:
                    raise ConfigError(f"unknown timing key {key!r}")
                scale = 1 if name.endswith("threshold") else 1000
                setattr(timing, _TIMING_KEYS[name], int(float(value) * scale))
            elif key == "transport.duplicate":
                duplicate = value.strip() not in ("0", "false", "")
        for l in range(1, spec.n_layers + 1):
            for n in range(spec.layer_sizes[l]):
                if node_name((l, n)) not in endpoints:
                    raise ConfigError(f"cluster file has no endpoint for node {node_id(l, n)}")
        if "coord:0" not in endpoints:
            raise ConfigError("cluster file has no coordinator.0 endpoint")
        return cls(spec, bundle, endpoints, timing, duplicate)


def write_cluster_file(path, bundle, endpoints: dict[str, tuple[str, int]], timing: Timing | None = None,
                       duplicate: bool = False) -> None:
    lines = [f"bundle={bundle}"]
    for name, (host, port) in endpoints.items():
        if name.startswith("coord:"):
            lines.append(f"coordinator.{name.split(':')[1]}={host}:{port}")
        else:
            lines.append(f"node.{name}={host}:{port}")
    if timing is not None:
        for key, attr in _TIMING_KEYS.items():
            val = getattr(timing, attr)
            lines.append(f"timing.{key}={val if key.endswith('threshold') else val / 1000:g}")
    lines.append(f"transport.duplicate={int(duplicate)}")
    Path(path).write_text("\n".join(lines) + "\n")


class ActorRunner:
    """Feeds one state machine from a UDP socket and a monotonic-clock timer heap."""

    def __init__(self, name: str, actor, cluster: SocketCluster, trace_path=None, on_output=None):
        self.name = name
        self.actor = actor
        self.cluster = cluster
        self.sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self.sock.bind(cluster.endpoints[name])
        self.sock.setblocking(False)
        self._timers: list = []
        self._seq = 0
        self.on_output = on_output
        self._trace_fh = None
        self._trace = None
        if trace_path is not None:
            self._trace_fh = open(trace_path, "w", newline="")
            self._trace = csv.writer(self._trace_fh, lineterminator="\n")
            self._trace.writerow(("time_us", "event", "subject", "detail"))

    def close(self):
        self.sock.close()
        if self._trace_fh:
            self._trace_fh.close()

    def log(self, event: str, subject: str, detail: str = "") -> None:
        if self._trace:
            self._trace.writerow((now_us(), event, subject, detail))
            self._trace_fh.flush()

    def apply(self, emissions) -> None:
        t = now_us()
        for em in emissions:
            if isinstance(em, SetTimer):
                heapq.heappush(self._timers, (t + em.delay_us, self._seq, em.key))
                self._seq += 1
            elif isinstance(em, Send):
                self.send(em.frame)
            elif isinstance(em, Log):
                self.log(em.event, em.subject, em.detail)
            elif isinstance(em, Output) and self.on_output:
                self.on_output(em)

    def send(self, frame: Frame) -> None:
        data = encode_frame(frame)
        copies = 2 if self.cluster.duplicate else 1
        for dest in subscribers(frame, self.cluster.spec, self.cluster.n_coordinators):
            if dest == self.name or dest not in self.cluster.endpoints:
                continue
            for _ in range(copies):
                try:
                    self.sock.sendto(data, self.cluster.endpoints[dest])
                except OSError as exc:
                    # datagram semantics: a dead peer's port may refuse, delivery is best effort
                    log.debug("send to %s failed: %s", dest, exc)

    def receive(self) -> Frame | None:
        """Next valid frame from the socket, or None once it is empty; bad frames are logged and skipped."""
        while True:
            try:
                data, _ = self.sock.recvfrom(512)
            except (BlockingIOError, ConnectionRefusedError):
                return None
            try:
                return decode_frame(data)
            except FrameError as exc:
                self.log("frame_rejected", self.name, type(exc).__name__)

    def step(self, max_wait_s: float = 0.05) -> None:
        t = now_us()
        wait = max_wait_s
        if self._timers:
            wait = min(wait, max(0.0, (self._timers[0][0] - t) / 1e6))
        ready, _, _ = select.select([self.sock], [], [], wait)
        if ready:
            # drain fully before timers run, so queued heartbeats are never mistaken for silence
            while (frame := self.receive()) is not None:
                self.apply(self.actor.handle(Deliver(frame), now_us()))
        t = now_us()
        while self._timers and self._timers[0][0] <= t:
            _, _, key = heapq.heappop(self._timers)
            self.apply(self.actor.handle(TimerFired(key), now_us()))

    def start(self) -> None:
        self.apply(self.actor.start(now_us()))


def run_node(cluster: SocketCluster, node: str, lifetime_s: float | None = None) -> None:
    layer, neuron = parse_node_id(node)
    params = read_neuron(cluster.bundle, (layer, neuron))
    spec = cluster.spec
    actor = NeuronNode(layer, neuron, params, spec.layer_sizes[layer - 1], layer == spec.n_layers, cluster.timing)
    runner = ActorRunner(node_name((layer, neuron)), actor, cluster)
    runner.start()
    end = None if lifetime_s is None else time.monotonic() + lifetime_s
    try:
        while end is None or time.monotonic() < end:
            runner.step()
    finally:
        runner.close()


def run_coordinator(cluster: SocketCluster, index: int, workload=None, out_dir=None, request_interval_ms: float = 10.0,
                    first_id: int = 0, ready_timeout_s: float = 30.0, linger_s: float = 0.0,
                    lifetime_s: float | None = None) -> list:
    """Run a coordinator; with a workload, drive it and return one prediction per row."""
    import numpy as np

    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    spec = cluster.spec
    actor = Coordinator(spec, cluster.timing, index, has_peer=cluster.n_coordinators > 1)
    outputs: dict[int, tuple | None] = {}
    runner = ActorRunner(coordinator_name(index), actor, cluster,
                         trace_path=out_dir / f"trace_{actor.name.replace(':', '')}.csv" if out_dir else None,
                         on_output=lambda o: outputs.setdefault(o.inference_id, o.values))
    try:
        # membership timers start only once every node has been heard from
        expected = {n for n in cluster.endpoints if not n.startswith("coord:")}
        heard: set[str] = set()
        deadline = time.monotonic() + ready_timeout_s
        while heard != expected and time.monotonic() < deadline:
            frame = None
            if select.select([runner.sock], [], [], 0.05)[0]:
                frame = runner.receive()
            if frame is not None and frame.msg_type == 0x05 and frame.layer != 0xFF:
                heard.add(node_name((frame.layer, frame.neuron)))
        if heard != expected:
            raise ConfigError(f"nodes never reported: {sorted(expected - heard)}")
        runner.log("cluster_ready", actor.name, f"nodes={len(heard)}")
        runner.start()

        X = None if workload is None else np.atleast_2d(np.asarray(workload, dtype=np.float32))
        ids = [] if X is None else [first_id + i for i in range(len(X))]
        next_req = 0
        t0 = time.monotonic()
        finished_at = None
        end = None if lifetime_s is None else t0 + lifetime_s
        while True:
            now = time.monotonic()
            if end is not None and now >= end:
                break
            if X is not None:
                while next_req < len(X) and now >= t0 + next_req * request_interval_ms / 1000:
                    req = Request(ids[next_req], tuple(float(v) for v in X[next_req]))
                    runner.apply(actor.handle(req, now_us()))
                    next_req += 1
                if finished_at is None and all(i in outputs for i in ids):
                    finished_at = now
                if finished_at is not None and now >= finished_at + linger_s:
                    break
            runner.step(0.005)
    finally:
        runner.close()

    predictions = [outputs.get(i) for i in ids]
    if out_dir and X is not None:
        with open(out_dir / "predictions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index"] + [f"y{j + 1}" for j in range(spec.layer_sizes[-1])])
            for i, p in enumerate(predictions):
                w.writerow([i] + (["" for _ in range(spec.layer_sizes[-1])] if p is None else [repr(v) for v in p]))
    return predictions


def send_fault(cluster: SocketCluster, target: str) -> None:
    """Send FAULT_INJECT to a live node from an ephemeral socket."""
    layer, neuron = parse_node_id(target)
    name = node_name((layer, neuron))
    if name not in cluster.endpoints:
        raise ConfigError(f"unknown node {target!r}")
    frame = Frame(FaultInject(layer, neuron), layer=0xFF, neuron=0xFE)
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
        s.sendto(encode_frame(frame), cluster.endpoints[name])


def read_predictions(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [None if row[1] == "" else tuple(float(v) for v in row[1:]) for row in rows]


def free_udp_ports(n: int, host: str = "127.0.0.1") -> list[int]:
    socks = []
    try:
        for _ in range(n):
            s = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            s.bind((host, 0))
            socks.append(s)
        return [s.getsockname()[1] for s in socks]
    finally:
        for s in socks:
            s.close()


class LocalCluster:
    """Spawn every node of a bundle as its own process on the loopback interface.

    Use as a context manager; processes are killed on exit. Coordinators are
    not started here: run :func:`run_coordinator` in-process or through the CLI.
    """

    def __init__(self, bundle, work_dir, n_coordinators: int = 1, timing: Timing | None = None,
                 duplicate: bool = False, host: str = "127.0.0.1"):
        import subprocess
        import sys

        self._subprocess = subprocess
        self._python = sys.executable
        self.work_dir = Path(work_dir)
        self.work_dir.mkdir(parents=True, exist_ok=True)
        spec = bundle_spec(read_manifest(bundle))
        names = [coordinator_name(i) for i in range(n_coordinators)]
        names += [node_name((l, n)) for l in range(1, spec.n_layers + 1) for n in range(spec.layer_sizes[l])]
        ports = free_udp_ports(len(names), host)
        self.endpoints = {name: (host, port) for name, port in zip(names, ports)}
        self.config_path = self.work_dir / "cluster.cfg"
        write_cluster_file(self.config_path, Path(bundle).resolve(), self.endpoints, timing, duplicate)
        self.cluster = SocketCluster.load(self.config_path)
        self.procs: dict[str, object] = {}

    def start(self) -> "LocalCluster":
        for name in self.endpoints:
            if name.startswith("coord:"):
                continue
            self.procs[name] = self._subprocess.Popen(
                [self._python, "-m", "ftnet", "node", "--config", str(self.config_path), "--id", name],
                stdout=self._subprocess.DEVNULL, stderr=self._subprocess.DEVNULL,
            )
        return self

    def kill(self, name: str) -> int:
        """SIGKILL one node process; returns the monotonic time in microseconds."""
        proc = self.procs[name]
        t = now_us()
        proc.kill()
        proc.wait()
        return t

    def stop(self) -> None:
        for proc in self.procs.values():
            if proc.poll() is None:
                proc.kill()
        for proc in self.procs.values():
            proc.wait()

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()
