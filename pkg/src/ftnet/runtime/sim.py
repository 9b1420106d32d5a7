"""Deterministic discrete-event simulation of a neuron cluster.

Virtual time is an integer number of microseconds. Pending events sit in a
heap ordered by ``(time, insertion sequence)``, so a run is a pure function
of its inputs. Every frame goes through the real codec: it is encoded once
when sent and decoded once before delivery.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from .. import nn
from ..deploy import neurons_of
from ..exceptions import ConfigError
from ..rng import Rng
from ..wire import decode_frame, encode_frame
from .actors import (
    Coordinator, Deliver, Kill, Log, NeuronNode, Output, Request, Send, SetTimer, TimerFired, Timing,
    coordinator_name, node_name, subscribers,
)
from .trace import Trace

_NET_STREAM = 1
_PHASE_STREAM = 2
_TYPE_NAMES = {1: "WEIGHT_CHUNK", 2: "INPUT_VECTOR", 3: "ACTIVATION", 4: "RESULT",
               5: "HEARTBEAT", 6: "FAULT_INJECT", 7: "ACK", 8: "ROSTER"}


@dataclass
class ClusterConfig:
    spec: nn.NetworkSpec
    timing: Timing = field(default_factory=Timing)
    standby: bool = True
    latency_us: tuple[int, int] = (1000, 5000)
    loss_prob: float = 0.0
    dup_prob: float = 0.0
    request_interval_us: int = 10_000
    start_us: int = 10_000
    trace_frames: bool = True

    def __post_init__(self):
        lo, hi = self.latency_us
        if not 0 <= lo <= hi:
            raise ConfigError("latency range must satisfy 0 <= low <= high")
        if hi >= self.timing.layer_timeout_us:
            raise ConfigError("layer_timeout must exceed the maximum one-hop latency")
        if not (0 <= self.loss_prob < 1 and 0 <= self.dup_prob < 1):
            raise ConfigError("loss_prob and dup_prob must lie in [0, 1)")

    @property
    def n_coordinators(self) -> int:
        return 2 if self.standby else 1


@dataclass
class SimResult:
    predictions: list
    trace: Trace
    unanswered: list[int]
    end_us: int

    def prediction_array(self, fill=np.nan) -> np.ndarray:
        width = max((len(p) for p in self.predictions if p is not None), default=1)
        out = np.full((len(self.predictions), width), fill, dtype=np.float64)
        for i, p in enumerate(self.predictions):
            if p is not None:
                out[i] = p
        return out


def parse_target(target) -> str:
    if isinstance(target, str):
        return target
    return node_name(tuple(int(v) for v in target))


class Simulation:
    def __init__(self, cluster: ClusterConfig, params: nn.Parameters, seed: int = 0):
        spec = cluster.spec
        params.check(spec)
        self.cluster = cluster
        self.spec = spec
        self.rng = Rng(seed)
        self.net_rng = self.rng.derive(_NET_STREAM)
        self.trace = Trace()
        self.now = 0
        self._queue: list = []
        self._seq = 0
        self._frame_serial = 0
        self.outputs: dict[int, tuple | None] = {}
        self.actors: dict[str, object] = {}
        timing = cluster.timing
        for neuron in neurons_of(spec, params):
            phase_rng = self.rng.derive(_PHASE_STREAM, neuron.layer, neuron.neuron)
            phase = phase_rng.integers(timing.heartbeat_interval_us)
            node = NeuronNode(neuron.layer, neuron.neuron, neuron, spec.layer_sizes[neuron.layer - 1],
                              neuron.layer == spec.n_layers, timing, phase)
            self.actors[node.name] = node
        for i in range(cluster.n_coordinators):
            c = Coordinator(spec, timing, i, has_peer=cluster.standby)
            self.actors[c.name] = c

    def _push(self, time_us: int, target: str, event) -> None:
        heapq.heappush(self._queue, (time_us, self._seq, target, event))
        self._seq += 1

    def _latency(self) -> int:
        lo, hi = self.cluster.latency_us
        return lo + self.net_rng.integers(hi - lo + 1) if hi > lo else lo

    def _apply(self, source: str, emissions) -> None:
        for em in emissions:
            if isinstance(em, SetTimer):
                self._push(self.now + em.delay_us, source, TimerFired(em.key))
            elif isinstance(em, Send):
                self._broadcast(source, em.frame)
            elif isinstance(em, Log):
                self.trace.append(self.now, em.event, em.subject, em.detail)
            elif isinstance(em, Output):
                self.outputs.setdefault(em.inference_id, em.values)

    def _broadcast(self, source: str, frame) -> None:
        wire_bytes = encode_frame(frame)
        delivered = decode_frame(wire_bytes)
        serial = self._frame_serial
        self._frame_serial += 1
        tag = None
        if self.cluster.trace_frames:
            tag = f"id={serial};type={_TYPE_NAMES[frame.msg_type]};inf={frame.inference_id}"
            self.trace.append(self.now, "frame_sent", source, f"{tag};bytes={len(wire_bytes)}")
        for dest in subscribers(frame, self.spec, self.cluster.n_coordinators):
            if dest == source or dest not in self.actors:
                continue
            copies = 1
            if self.cluster.dup_prob and self.net_rng.random() < self.cluster.dup_prob:
                copies = 2
            for _ in range(copies):
                if self.cluster.loss_prob and self.net_rng.random() < self.cluster.loss_prob:
                    if tag:
                        self.trace.append(self.now, "frame_dropped", source, f"{tag};to={dest}")
                    continue
                self._push(self.now + self._latency(), dest, (Deliver(delivered), serial, source))

    def run(self, workload, fault_schedule=(), until_us: int | None = None) -> SimResult:
        X = np.atleast_2d(np.asarray(workload, dtype=np.float32))
        if X.shape[1] != self.spec.layer_sizes[0]:
            raise ConfigError("workload width does not match the input layer")
        faults = []
        for time_us, target in fault_schedule:
            name = parse_target(target)
            if name not in self.actors:
                raise ConfigError(f"fault schedule targets unknown node {name!r}")
            faults.append((int(time_us), name))

        timing = self.cluster.timing
        for name, actor in self.actors.items():
            self._apply(name, actor.start(0))
        for t, name in faults:
            self._push(t, name, Kill())
        coords = [coordinator_name(i) for i in range(self.cluster.n_coordinators)]
        for i, row in enumerate(X):
            t = self.cluster.start_us + i * self.cluster.request_interval_us
            req = Request(i, tuple(float(v) for v in row))
            for c in coords:
                self._push(t, c, req)

        last_request = self.cluster.start_us + max(len(X) - 1, 0) * self.cluster.request_interval_us
        cap = last_request + 3 * timing.inference_deadline_us + timing.handover_timeout_us
        if until_us is not None:
            cap = max(cap, until_us)
        n = len(X)
        while self._queue:
            time_us, _, target, event = self._queue[0]
            if time_us > cap:
                break
            if len(self.outputs) >= n and (until_us is None or time_us > until_us):
                break
            heapq.heappop(self._queue)
            self.now = time_us
            actor = self.actors[target]
            if isinstance(event, tuple):
                event, serial, source = event
                if self.cluster.trace_frames and getattr(actor, "alive", True):
                    self.trace.append(self.now, "frame_delivered", target, f"id={serial};from={source}")
            elif isinstance(event, Kill):
                self.trace.append(self.now, "fault_injected", target, "")
            self._apply(target, actor.handle(event, self.now))

        predictions = [self.outputs.get(i) for i in range(n)]
        unanswered = [i for i in range(n) if i not in self.outputs]
        return SimResult(predictions, self.trace, unanswered, self.now)


def run_simulation(cluster: ClusterConfig, params: nn.Parameters, workload, fault_schedule=(), seed: int = 0,
                   until_us: int | None = None) -> SimResult:
    """Run ``workload`` through a simulated cluster, killing nodes per ``fault_schedule``.

    ``fault_schedule`` holds ``(time_us, target)`` pairs; a target is a
    ``(layer, neuron)`` pair, ``"layer:neuron"`` or ``"coord:<index>"``.
    """
    params32 = params.astype(np.float32)
    return Simulation(cluster, params32, seed).run(workload, fault_schedule, until_us)
