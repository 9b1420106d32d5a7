"""Neuron and coordinator state machines.

Handlers never block or read a clock: a transport feeds them events stamped
with the current time in microseconds and performs the emissions they
return. The same objects therefore run inside the discrete-event simulator
and behind real datagram sockets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import nn
from ..wire import (
    COORDINATOR_LAYER, FLAG_LAST, ROLE_NODE, ROLE_PRIMARY, Ack, Activation, FaultInject, Frame,
    Heartbeat, InputVector, NeuronParams, Result, Roster, WeightAssembler, WeightChunk,
)

# ROSTER frames list the nodes excluded from the cluster when this flag is set
FLAG_EXCLUDED = 0x02


def node_name(node) -> str:
    if isinstance(node, str):
        return node
    return f"{node[0]}:{node[1]}"


def coordinator_name(index: int) -> str:
    return f"coord:{index}"


# events ---------------------------------------------------------------------

@dataclass(frozen=True)
class Deliver:
    frame: Frame


@dataclass(frozen=True)
class TimerFired:
    key: tuple


@dataclass(frozen=True)
class Kill:
    """Out-of-band fault: the actor falls silent immediately."""


@dataclass(frozen=True)
class Request:
    inference_id: int
    inputs: tuple[float, ...]


# emissions ------------------------------------------------------------------

@dataclass(frozen=True)
class Send:
    frame: Frame


@dataclass(frozen=True)
class SetTimer:
    delay_us: int
    key: tuple


@dataclass(frozen=True)
class Log:
    event: str
    subject: str
    detail: str = ""


@dataclass(frozen=True)
class Output:
    """A finished inference handed to the client; ``values`` is None on failure."""

    inference_id: int
    values: tuple[float, ...] | None


@dataclass
class Timing:
    layer_timeout_us: int = 50_000
    heartbeat_interval_us: int = 25_000
    heartbeat_miss_threshold: int = 2
    handover_timeout_us: int = 200_000
    inference_deadline_us: int = 250_000

    @property
    def detection_budget_us(self) -> int:
        return self.heartbeat_interval_us * self.heartbeat_miss_threshold

    @property
    def suspect_after_us(self) -> int:
        # one heartbeat missed, with half an interval of slack for jitter
        return self.heartbeat_interval_us + self.heartbeat_interval_us // 2


def compute_neuron(params: NeuronParams, inputs: np.ndarray) -> np.float32:
    """``f(bias + sum_i w_i * x_i)`` in float32, same operation order as nn.forward."""
    z = nn.weighted_sum(params.weights, params.bias, np.asarray(inputs, dtype=np.float32))
    return np.float32(nn.activation_apply(params.activation, z))


@dataclass
class _Pending:
    values: np.ndarray
    received: np.ndarray
    first_arrival_us: int


class NeuronNode:
    """One neuron: waits for its fan-in (or a barrier timeout) and broadcasts its activation."""

    def __init__(self, layer: int, neuron: int, params: NeuronParams | None, fan_in: int,
                 is_output: bool, timing: Timing, heartbeat_phase_us: int = 0):
        self.layer = layer
        self.neuron = neuron
        self.params = params
        self.fan_in = fan_in
        self.is_output = is_output
        self.timing = timing
        self.heartbeat_phase_us = heartbeat_phase_us
        self.alive = True
        self.heartbeat_counter = 0
        self.buffers: dict[int, _Pending] = {}
        self.finished: set[int] = set()
        self.excluded: set[int] = set()
        self._assembler: WeightAssembler | None = None

    @property
    def name(self) -> str:
        return node_name((self.layer, self.neuron))

    def start(self, now_us: int) -> list:
        return [SetTimer(self.heartbeat_phase_us, ("hb",))]

    def handle(self, event, now_us: int) -> list:
        if not self.alive:
            return []
        if isinstance(event, Kill):
            self.alive = False
            self.buffers.clear()
            return []
        if isinstance(event, TimerFired):
            if event.key[0] == "hb":
                return self._heartbeat()
            if event.key[0] == "barrier":
                inf = event.key[1]
                if inf in self.buffers:
                    return self._fire(inf, now_us, timed_out=True)
            return []
        frame = event.frame
        body = frame.body
        if isinstance(body, FaultInject):
            if (body.layer, body.neuron) == (self.layer, self.neuron):
                self.alive = False
                self.buffers.clear()
            return []
        if isinstance(body, WeightChunk):
            return self._load_chunk(frame)
        if isinstance(body, Roster):
            return self._update_roster(frame, now_us)
        if self.params is None:
            return []
        if isinstance(body, InputVector) and self.layer == 1:
            if frame.inference_id in self.finished:
                return []
            values = np.asarray(body.values, dtype=np.float32)
            if values.shape != (self.fan_in,):
                return [Log("frame_rejected", self.name, f"inf={frame.inference_id};reason=input_width")]
            self.buffers[frame.inference_id] = _Pending(values, np.ones(self.fan_in, bool), now_us)
            return self._fire(frame.inference_id, now_us, timed_out=False)
        if isinstance(body, Activation) and frame.layer == self.layer - 1:
            return self._accept(frame.inference_id, frame.neuron, body.value, now_us)
        return []

    def _heartbeat(self) -> list:
        self.heartbeat_counter += 1
        hb = Frame(Heartbeat(ROLE_NODE, self.heartbeat_counter & 0xFFFFFFFF), layer=self.layer, neuron=self.neuron)
        return [Send(hb), SetTimer(self.timing.heartbeat_interval_us, ("hb",))]

    def _accept(self, inf: int, source: int, value: float, now_us: int) -> list:
        if inf in self.finished:
            return [Log("late_frame_dropped", self.name, f"inf={inf};src={source}")]
        if not 0 <= source < self.fan_in:
            return []
        out = []
        pend = self.buffers.get(inf)
        if pend is None:
            pend = _Pending(np.zeros(self.fan_in, np.float32), np.zeros(self.fan_in, bool), now_us)
            self.buffers[inf] = pend
            out.append(SetTimer(self.timing.layer_timeout_us, ("barrier", inf)))
        if not pend.received[source]:
            pend.received[source] = True
            pend.values[source] = value
        if self._satisfied(pend):
            out += self._fire(inf, now_us, timed_out=False)
        return out

    def _satisfied(self, pend: _Pending) -> bool:
        return all(pend.received[i] or i in self.excluded for i in range(self.fan_in))

    def _update_roster(self, frame: Frame, now_us: int) -> list:
        if not frame.flags & FLAG_EXCLUDED:
            return []
        # failures are permanent, so a reordered older roster must not shrink the set
        self.excluded |= {n for l, n in frame.body.nodes if l == self.layer - 1}
        out = []
        for inf in sorted(self.buffers):
            if inf in self.buffers and self._satisfied(self.buffers[inf]):
                out += self._fire(inf, now_us, timed_out=False)
        return out

    def _fire(self, inf: int, now_us: int, timed_out: bool) -> list:
        pend = self.buffers.pop(inf)
        self.finished.add(inf)
        # sources that never reported contribute exactly 0
        values = np.where(pend.received, pend.values, np.float32(0))
        value = compute_neuron(self.params, values)
        body = Result((float(value),)) if self.is_output else Activation(float(value))
        out = [Send(Frame(body, inference_id=inf, layer=self.layer, neuron=self.neuron))]
        if timed_out:
            missing = ",".join(str(i) for i in np.flatnonzero(~pend.received))
            out.insert(0, Log("barrier_timeout", self.name, f"inf={inf};missing={missing}"))
        return out

    def _load_chunk(self, frame: Frame) -> list:
        if (frame.layer, frame.neuron) != (self.layer, self.neuron):
            return []
        if self._assembler is None:
            self._assembler = WeightAssembler(self.fan_in)
        self._assembler.add(frame)
        if self._assembler.complete():
            self.params = self._assembler.result()
            self._assembler = None
            return [Log("weights_loaded", self.name, f"fan_in={self.params.fan_in}")]
        return []


@dataclass
class _Inference:
    inputs: tuple[float, ...]
    requested_us: int
    deadline_us: int
    results: dict[int, float] = field(default_factory=dict)
    dispatched: bool = False
    done: bool = False
    published: bool = False
    values: tuple[float, ...] | None = None


@dataclass
class _Member:
    last_heartbeat_us: int
    status: str = "alive"


class Coordinator:
    """Routes inputs, assembles outputs and tracks liveness through heartbeats.

    Index 0 starts as primary. A standby (index 1) mirrors requests and
    results, and promotes itself once the primary has been silent for
    ``handover_timeout_us``.
    """

    def __init__(self, spec: nn.NetworkSpec, timing: Timing, index: int = 0, has_peer: bool = False):
        self.spec = spec
        self.timing = timing
        self.index = index
        self.role = "primary" if index == 0 else "standby"
        self.has_peer = has_peer
        self.alive = True
        self.heartbeat_counter = 0
        self.members: dict[tuple[int, int], _Member] = {}
        self.pending: dict[int, _Inference] = {}
        self.last_primary_heartbeat_us = 0

    @property
    def name(self) -> str:
        return coordinator_name(self.index)

    @property
    def is_primary(self) -> bool:
        return self.role == "primary"

    def start(self, now_us: int) -> list:
        out = []
        for l in range(1, self.spec.n_layers + 1):
            for n in range(self.spec.layer_sizes[l]):
                self.members[(l, n)] = _Member(now_us)
                out.append(SetTimer(self.timing.suspect_after_us, ("suspect", l, n)))
                out.append(SetTimer(self.timing.detection_budget_us, ("fail", l, n)))
        if self.is_primary:
            out.append(SetTimer(0, ("hb",)))
        elif self.has_peer:
            self.last_primary_heartbeat_us = now_us
            out.append(SetTimer(self.timing.handover_timeout_us, ("handover",)))
        return out

    def handle(self, event, now_us: int) -> list:
        if not self.alive:
            return []
        if isinstance(event, Kill):
            self.alive = False
            return []
        if isinstance(event, Request):
            return self._request(event, now_us)
        if isinstance(event, TimerFired):
            return self._timer(event.key, now_us)
        frame = event.frame
        body = frame.body
        if isinstance(body, Heartbeat):
            if frame.layer == COORDINATOR_LAYER:
                if frame.neuron != self.index and not self.is_primary:
                    self.last_primary_heartbeat_us = now_us
                return []
            return self._member_heartbeat((frame.layer, frame.neuron), now_us)
        if isinstance(body, Result):
            return self._result(frame, now_us)
        if isinstance(body, InputVector) and frame.layer == COORDINATOR_LAYER and frame.neuron != self.index:
            inf = self.pending.get(frame.inference_id)
            if inf is None:
                # a standby without its own request feed adopts what the primary dispatched
                inf = _Inference(tuple(body.values), now_us, now_us + self.timing.inference_deadline_us)
                self.pending[frame.inference_id] = inf
            inf.dispatched = True
            return []
        if isinstance(body, Ack) and frame.layer == COORDINATOR_LAYER and frame.neuron != self.index:
            inf = self.pending.get(frame.inference_id)
            if inf is None:
                # the ACK overtook the dispatch; remember the id so it is never replayed
                inf = _Inference((), now_us, now_us, dispatched=True)
                self.pending[frame.inference_id] = inf
            inf.published = True
            inf.done = True
            return []
        return []

    # inference path ---------------------------------------------------------

    def _request(self, req: Request, now_us: int) -> list:
        if req.inference_id in self.pending:
            return []
        inf = _Inference(tuple(req.inputs), now_us, now_us + self.timing.inference_deadline_us)
        self.pending[req.inference_id] = inf
        if not self.is_primary:
            return []
        return self._dispatch(req.inference_id, now_us)

    def _dispatch(self, inf_id: int, now_us: int) -> list:
        inf = self.pending[inf_id]
        inf.dispatched = True
        frame = Frame(InputVector(inf.inputs), inference_id=inf_id, layer=COORDINATOR_LAYER, neuron=self.index)
        delay = max(0, inf.deadline_us - now_us)
        return [
            Log("inference_dispatched", self.name, f"inf={inf_id}"),
            Send(frame),
            SetTimer(delay, ("deadline", inf_id)),
        ]

    def _result(self, frame: Frame, now_us: int) -> list:
        inf = self.pending.get(frame.inference_id)
        if inf is None or inf.done or frame.layer != self.spec.n_layers:
            return []
        out = []
        if not inf.results:
            out.append(SetTimer(self.timing.layer_timeout_us, ("collect", frame.inference_id)))
        inf.results.setdefault(frame.neuron, frame.body.values[0])
        if self._outputs_ready(inf):
            out += self._complete(frame.inference_id, now_us)
        return out

    def _outputs_ready(self, inf: _Inference) -> bool:
        n_out = self.spec.layer_sizes[-1]
        return all(j in inf.results or self._failed((self.spec.n_layers, j)) for j in range(n_out))

    def _failed(self, node) -> bool:
        m = self.members.get(node)
        return m is not None and m.status == "failed"

    def _complete(self, inf_id: int, now_us: int) -> list:
        inf = self.pending[inf_id]
        z = np.zeros(self.spec.layer_sizes[-1], dtype=np.float32)
        for j, v in inf.results.items():
            z[j] = v
        if self.spec.output_activation == "softmax":
            z = nn.activation_apply("softmax", z)
        inf.values = tuple(float(v) for v in z)
        inf.done = True
        if not self.is_primary:
            return []
        return self._publish(inf_id, now_us, "inference_completed")

    def _publish(self, inf_id: int, now_us: int, event: str) -> list:
        inf = self.pending[inf_id]
        inf.published = True
        latency = now_us - inf.requested_us
        detail = f"inf={inf_id};latency_us={latency}"
        if inf.values is not None:
            detail += ";value=" + "|".join(repr(v) for v in inf.values)
        out = [Log(event, self.name, detail), Output(inf_id, inf.values)]
        if self.has_peer:
            out.append(Send(Frame(Ack(), inference_id=inf_id, layer=COORDINATOR_LAYER, neuron=self.index)))
        return out

    # timers -----------------------------------------------------------------

    def _timer(self, key: tuple, now_us: int) -> list:
        kind = key[0]
        if kind == "hb":
            if not self.is_primary:
                return []
            self.heartbeat_counter += 1
            hb = Frame(Heartbeat(ROLE_PRIMARY, self.heartbeat_counter & 0xFFFFFFFF),
                       layer=COORDINATOR_LAYER, neuron=self.index)
            return [Send(hb), SetTimer(self.timing.heartbeat_interval_us, ("hb",))]
        if kind == "collect":
            inf = self.pending.get(key[1])
            if inf is not None and not inf.done:
                return self._complete(key[1], now_us)
            return []
        if kind == "deadline":
            inf = self.pending.get(key[1])
            if inf is None or inf.done or not self.is_primary:
                return []
            if now_us < inf.deadline_us:
                return [SetTimer(inf.deadline_us - now_us, key)]
            inf.done = True
            return self._publish(key[1], now_us, "inference_failed")
        if kind in ("suspect", "fail"):
            return self._check_member((key[1], key[2]), kind, now_us)
        if kind == "handover":
            return self._check_handover(now_us)
        return []

    def _member_heartbeat(self, node, now_us: int) -> list:
        m = self.members.get(node)
        if m is None or m.status == "failed":
            return []
        m.last_heartbeat_us = now_us
        out = []
        if m.status == "suspected":
            m.status = "alive"
            if self.is_primary:
                out.append(Log("node_recovered", node_name(node), f"by={self.name}"))
        return out

    def _check_member(self, node, kind: str, now_us: int) -> list:
        m = self.members[node]
        if m.status == "failed":
            return []
        if kind == "suspect":
            due = m.last_heartbeat_us + self.timing.suspect_after_us
            if now_us < due:
                return [SetTimer(due - now_us, ("suspect",) + node)]
            # re-armed on the next heartbeat's schedule
            out = [SetTimer(self.timing.heartbeat_interval_us, ("suspect",) + node)]
            if m.status == "alive":
                m.status = "suspected"
                if self.is_primary:
                    out.insert(0, Log("node_suspected", node_name(node), f"by={self.name}"))
            return out
        due = m.last_heartbeat_us + self.timing.detection_budget_us
        if now_us < due:
            return [SetTimer(due - now_us, ("fail",) + node)]
        m.status = "failed"
        out = []
        if self.is_primary:
            out.append(Log("node_failed", node_name(node),
                           f"by={self.name};silence_us={now_us - m.last_heartbeat_us}"))
            out.append(self._roster_frame())
            out += self._release_outputs(now_us)
        return out

    def _roster_frame(self) -> Send:
        failed = tuple(sorted(n for n, m in self.members.items() if m.status == "failed"))
        return Send(Frame(Roster(self.spec.layer_sizes, failed), layer=COORDINATOR_LAYER,
                          neuron=self.index, flags=FLAG_EXCLUDED))

    def _release_outputs(self, now_us: int) -> list:
        out = []
        for inf_id in sorted(self.pending):
            inf = self.pending[inf_id]
            if not inf.done and inf.results and self._outputs_ready(inf):
                out += self._complete(inf_id, now_us)
        return out

    def _check_handover(self, now_us: int) -> list:
        if self.is_primary:
            return []
        due = self.last_primary_heartbeat_us + self.timing.handover_timeout_us
        if now_us < due:
            return [SetTimer(due - now_us, ("handover",))]
        silence = now_us - self.last_primary_heartbeat_us
        self.role = "primary"
        out = [Log("handover_started", self.name, f"old={coordinator_name(1 - self.index)};silence_us={silence}")]
        out.append(self._roster_frame())
        for inf_id in sorted(self.pending):
            inf = self.pending[inf_id]
            if inf.published:
                continue
            if inf.done:
                out += self._publish(inf_id, now_us, "inference_replayed")
                continue
            inf.deadline_us = max(inf.deadline_us, now_us + self.timing.inference_deadline_us)
            if inf.dispatched:
                out.append(SetTimer(inf.deadline_us - now_us, ("deadline", inf_id)))
            else:
                out += self._dispatch(inf_id, now_us)
        # nodes whose silence the standby already noticed were never announced
        for node, m in sorted(self.members.items()):
            if m.status == "failed":
                out.append(Log("node_failed", node_name(node),
                               f"by={self.name};silence_us={now_us - m.last_heartbeat_us};late=1"))
        out.append(Log("handover_finished", self.name, f"pending={sum(not i.done for i in self.pending.values())}"))
        out.append(SetTimer(0, ("hb",)))
        return out


def subscribers(frame: Frame, spec: nn.NetworkSpec, n_coordinators: int) -> list[str]:
    """Actors that receive a broadcast frame; the sender is excluded by the transport."""
    body = frame.body
    coords = [coordinator_name(i) for i in range(n_coordinators)]
    layer_nodes = lambda l: [node_name((l, n)) for n in range(spec.layer_sizes[l])]  # noqa: E731
    if isinstance(body, Activation):
        if 1 <= frame.layer < spec.n_layers:
            return layer_nodes(frame.layer + 1)
        return []
    if isinstance(body, (Result, Ack)):
        return coords
    if isinstance(body, InputVector):
        return layer_nodes(1) + coords
    if isinstance(body, Heartbeat):
        return coords
    if isinstance(body, Roster):
        return [n for l in range(1, spec.n_layers + 1) for n in layer_nodes(l)] + coords
    if isinstance(body, FaultInject):
        return [node_name((body.layer, body.neuron))]
    if isinstance(body, WeightChunk):
        return [node_name((frame.layer, frame.neuron))]
    return []


__all__ = [
    "Deliver", "TimerFired", "Kill", "Request", "Send", "SetTimer", "Log", "Output", "Timing",
    "NeuronNode", "Coordinator", "subscribers", "compute_neuron", "node_name", "coordinator_name",
    "FLAG_EXCLUDED", "FLAG_LAST",
]
