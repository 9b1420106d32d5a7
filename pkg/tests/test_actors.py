import numpy as np
import pytest

from ftnet import nn
from ftnet.runtime.actors import (FLAG_EXCLUDED, Coordinator, Deliver, Kill, Log, NeuronNode, Output, Request, Send,
                                  SetTimer, TimerFired, Timing, compute_neuron, subscribers)
from ftnet.wire import (COORDINATOR_LAYER, Activation, FaultInject, Frame, Heartbeat, InputVector, NeuronParams,
                        Result, Roster, chunk_weight_load)
from oracles import py_forward

TIMING = Timing()


def _params(fan_in=10, seed=0, act="relu", layer=2, neuron=4):
    r = np.random.default_rng(seed)
    return NeuronParams(layer, neuron, r.normal(size=fan_in).astype(np.float32), np.float32(r.normal()), act)


def _act(inf, layer, neuron, value):
    return Deliver(Frame(Activation(float(np.float32(value))), inference_id=inf, layer=layer, neuron=neuron))


def _sends(out):
    return [e.frame for e in out if isinstance(e, Send)]


def _node(p, is_output=False):
    return NeuronNode(p.layer, p.neuron, p, p.fan_in, is_output, TIMING)


def test_full_fan_in_matches_loop_oracle():
    p = _params(seed=1)
    node = _node(p)
    x = np.random.default_rng(2).normal(size=10).astype(np.float32)
    out = []
    for i in np.random.default_rng(3).permutation(10):
        out = node.handle(_act(5, 1, int(i), x[i]), 100 + int(i))
    (frame,) = _sends(out)
    want = py_forward([p.weights[None, :], np.ones((1, 1))], [np.array([p.bias]), np.zeros(1)], x,
                      dtype=np.float32)
    # hidden relu applies only to the first layer of this two-layer oracle
    assert np.float32(frame.body.value) == np.float32(max(0.0, want[0]))
    assert (frame.inference_id, frame.layer, frame.neuron) == (5, 2, 4)
    assert np.float32(frame.body.value) == compute_neuron(p, x)


def test_barrier_timeout_zero_fills():
    p = _params(seed=4)
    node = _node(p)
    x = np.random.default_rng(5).normal(size=10).astype(np.float32)
    out = []
    for i in range(10):
        if i == 6:
            continue
        out += node.handle(_act(1, 1, i, x[i]), 10)
    assert not _sends(out)
    assert SetTimer(TIMING.layer_timeout_us, ("barrier", 1)) in out
    out = node.handle(TimerFired(("barrier", 1)), 50_010)
    (frame,) = _sends(out)
    x0 = x.copy()
    x0[6] = 0
    assert np.float32(frame.body.value) == compute_neuron(p, x0)
    assert any(isinstance(e, Log) and e.event == "barrier_timeout" and "missing=6" in e.detail for e in out)


def test_duplicates_and_late_frames_are_idempotent():
    p = _params(seed=6)
    node = _node(p)
    out = []
    for i in range(10):
        out += node.handle(_act(2, 1, i, 0.5), 0)
        out += node.handle(_act(2, 1, i, 9.0), 0)
    assert len(_sends(out)) == 1
    assert np.float32(_sends(out)[0].body.value) == compute_neuron(p, np.full(10, 0.5, np.float32))
    late = node.handle(_act(2, 1, 3, 1.0), 5)
    assert not _sends(late) and late[0].event == "late_frame_dropped"
    assert node.handle(TimerFired(("barrier", 2)), 60_000) == []


def test_killed_node_never_emits():
    p = _params(seed=7)
    for kill in (Kill(), Deliver(Frame(FaultInject(2, 4)))):
        node = _node(p)
        node.handle(kill, 0)
        out = []
        for i in range(10):
            out += node.handle(_act(3, 1, i, 1.0), 1)
        out += node.handle(TimerFired(("hb",)), 2) + node.handle(TimerFired(("barrier", 3)), 60_000)
        assert out == [] and not node.alive


def test_fault_inject_for_other_node_ignored():
    node = _node(_params(seed=7))
    node.handle(Deliver(Frame(FaultInject(2, 5))), 0)
    assert node.alive


def test_roster_exclusion_fires_early_and_unions():
    p = _params(seed=8)
    node = _node(p)
    out = []
    for i in range(8):
        out += node.handle(_act(4, 1, i, 1.0), 0)
    assert not _sends(out)
    roster = lambda nodes: Deliver(Frame(Roster((10, 10, 10, 1), nodes), layer=COORDINATOR_LAYER,  # noqa: E731
                                         flags=FLAG_EXCLUDED))
    assert not _sends(node.handle(roster(((1, 8),)), 1))
    out = node.handle(roster(((1, 9), (2, 0))), 2)
    (frame,) = _sends(out)
    assert node.excluded == {8, 9}
    x = np.ones(10, np.float32)
    x[8:] = 0
    assert np.float32(frame.body.value) == compute_neuron(p, x)
    # an older roster arriving late cannot un-exclude
    node.handle(roster(((1, 8),)), 3)
    assert node.excluded == {8, 9}


def test_input_layer_node_fires_on_input_vector():
    p = _params(seed=9, layer=1, neuron=0)
    node = _node(p)
    x = tuple(float(v) for v in np.linspace(-1, 1, 10, dtype=np.float32))
    out = node.handle(Deliver(Frame(InputVector(x), inference_id=8, layer=COORDINATOR_LAYER)), 0)
    (frame,) = _sends(out)
    assert np.float32(frame.body.value) == compute_neuron(p, np.array(x, np.float32))
    bad = node.handle(Deliver(Frame(InputVector((1.0,)), inference_id=9, layer=COORDINATOR_LAYER)), 0)
    assert bad[0].event == "frame_rejected"


def test_output_node_sends_result():
    p = _params(seed=10, act="linear", layer=3, neuron=0)
    node = _node(p, is_output=True)
    out = []
    for i in range(10):
        out += node.handle(_act(0, 2, i, 0.25), 0)
    (frame,) = _sends(out)
    assert isinstance(frame.body, Result)


def test_weights_loaded_from_chunks():
    p = _params(fan_in=120, seed=11)
    node = NeuronNode(2, 4, None, 120, False, TIMING)
    out = []
    for f in reversed(chunk_weight_load(p)):
        out += node.handle(Deliver(f), 0)
    assert node.params.equal(p)
    assert out[-1].event == "weights_loaded"


def test_heartbeat_schedule():
    node = NeuronNode(1, 2, _params(layer=1, neuron=2), 10, False, TIMING, heartbeat_phase_us=7)
    assert node.start(0) == [SetTimer(7, ("hb",))]
    out = node.handle(TimerFired(("hb",)), 7)
    assert isinstance(out[0].frame.body, Heartbeat) and out[0].frame.body.counter == 1
    assert out[1] == SetTimer(25_000, ("hb",))


def _run_timers(actor, until_us, start=0):
    """Drive an actor's own timers until ``until_us``; returns all emissions with times."""
    queue = [(e.delay_us + start, e.key) for e in actor.start(start) if isinstance(e, SetTimer)]
    log = []
    while queue:
        queue.sort()
        t, key = queue.pop(0)
        if t > until_us:
            break
        for e in actor.handle(TimerFired(key), t):
            log.append((t, e))
            if isinstance(e, SetTimer):
                queue.append((t + e.delay_us, e.key))
    return log


def test_coordinator_detects_silent_node_at_budget():
    spec = nn.NetworkSpec((2, 1, 1))
    c = Coordinator(spec, TIMING)
    log = _run_timers(c, 200_000)
    failed = [(t, e) for t, e in log if isinstance(e, Log) and e.event == "node_failed"]
    assert {e.subject for _, e in failed} == {"1:0", "2:0"}
    assert all(t == 50_000 for t, _ in failed)
    suspected = [t for t, e in log if isinstance(e, Log) and e.event == "node_suspected"]
    assert suspected and all(t == 37_500 for t in suspected)


def test_coordinator_heartbeats_keep_members_alive():
    spec = nn.NetworkSpec((2, 1, 1))
    c = Coordinator(spec, TIMING)
    c.start(0)
    for t in range(0, 300_000, 25_000):
        for node in ((1, 0), (2, 0)):
            c.handle(Deliver(Frame(Heartbeat(0, t), layer=node[0], neuron=node[1])), t)
        for key in (("suspect", 1, 0), ("fail", 1, 0), ("suspect", 2, 0), ("fail", 2, 0)):
            c.handle(TimerFired(key), t + 1)
    assert all(m.status == "alive" for m in c.members.values())


def test_coordinator_completes_and_fails_inferences():
    spec = nn.NetworkSpec((2, 1, 1))
    c = Coordinator(spec, TIMING)
    c.start(0)
    out = c.handle(Request(0, (0.5, -0.5)), 10)
    (dispatch,) = _sends(out)
    assert isinstance(dispatch.body, InputVector) and dispatch.layer == COORDINATOR_LAYER
    out = c.handle(Deliver(Frame(Result((1.25,)), inference_id=0, layer=2, neuron=0)), 20)
    assert Output(0, (1.25,)) in out
    c.handle(Request(1, (0.0, 0.0)), 30)
    out = c.handle(TimerFired(("deadline", 1)), 30 + TIMING.inference_deadline_us)
    assert Output(1, None) in out
    assert any(isinstance(e, Log) and e.event == "inference_failed" for e in out)


def test_softmax_applied_at_coordinator():
    spec = nn.NetworkSpec((2, 1, 3), output_activation="softmax")
    c = Coordinator(spec, TIMING)
    c.start(0)
    c.handle(Request(0, (0.0, 0.0)), 0)
    out = []
    for j, z in enumerate((1.0, 2.0, 3.0)):
        out += c.handle(Deliver(Frame(Result((z,)), inference_id=0, layer=2, neuron=j)), 5)
    (o,) = [e for e in out if isinstance(e, Output)]
    e = np.exp(np.array([1.0, 2.0, 3.0]) - 3.0)
    np.testing.assert_allclose(o.values, e / e.sum(), rtol=1e-6)


def test_standby_promotes_after_handover_timeout():
    spec = nn.NetworkSpec((2, 1, 1))
    s = Coordinator(spec, TIMING, index=1, has_peer=True)
    log = _run_timers(s, 400_000)
    started = [t for t, e in log if isinstance(e, Log) and e.event == "handover_started"]
    assert started == [200_000] and s.is_primary


def test_subscribers():
    spec = nn.REFERENCE_SPEC
    assert subscribers(Frame(Activation(1.0), layer=1, neuron=0), spec, 2) == [f"2:{i}" for i in range(10)]
    assert subscribers(Frame(Activation(1.0), layer=3, neuron=0), spec, 2) == []
    assert subscribers(Frame(Result((1.0,)), layer=3), spec, 2) == ["coord:0", "coord:1"]
    assert len(subscribers(Frame(InputVector((0.0,) * 10)), spec, 1)) == 11
    assert len(subscribers(Frame(Roster((10,), ())), spec, 2)) == 23
