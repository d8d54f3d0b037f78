import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bftwf.sim import (
    FaultProfile,
    ScenarioInvalid,
    SimNetwork,
    _substitute,
    load_scenario,
    report_bytes,
    run_scenario,
)
from workflows import seq_spec

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def small_scenario(faults=(), **cluster):
    steps = [{"call": {"call": "loadSpecification", "spec": seq_spec(nodes=(1, 2, 3))}, "node": 1}]
    steps += [{"call": {"call": "launchCase", "specId": "seq3"}, "node": 1 + k % 3} for k in range(6)]
    steps.append({"settle": 5000})
    return {"cluster": {"n": 4, "f": 1, **cluster}, "faults": list(faults), "steps": steps,
            "stop": {"maxTime": 30000, "settle": 1000}}


# -- network primitives -------------------------------------------------------


def test_same_instant_events_follow_seeded_tiebreak():
    def order(seed):
        net = SimNetwork(seed)
        seen = []
        for k in range(8):
            net.schedule(5.0, seen.append, k)
        net.run()
        return seen

    assert order(1) == order(1)
    assert sorted(order(1)) == list(range(8))
    assert len({tuple(order(s)) for s in range(6)}) > 1


def test_cancelled_event_never_runs():
    net = SimNetwork(0)
    seen = []
    h = net.schedule(1.0, seen.append, "a")
    net.schedule(2.0, seen.append, "b")
    h.cancel()
    net.run()
    assert seen == ["b"] and net.time == 2.0


def test_drop_links_isolates_target():
    net = SimNetwork(3)
    got = []
    for i in range(3):
        net.handlers[i] = lambda data, i=i: got.append((i, data))
    net.faults.append(FaultProfile.from_dict({"target": 2, "kind": "dropLinks", "probability": 1.0}))
    net.send(0, 1, b"x")
    net.send(0, 2, b"y")
    net.send(2, 1, b"z")
    net.run()
    assert got == [(1, b"x")]


def test_delay_links_scales_latency():
    net = SimNetwork(3, latency=(2.0, 2.0))
    net.handlers[1] = lambda data: None
    net.faults.append(FaultProfile.from_dict({"target": 0, "kind": "delayLinks", "factor": 10, "window": [0, 100]}))
    net.send(0, 1, b"x")
    net.run()
    assert net.time == 20.0
    net.send(0, 1, b"x")  # still inside the window
    net.run()
    assert net.time == 40.0
    net.time = 150.0
    net.send(0, 1, b"x")
    net.run()
    assert net.time == 152.0


def test_crashed_sender_and_receiver():
    net = SimNetwork(1)
    got = []
    net.handlers[1] = got.append
    net.down.add(0)
    net.send(0, 1, b"a")
    net.down.clear()
    net.send(0, 1, b"b")
    net.down.add(1)
    net.run()
    assert got == []


def test_substitution_keeps_types():
    b = {"c": "7", "n": 3}
    assert _substitute({"x": "{c}", "y": "{c}.A.1", "z": ["{n}"], "w": "{missing}"}, b) == {
        "x": "7", "y": "7.A.1", "z": [3], "w": "{missing}"}


# -- scenario validation ------------------------------------------------------


@pytest.mark.parametrize(
    "bad",
    [
        {"cluster": {"n": 3, "f": 1}},
        {"faults": [{"target": 0, "kind": "meteorStrike"}]},
        {"faults": [{"target": 0, "kind": "corruptBlock"}, {"target": 1, "kind": "equivocateLeader"}]},
        {"steps": {"call": {}}},
    ],
)
def test_invalid_scenarios(bad):
    with pytest.raises(ScenarioInvalid):
        run_scenario(bad)


def test_step_without_action():
    with pytest.raises(ScenarioInvalid):
        run_scenario({"steps": [{"node": 1}]})


def test_tolerance_claim_can_be_waived():
    sc = {"cluster": {"claimTolerance": False},
          "faults": [{"target": 0, "kind": "corruptBlock"}, {"target": 1, "kind": "equivocateLeader"}], "steps": []}
    assert run_scenario(sc)["liveness"]["ok"]


# -- whole scenarios ----------------------------------------------------------


def test_report_shape():
    rep = run_scenario(small_scenario(), seed=1)
    assert rep["agreement"] == {"heads": True, "digests": True, "liveNodes": 4}
    assert rep["liveness"] == {"ok": True, "incomplete": []}
    assert all(v["height"] == 7 for v in rep["nodes"].values())
    assert rep["latency"]["median"] < 100
    json.dumps(rep)


@settings(max_examples=15)
@given(st.integers(0, 2**32 - 1))
def test_same_seed_same_report(seed):
    sc = small_scenario([{"target": 2, "kind": "dropLinks", "probability": 0.3, "window": [0, 200]}])
    assert report_bytes(run_scenario(sc, seed)) == report_bytes(run_scenario(sc, seed))


def test_different_seeds_different_traces():
    traces = {run_scenario(small_scenario(), s)["traceDigest"] for s in range(4)}
    assert len(traces) == 4


def test_slow_leader_is_replaced():
    rep = run_scenario(small_scenario([{"target": 0, "kind": "delayLinks", "factor": 400}]), seed=4)
    assert rep["liveness"]["ok"] and rep["agreement"]["heads"] and rep["agreement"]["digests"]
    assert all(v["view"] >= 1 for v in rep["nodes"].values() if v["alive"] and v["members"])
    assert rep["nodes"]["1"]["viewChanges"] >= 1


def test_two_crashes_exceed_tolerance_and_stall_safely():
    rep = run_scenario(load_scenario(SCENARIOS / "two-crashes.json"))
    assert rep["liveness"]["ok"] is False and rep["liveness"]["incomplete"] == [2]
    assert rep["agreement"]["heads"] and rep["agreement"]["digests"]
    assert rep["agreement"]["liveNodes"] == 2


def test_bound_names_flow_between_steps():
    rep = run_scenario(load_scenario(SCENARIOS / "byzantine-op.json"))
    steps = rep["steps"]
    assert steps[1]["entity"]["caseId"] == "2"
    assert steps[3]["error"] == "visibility-violation" and steps[3]["height"] == 3  # ordered, rejected
    assert steps[4]["error"] == "visibility-violation" and steps[4]["height"] is None  # refused locally
    assert steps[5]["entity"]["state"] == "Enabled"


@pytest.mark.parametrize("name", sorted(p.name for p in SCENARIOS.glob("*.json")))
def test_shipped_scenarios_keep_agreement(name):
    rep = run_scenario(load_scenario(SCENARIOS / name))
    assert rep["agreement"]["heads"] and rep["agreement"]["digests"]
