import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bftwf.model import SpecError, parse_spec, serialize_spec, spec_bytes, validate_spec
from oracles import end_reachable
from workflows import seq_spec


def test_three_task_sequence_parses():
    spec = parse_spec(seq_spec())
    assert [t.taskId for t in spec.tasks] == ["A", "B", "C"]
    assert [t.assignedNode for t in spec.tasks] == [0, 1, 2]
    assert len(spec.edges) == 2
    assert validate_spec(spec) == []


def test_parse_accepts_text_and_bytes():
    doc = seq_spec()
    assert parse_spec(json.dumps(doc)) == parse_spec(doc)
    assert parse_spec(json.dumps(doc).encode()) == parse_spec(doc)


def test_unknown_task_in_edge():
    doc = seq_spec()
    doc["edges"].append({"from": "C", "to": "Z"})
    with pytest.raises(SpecError) as exc:
        parse_spec(doc)
    assert exc.value.code == "unknown-task"


def test_missing_assignment():
    doc = seq_spec()
    del doc["tasks"][1]["assignedNode"]
    with pytest.raises(SpecError) as exc:
        parse_spec(doc)
    assert exc.value.code == "missing-assignment"


def test_duplicate_task_id_reported():
    doc = seq_spec()
    doc["tasks"].append({"taskId": "A", "assignedNode": 3})
    with pytest.raises(SpecError) as exc:
        parse_spec(doc)
    assert exc.value.code == "duplicate-task-id"
    assert "duplicate-task-id:A" in str(exc.value)


def test_unreachable_end_matches_graph_oracle():
    doc = seq_spec()
    doc["edges"] = [{"from": "A", "to": "B"}]  # C is cut off
    assert not end_reachable(doc)
    with pytest.raises(SpecError) as exc:
        parse_spec(doc)
    assert exc.value.code == "disconnected-graph"
    assert "unreachable-end" in str(exc.value)


def test_malformed_documents():
    for bad in ("{not json", "[]", {"specId": "x"}, {"specId": "x", "tasks": [{"assignedNode": 0}], "start": [], "end": []}):
        with pytest.raises(SpecError):
            parse_spec(bad)


def test_bad_timer_rejected():
    doc = seq_spec(timers={"A": {"trigger": "whenever", "durationMs": 10}})
    with pytest.raises(SpecError):
        parse_spec(doc)


# -- properties -------------------------------------------------------------

task_ids = st.sampled_from(list("ABCDEFG"))


@st.composite
def spec_docs(draw):
    """Arbitrary small documents, valid or not."""
    ids = draw(st.lists(task_ids, min_size=1, max_size=6))
    tasks = [
        {
            "taskId": t,
            "assignedNode": draw(st.integers(0, 4)),
            "splitType": draw(st.sampled_from(["AND", "XOR"])),
            "joinType": draw(st.sampled_from(["AND", "XOR"])),
        }
        for t in ids
    ]
    pool = ids + ["Z"]
    edges = draw(st.lists(st.tuples(st.sampled_from(pool), st.sampled_from(pool)), max_size=8))
    return {
        "specId": "p",
        "version": 1,
        "tasks": tasks,
        "edges": [{"from": a, "to": b} for a, b in edges],
        "start": draw(st.lists(st.sampled_from(ids), min_size=1, max_size=2, unique=True)),
        "end": draw(st.lists(st.sampled_from(ids), min_size=1, max_size=2, unique=True)),
    }


@given(spec_docs())
def test_validity_agrees_with_oracles(doc):
    ids = [t["taskId"] for t in doc["tasks"]]
    known = set(ids)
    endpoints_ok = all(e["from"] in known and e["to"] in known for e in doc["edges"])
    expect_ok = len(ids) == len(known) and endpoints_ok and end_reachable(doc)
    try:
        parse_spec(doc)
        ok = True
    except SpecError:
        ok = False
    assert ok == expect_ok


@given(spec_docs())
def test_round_trip_is_identity(doc):
    try:
        spec = parse_spec(doc)
    except SpecError:
        return
    again = parse_spec(serialize_spec(spec))
    assert again == spec
    assert spec_bytes(again) == spec_bytes(spec)
