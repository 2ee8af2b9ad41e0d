import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corefault.errors import ModelLoadError, TrainingError, ValidationError
from corefault.golden_flow import (
    CONFORMS,
    DEVIATION,
    END,
    PREMATURE_END,
    START,
    FlowGraph,
    build_graph,
    check,
    graph_from_json,
    graph_to_json,
    load_graph,
    save_graph,
)
from corefault.ingest import CaptureSummary, FrameRecord, Signature


def cap(*infos, label="success", file_id="c", protocol="P"):
    frames = [FrameRecord(i + 1, float(i), "a", "b", protocol, 10, info) for i, info in enumerate(infos)]
    return CaptureSummary(file_id, label, frames)


def sig(text, protocol="P"):
    return Signature(protocol, text)


def test_linear_flow_conforms():
    g = build_graph([cap("A", "B", "C")])
    assert check(g, cap("A", "B", "C")).status == CONFORMS
    assert g.successors(START) == {sig("a"): 1}
    assert g.successors(sig("c")) == {END: 1}


def test_deviation_reports_frame_and_expected():
    g = build_graph([cap("A", "B", "C"), cap("A", "D", "C")])
    v = check(g, cap("A", "X", "C"))
    assert v.status == DEVIATION and v.fault_frame_no == 2
    assert v.expected == {sig("b"), sig("d")}
    assert v.unknown_node and v.observed == sig("x") and v.last_node == sig("a")


def test_known_node_in_wrong_place_is_not_unknown():
    g = build_graph([cap("A", "B", "C")])
    v = check(g, cap("A", "C"))
    assert v.status == DEVIATION and not v.unknown_node and v.expected == {sig("b")}


def test_premature_end():
    g = build_graph([cap("A", "B", "C")])
    v = check(g, cap("A", "B"))
    assert v.status == PREMATURE_END and v.fault_frame_no == 2 and v.expected == {sig("c")}


def test_empty_capture_is_deviation_at_zero():
    g = build_graph([cap("A")])
    v = check(g, CaptureSummary("e", "unknown", []))
    assert v.status == DEVIATION and v.fault_frame_no == 0 and v.expected == {sig("a")}


def test_loops_are_allowed():
    g = build_graph([cap("A", "B", "A", "B", "C")])
    assert check(g, cap("A", "B", "C")).status == CONFORMS
    assert check(g, cap("A", "B", "A", "B", "A", "B", "C")).status == CONFORMS


def test_edge_counts_and_ranking():
    g = build_graph([cap("A", "B"), cap("A", "B"), cap("A", "C")])
    assert g.successors(sig("a")) == {sig("b"): 2, sig("c"): 1}
    assert g.ranked_successors(sig("a")) == [sig("b"), sig("c")]
    assert g.trained_on == 3


def test_volatile_tokens_share_a_node():
    g = build_graph([cap("HEADERS[1]: 201 Created", "imsi-2089300001 ok")])
    assert check(g, cap("HEADERS[7]: 201 Created", "imsi-2089399999 ok")).status == CONFORMS


def test_no_success_captures():
    with pytest.raises(TrainingError):
        build_graph([])


def test_empty_success_capture_rejected():
    with pytest.raises(ValidationError):
        build_graph([CaptureSummary("e", "success", [])])


def test_untrained_graph():
    with pytest.raises(TrainingError):
        check(FlowGraph({}, 0), cap("A"))


def test_labels_use_smallest_raw_info():
    g = build_graph([cap("HEADERS[9]: 201 Created"), cap("HEADERS[1]: 201 Created")])
    assert g.label(sig("headers created")) == "HEADERS[1]: 201 Created"
    assert g.label(END) == END


def test_json_round_trip(tmp_path):
    g = build_graph([cap("A", "B"), cap("A", "C", "B")])
    save_graph(g, tmp_path / "g.json")
    again = load_graph(tmp_path / "g.json")
    assert again.edges == g.edges and again.labels == g.labels
    assert json.dumps(graph_to_json(again)) == json.dumps(graph_to_json(g))


def test_load_rejects_bad_documents(tmp_path):
    good = graph_to_json(build_graph([cap("A")]))
    with pytest.raises(ModelLoadError):
        graph_from_json({**good, "version": 99})
    with pytest.raises(ModelLoadError):
        graph_from_json({**good, "trained_on": 0})
    with pytest.raises(ModelLoadError):
        graph_from_json({**good, "edges": [{"from": "MIDDLE", "to": "END", "count": 1}]})
    with pytest.raises(ValidationError):
        graph_from_json({**good, "edges": good["edges"] + [{"from": "END", "to": {"protocol": "P", "text": "a"},
                                                              "count": 1}]})
    with pytest.raises(ValidationError, match="unreachable"):
        graph_from_json({**good, "edges": good["edges"] + [
            {"from": {"protocol": "P", "text": "z"}, "to": "END", "count": 1}]})
    p = tmp_path / "broken.json"
    p.write_text("{", encoding="utf-8")
    with pytest.raises(ModelLoadError):
        load_graph(p)


flows = st.lists(st.lists(st.sampled_from("ABCDEF"), min_size=1, max_size=8), min_size=1, max_size=6)


@given(flows)
@settings(max_examples=100)
def test_every_training_flow_conforms(training):
    g = build_graph([cap(*f, file_id=str(i)) for i, f in enumerate(training)])
    for f in training:
        assert check(g, cap(*f)).status == CONFORMS
    g.validate()


@given(flows, st.randoms(use_true_random=False))
@settings(max_examples=60)
def test_graph_is_order_invariant(training, rnd):
    caps = [cap(*f, file_id=str(i)) for i, f in enumerate(training)]
    shuffled = list(caps)
    rnd.shuffle(shuffled)
    assert json.dumps(graph_to_json(build_graph(caps))) == json.dumps(graph_to_json(build_graph(shuffled)))


@given(flows, st.lists(st.sampled_from("ABCDEFG"), min_size=1, max_size=8))
@settings(max_examples=100)
def test_deviation_is_first_illegal_step(training, probe):
    """The reported frame equals a hand walk over the edge sets."""
    g = build_graph([cap(*f) for f in training])
    edges = set()
    for f in training:
        walk = [START] + list(f) + [END]
        edges.update(zip(walk, walk[1:]))
    prev = START
    expected = None
    for i, x in enumerate(probe):
        if (prev, x) not in edges:
            expected = (DEVIATION, i + 1)
            break
        prev = x
    else:
        expected = (CONFORMS, None) if (prev, END) in edges else (PREMATURE_END, len(probe))
    v = check(g, cap(*probe))
    assert (v.status, v.fault_frame_no) == expected
