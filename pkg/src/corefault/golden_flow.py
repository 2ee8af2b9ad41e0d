"""Golden Flow: a directed transition graph over frame signatures.

Every successful capture contributes the walk ``START -> f1 -> ... -> fn ->
END``.  A capture under test is replayed over the graph; the first frame
that is not a successor of the current node is the fault location, and the
successors of that node are the messages the flow should have produced.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Union

from .errors import ModelLoadError, TrainingError, ValidationError
from .ingest import CaptureSummary, Signature, signature_of

START = "START"
END = "END"
GRAPH_VERSION = 1

Node = Union[Signature, str]

CONFORMS = "conforms"
DEVIATION = "deviation"
PREMATURE_END = "premature_end"


def node_key(node: Node) -> tuple:
    if node == START:
        return (0, "", "")
    if node == END:
        return (2, "", "")
    return (1, node.protocol, node.text)


def _node_to_json(node: Node):
    return node if isinstance(node, str) else node.to_dict()


def _node_from_json(obj, allowed: tuple[str, ...]) -> Node:
    if isinstance(obj, str):
        if obj not in allowed:
            raise ModelLoadError(f"unexpected virtual node {obj!r}")
        return obj
    try:
        return Signature.from_dict(obj)
    except ValidationError as exc:
        raise ModelLoadError(str(exc)) from exc


@dataclass
class FlowGraph:
    edges: dict[Node, dict[Node, int]]
    trained_on: int
    # display text per signature (smallest raw info seen, so order-independent)
    labels: dict[Signature, str] = field(default_factory=dict)

    @property
    def nodes(self) -> set[Node]:
        out = {START, END}
        for src, succ in self.edges.items():
            out.add(src)
            out.update(succ)
        return out

    def successors(self, node: Node) -> dict[Node, int]:
        return self.edges.get(node, {})

    def label(self, node: Node) -> str:
        if isinstance(node, str):
            return node
        return self.labels.get(node, node.text)

    def ranked_successors(self, node: Node) -> list[Node]:
        """Successors ordered by observation count, most frequent first."""
        succ = self.successors(node)
        return sorted(succ, key=lambda n: (-succ[n], node_key(n)))

    def validate(self) -> None:
        for src, succ in self.edges.items():
            if src == END and succ:
                raise ValidationError("END has outgoing edges", "edges")
            for dst, count in succ.items():
                if dst == START:
                    raise ValidationError("START has incoming edges", "edges")
                if not isinstance(count, int) or count < 1:
                    raise ValidationError(f"edge count {count!r} < 1", "edges")
        seen = {START}
        stack = [START]
        while stack:
            for nxt in self.successors(stack.pop()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        unreachable = [n for n in self.nodes - seen if n != END]
        if unreachable:
            raise ValidationError(f"{len(unreachable)} node(s) unreachable from START", "edges")


@dataclass(frozen=True)
class FlowVerdict:
    status: str
    fault_frame_no: int | None = None
    observed: Signature | None = None
    expected: frozenset = frozenset()
    unknown_node: bool = False
    # node the walk stood on when it failed (START for an empty capture)
    last_node: Node | None = None


def build_graph(successes: Iterable[CaptureSummary]) -> FlowGraph:
    edges: dict[Node, dict[Node, int]] = {}
    labels: dict[Signature, str] = {}
    n = 0
    for cap in successes:
        if not cap.frames:
            raise ValidationError(f"capture {cap.file_id!r} has no frames", "frames")
        n += 1
        prev: Node = START
        for frame in cap.frames:
            sig = signature_of(frame)
            if sig not in labels or frame.info < labels[sig]:
                labels[sig] = frame.info
            succ = edges.setdefault(prev, {})
            succ[sig] = succ.get(sig, 0) + 1
            prev = sig
        succ = edges.setdefault(prev, {})
        succ[END] = succ.get(END, 0) + 1
    if n == 0:
        raise TrainingError("no success captures")
    return FlowGraph(edges, n, labels)


def check(graph: FlowGraph, capture: CaptureSummary) -> FlowVerdict:
    if graph.trained_on < 1:
        raise TrainingError("graph is untrained")
    if not capture.frames:
        return FlowVerdict(DEVIATION, 0, None, frozenset(graph.successors(START)), False, START)

    nodes = graph.nodes
    current: Node = START
    for frame in capture.frames:
        sig = signature_of(frame)
        succ = graph.successors(current)
        if sig not in succ:
            return FlowVerdict(
                DEVIATION, frame.no, sig, frozenset(succ), sig not in nodes, current,
            )
        current = sig
    succ = graph.successors(current)
    if END in succ:
        return FlowVerdict(CONFORMS)
    return FlowVerdict(
        PREMATURE_END, capture.frames[-1].no, None, frozenset(succ) - {END}, False, current,
    )


def graph_to_json(graph: FlowGraph) -> dict:
    edges = []
    for src in sorted(graph.edges, key=node_key):
        for dst in sorted(graph.edges[src], key=node_key):
            edges.append({"from": _node_to_json(src), "to": _node_to_json(dst),
                          "count": graph.edges[src][dst]})
    labels = [{**sig.to_dict(), "label": graph.labels[sig]} for sig in sorted(graph.labels)]
    return {"version": GRAPH_VERSION, "trained_on": graph.trained_on, "edges": edges, "labels": labels}


def graph_from_json(doc) -> FlowGraph:
    if not isinstance(doc, dict) or doc.get("version") != GRAPH_VERSION:
        raise ModelLoadError(f"unsupported graph version {doc.get('version') if isinstance(doc, dict) else doc!r}")
    trained_on = doc.get("trained_on")
    if isinstance(trained_on, bool) or not isinstance(trained_on, int) or trained_on < 1:
        raise ModelLoadError("trained_on must be a positive integer")
    edges: dict[Node, dict[Node, int]] = {}
    for e in doc.get("edges", []):
        if not isinstance(e, dict) or set(e) != {"from", "to", "count"}:
            raise ModelLoadError(f"bad edge record {e!r}")
        src = _node_from_json(e["from"], (START, END))
        dst = _node_from_json(e["to"], (START, END))
        count = e["count"]
        if isinstance(count, bool) or not isinstance(count, int):
            raise ModelLoadError(f"edge count must be an integer, got {count!r}")
        edges.setdefault(src, {})[dst] = count
    labels = {}
    for item in doc.get("labels", []):
        labels[Signature(item["protocol"], item["text"])] = item["label"]
    graph = FlowGraph(edges, trained_on, labels)
    graph.validate()
    return graph


def save_graph(graph: FlowGraph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_json(graph), indent=1) + "\n", encoding="utf-8")


def load_graph(path) -> FlowGraph:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"{path}: {exc}") from exc
    return graph_from_json(doc)
