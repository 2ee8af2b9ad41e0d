"""Fuse the two detectors into one fault report.

The report has the three parts a tester reads first: which frame looks
wrong, what the call flow should have done instead, and which earlier
frames (error responses, timeouts) probably caused it.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .ai_engine import NEGATIVE, ClassifierBundle, classify
from .golden_flow import CONFORMS, END, START, FlowGraph, FlowVerdict, check
from .ingest import CaptureSummary, Signature

GOLDEN_FLOW = "golden_flow"
AI_ENGINE = "ai_engine"
BOTH = "both"
EMPTY_CAPTURE_INFO = "(no frames captured)"


@dataclass(frozen=True)
class CausePattern:
    name: str
    regex: re.Pattern

    def match(self, info: str) -> str | None:
        m = self.regex.search(info)
        if m is None:
            return None
        # "{digit}xx status" patterns name themselves after the matched class
        return self.name.format(*m.groups()) if m.groups() else self.name


def _substring(s: str) -> CausePattern:
    return CausePattern(s, re.compile(re.escape(s), re.IGNORECASE))


DEFAULT_CAUSE_PATTERNS: tuple[CausePattern, ...] = (
    CausePattern(
        "{0}xx status",
        re.compile(r"\b([45])\d\d\b(?:\s+[\w-]+){0,2}?\s+(?:gateway|time-out|timeout|error)\b", re.IGNORECASE),
    ),
    _substring("problem+json"),
    _substring("reject"),
    _substring("fail"),
    _substring("time-out"),
)


@dataclass(frozen=True)
class Suspect:
    frame_no: int
    raw_info: str
    detector: str
    score: float | None = None


@dataclass(frozen=True)
class Cause:
    frame_no: int
    raw_info: str
    matched_pattern: str


@dataclass(frozen=True)
class ExpectedMessage:
    signature: Signature
    label: str
    then: tuple[str, ...] = ()


@dataclass(frozen=True)
class ExpectedTransition:
    source: Signature | None  # None stands for the start of the flow
    source_label: str
    to: tuple[ExpectedMessage, ...]


@dataclass
class FaultReport:
    file_id: str
    verdict: str
    flow_status: str
    suspicious: list[Suspect] = field(default_factory=list)
    expected_transition: ExpectedTransition | None = None
    possible_causes: list[Cause] = field(default_factory=list)

    def to_dict(self) -> dict:
        et = self.expected_transition
        return {
            "file_id": self.file_id,
            "verdict": self.verdict,
            "flow_status": self.flow_status,
            "suspicious": [
                {"frame_no": s.frame_no, "raw_info": s.raw_info, "detector": s.detector, "score": s.score}
                for s in self.suspicious
            ],
            "expected_transition": None if et is None else {
                "from": START if et.source is None else et.source.to_dict(),
                "from_label": et.source_label,
                "to": [{**m.signature.to_dict(), "label": m.label, "then": list(m.then)} for m in et.to],
            },
            "possible_causes": [
                {"frame_no": c.frame_no, "raw_info": c.raw_info, "matched_pattern": c.matched_pattern}
                for c in self.possible_causes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaultReport":
        et = d.get("expected_transition")
        transition = None
        if et is not None:
            src = et["from"]
            transition = ExpectedTransition(
                None if src == START else Signature.from_dict(src),
                et["from_label"],
                tuple(
                    ExpectedMessage(Signature(m["protocol"], m["text"]), m["label"], tuple(m["then"]))
                    for m in et["to"]
                ),
            )
        return cls(
            file_id=d["file_id"],
            verdict=d["verdict"],
            flow_status=d["flow_status"],
            suspicious=[Suspect(**s) for s in d["suspicious"]],
            expected_transition=transition,
            possible_causes=[Cause(**c) for c in d["possible_causes"]],
        )


def find_possible_causes(
    capture: CaptureSummary,
    fault_frame_no: int,
    window: int = 10,
    patterns: tuple[CausePattern, ...] = DEFAULT_CAUSE_PATTERNS,
) -> list[Cause]:
    """Error-bearing frames among the ``window`` frames preceding the fault.

    Matching runs on raw info text because signatures drop status codes.
    The fault frame itself is not a candidate.
    """
    pos = next((i for i, f in enumerate(capture.frames) if f.no == fault_frame_no), None)
    if pos is None:
        raise KeyError(f"frame {fault_frame_no} not in capture {capture.file_id}")
    causes = []
    for f in capture.frames[max(0, pos - window):pos]:
        for p in patterns:
            name = p.match(f.info)
            if name:
                causes.append(Cause(f.no, f.info, name))
                break
    return causes


def _expected_transition(graph: FlowGraph, verdict: FlowVerdict) -> ExpectedTransition:
    def then(node) -> tuple[str, ...]:
        return tuple("end of flow" if n == END else graph.label(n) for n in graph.ranked_successors(node))

    source = verdict.last_node
    ranked = [n for n in graph.ranked_successors(source) if n in verdict.expected]
    return ExpectedTransition(
        None if source == START else source,
        "start of flow" if source == START else graph.label(source),
        tuple(ExpectedMessage(n, graph.label(n), then(n)) for n in ranked),
    )


def analyze(
    graph: FlowGraph,
    bundle: ClassifierBundle,
    capture: CaptureSummary,
    window: int = 10,
    patterns: tuple[CausePattern, ...] = DEFAULT_CAUSE_PATTERNS,
) -> FaultReport:
    verdict = check(graph, capture)
    flagged = {}
    for frame in capture.frames:
        pred = classify(bundle, frame)
        if pred.label == NEGATIVE:
            flagged[frame.no] = pred.score

    suspicious = []
    gf_no = None
    if verdict.status != CONFORMS:
        gf_no = verdict.fault_frame_no
        if capture.frames:
            info = capture.frame(gf_no).info
        else:
            info = EMPTY_CAPTURE_INFO
        detector = BOTH if gf_no in flagged else GOLDEN_FLOW
        suspicious.append(Suspect(gf_no, info, detector, flagged.get(gf_no)))
    for frame in capture.frames:
        if frame.no in flagged and frame.no != gf_no:
            suspicious.append(Suspect(frame.no, frame.info, AI_ENGINE, flagged[frame.no]))

    transition = None if verdict.status == CONFORMS else _expected_transition(graph, verdict)
    causes = []
    first = min((s.frame_no for s in suspicious), default=0)
    if first > 0:
        causes = find_possible_causes(capture, first, window, patterns)
    return FaultReport(
        file_id=capture.file_id,
        verdict="faulty" if suspicious else "clean",
        flow_status=verdict.status,
        suspicious=suspicious,
        expected_transition=transition,
        possible_causes=causes,
    )


def _item_letter(i: int) -> str:
    return chr(ord("a") + i) if i < 26 else str(i + 1)


def render_text(report: FaultReport) -> str:
    lines = [f"Fault report: {report.file_id}"]
    if report.verdict == "clean":
        lines.append("No faults detected.")
        return "\n".join(lines) + "\n"
    for i, s in enumerate(report.suspicious):
        prefix = "1) " if i == 0 else "   "
        lines.append(f"{prefix}Suspicious Message: {s.raw_info} at frame:{s.frame_no} (detector: {s.detector})")
    et = report.expected_transition
    if et is None or not et.to:
        lines.append("2) Expected messages: none (call flow conforms)")
    else:
        parts = []
        for m in et.to:
            parts.append(f"{m.label} to {' or '.join(m.then)}" if m.then else m.label)
        lines.append(f"2) Expected messages: {'; '.join(parts)}")
        lines.append(f"   after: {et.source_label}")
    if not report.possible_causes:
        lines.append("3) Possible causes: none found")
    else:
        lines.append("3) Possible causes:")
        for i, c in enumerate(report.possible_causes):
            lines.append(f"   {_item_letter(i)}) {c.frame_no} {c.raw_info}")
    return "\n".join(lines) + "\n"


def render_json(report: FaultReport) -> str:
    return json.dumps(report.to_dict(), indent=1, ensure_ascii=False) + "\n"


def render_report(report: FaultReport, fmt: str = "text") -> str:
    if fmt == "text":
        return render_text(report)
    if fmt == "json":
        return render_json(report)
    raise ValueError(f"unknown report format {fmt!r}")
