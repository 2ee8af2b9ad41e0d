"""Capture loading: frame-summary JSON, classic pcap containers, and the
text canonicalizer shared by every downstream module.

Frame summaries are the rows a dissector shows for each packet
(No./Time/Source/Destination/Protocol/Length/Info).  Payload decoding is
left to the dissector; this module only reads its summary export and the
pcap container framing.
"""
from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import (
    SummaryParseError,
    TruncatedPcapError,
    UnsupportedFormatError,
    ValidationError,
)

LABELS = ("success", "fail", "unknown")
FRAME_KEYS = ("no", "time", "src", "dst", "protocol", "length", "info")
SUMMARY_KEYS = ("file_id", "label", "frames")

_NON_ALNUM = re.compile(r"[^a-z0-9]+")
_DOTTED_QUAD = re.compile(r"\b\d{1,3}(?:\.\d{1,3}){3}\b")


@dataclass(frozen=True)
class FrameRecord:
    no: int
    time: float
    src: str
    dst: str
    protocol: str
    length: int
    info: str

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in FRAME_KEYS}


@dataclass(frozen=True, order=True)
class Signature:
    """Graph node / dedup identity of a frame: protocol plus canonical info."""

    protocol: str
    text: str

    def to_dict(self) -> dict:
        return {"protocol": self.protocol, "text": self.text}

    @classmethod
    def from_dict(cls, d) -> "Signature":
        if not isinstance(d, dict) or set(d) != {"protocol", "text"}:
            raise ValidationError(f"bad signature object {d!r}", "signature")
        if not all(isinstance(d[k], str) for k in d):
            raise ValidationError("protocol/text must be strings", "signature")
        return cls(d["protocol"], d["text"])


@dataclass
class CaptureSummary:
    file_id: str
    label: str
    frames: list[FrameRecord] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "file_id": self.file_id,
            "label": self.label,
            "frames": [f.to_dict() for f in self.frames],
        }

    def frame(self, no: int) -> FrameRecord:
        for f in self.frames:
            if f.no == no:
                return f
        raise KeyError(no)


def canonicalize(info: str, drop_volatile: bool = False) -> str:
    """Lowercase ``info`` and reduce it to space-separated ``[a-z0-9]`` tokens.

    With ``drop_volatile`` set, dotted-quad addresses and pure-digit tokens
    (stream ids, status codes, subscriber numbers) are removed as well, so
    the result is stable across runs of the same call flow.
    """
    text = info.lower()
    if drop_volatile:
        text = _DOTTED_QUAD.sub(" ", text)
    tokens = _NON_ALNUM.sub(" ", text).split()
    if drop_volatile:
        tokens = [t for t in tokens if not t.isdigit()]
    return " ".join(tokens)


def signature_of(frame: FrameRecord) -> Signature:
    return Signature(frame.protocol, canonicalize(frame.info, drop_volatile=True))


# -- summary JSON -------------------------------------------------------------

def _check_type(value, kind, name):
    # bool is an int subclass; never accept it where a number is expected
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ValidationError(f"expected {getattr(kind, '__name__', kind)}, got {value!r}", name)


def _parse_frame(obj, idx: int, strict: bool) -> FrameRecord:
    where = f"frames[{idx}]"
    if not isinstance(obj, dict):
        raise ValidationError("frame must be an object", where)
    missing = [k for k in FRAME_KEYS if k not in obj]
    if missing:
        raise ValidationError(f"missing key {missing[0]!r}", f"{where}.{missing[0]}")
    extra = sorted(set(obj) - set(FRAME_KEYS))
    if strict and extra:
        raise ValidationError(f"unknown key {extra[0]!r}", f"{where}.{extra[0]}")
    _check_type(obj["no"], int, f"{where}.no")
    _check_type(obj["time"], (int, float), f"{where}.time")
    _check_type(obj["length"], int, f"{where}.length")
    for k in ("src", "dst", "protocol", "info"):
        _check_type(obj[k], str, f"{where}.{k}")
    if obj["no"] < 1:
        raise ValidationError("frame no must be >= 1", f"{where}.no")
    t = float(obj["time"])
    if not math.isfinite(t) or t < 0:
        raise ValidationError("time must be a non-negative number", f"{where}.time")
    if obj["length"] < 1:
        raise ValidationError("length must be positive", f"{where}.length")
    for k in ("protocol", "info"):
        if not obj[k]:
            raise ValidationError("must be non-empty", f"{where}.{k}")
    return FrameRecord(
        no=obj["no"], time=round(t, 6), src=obj["src"], dst=obj["dst"],
        protocol=obj["protocol"], length=obj["length"], info=obj["info"],
    )


def parse_summary(doc, strict: bool = True) -> CaptureSummary:
    """Validate an already-decoded summary object."""
    if not isinstance(doc, dict):
        raise ValidationError("summary must be a JSON object", "<root>")
    for k in SUMMARY_KEYS:
        if k not in doc:
            raise ValidationError(f"missing key {k!r}", k)
    extra = sorted(set(doc) - set(SUMMARY_KEYS))
    if strict and extra:
        raise ValidationError(f"unknown key {extra[0]!r}", extra[0])
    _check_type(doc["file_id"], str, "file_id")
    if doc["label"] not in LABELS:
        raise ValidationError(f"label must be one of {LABELS}, got {doc['label']!r}", "label")
    if not isinstance(doc["frames"], list):
        raise ValidationError("frames must be a list", "frames")

    frames = [_parse_frame(f, i, strict) for i, f in enumerate(doc["frames"])]
    if not frames and doc["label"] != "unknown":
        raise ValidationError("labeled capture has no frames", "frames")
    for i in range(1, len(frames)):
        if frames[i].no <= frames[i - 1].no:
            raise ValidationError("frame no not strictly increasing", f"frames[{i}].no")
        if frames[i].time < frames[i - 1].time:
            raise ValidationError("frame time decreases", f"frames[{i}].time")
    return CaptureSummary(doc["file_id"], doc["label"], frames)


def load_summary(path, strict: bool = True) -> CaptureSummary:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SummaryParseError(path, exc.lineno, exc.colno, exc.msg) from exc
    return parse_summary(doc, strict=strict)


def dumps_summary(capture: CaptureSummary) -> str:
    return json.dumps(capture.to_dict(), indent=1, ensure_ascii=False) + "\n"


def dump_summary(capture: CaptureSummary, path) -> None:
    Path(path).write_text(dumps_summary(capture), encoding="utf-8")


# -- classic pcap container ---------------------------------------------------

PCAP_MAGIC_US = 0xA1B2C3D4
PCAP_MAGIC_NS = 0xA1B23C4D
PCAPNG_MAGIC = 0x0A0D0D0A
GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
LINKTYPE_ETHERNET = 1


@dataclass(frozen=True)
class PcapHeader:
    byte_order: str  # "<" or ">"
    nanosecond: bool
    version: tuple[int, int]
    thiszone: int
    sigfigs: int
    snaplen: int
    linktype: int


@dataclass(frozen=True)
class PcapPacketMeta:
    index: int
    ts_sec: int
    ts_frac: int
    captured_len: int
    original_len: int


def sniff_pcap(path) -> bool:
    """True if ``path`` starts with a classic-pcap or pcapng magic."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if len(head) < 4:
        return False
    magics = {PCAP_MAGIC_US, PCAP_MAGIC_NS, PCAPNG_MAGIC}
    return struct.unpack("<I", head)[0] in magics or struct.unpack(">I", head)[0] in magics


def _parse_global_header(data: bytes) -> PcapHeader:
    if len(data) < 4:
        raise UnsupportedFormatError("file too short for a pcap header")
    for order in ("<", ">"):
        magic = struct.unpack(order + "I", data[:4])[0]
        if magic in (PCAP_MAGIC_US, PCAP_MAGIC_NS):
            break
    else:
        if struct.unpack("<I", data[:4])[0] == PCAPNG_MAGIC:
            raise UnsupportedFormatError("pcapng is not supported; convert to classic pcap")
        raise UnsupportedFormatError(f"unknown pcap magic 0x{data[:4].hex()}")
    if len(data) < GLOBAL_HEADER_LEN:
        raise UnsupportedFormatError("truncated pcap global header")
    _, vmaj, vmin, zone, sigfigs, snaplen, linktype = struct.unpack(order + "IHHiIII", data)
    return PcapHeader(order, magic == PCAP_MAGIC_NS, (vmaj, vmin), zone, sigfigs, snaplen, linktype)


def read_pcap_meta(path) -> tuple[PcapHeader, list[PcapPacketMeta]]:
    """Read per-record metadata, skipping payload bytes."""
    packets = []
    with open(path, "rb") as fh:
        header = _parse_global_header(fh.read(GLOBAL_HEADER_LEN))
        fmt = header.byte_order + "IIII"
        index = 0
        while True:
            raw = fh.read(RECORD_HEADER_LEN)
            if not raw:
                break
            index += 1
            if len(raw) < RECORD_HEADER_LEN:
                raise TruncatedPcapError(index, f"record header has {len(raw)} of 16 bytes")
            ts_sec, ts_frac, incl, orig = struct.unpack(fmt, raw)
            if incl > orig:
                raise TruncatedPcapError(index, f"captured length {incl} exceeds original {orig}")
            if incl > header.snaplen:
                raise TruncatedPcapError(index, f"captured length {incl} exceeds snaplen {header.snaplen}")
            payload = fh.read(incl)
            if len(payload) < incl:
                raise TruncatedPcapError(index, f"payload has {len(payload)} of {incl} bytes")
            packets.append(PcapPacketMeta(index, ts_sec, ts_frac, incl, orig))
    return header, packets


def _split_timestamp(ts, nanosecond: bool) -> tuple[int, int]:
    if isinstance(ts, tuple):
        return int(ts[0]), int(ts[1])
    scale = 10**9 if nanosecond else 10**6
    sec = math.floor(ts)
    frac = round((ts - sec) * scale)
    if frac >= scale:
        sec, frac = sec + 1, frac - scale
    return int(sec), int(frac)


def write_pcap(
    packets: Iterable[Sequence],
    path,
    *,
    nanosecond: bool = False,
    byte_order: str = "<",
    snaplen: int = 65535,
    linktype: int = LINKTYPE_ETHERNET,
) -> None:
    """Write a classic pcap container.

    Each packet is ``(timestamp, payload)`` or ``(timestamp, payload,
    original_len)``; ``timestamp`` is float seconds or an exact
    ``(ts_sec, ts_frac)`` pair in the file's resolution.  Payloads longer than
    ``snaplen`` are cut and keep their full original length.
    """
    if byte_order not in ("<", ">"):
        raise ValueError("byte_order must be '<' or '>'")
    magic = PCAP_MAGIC_NS if nanosecond else PCAP_MAGIC_US
    chunks = [struct.pack(byte_order + "IHHiIII", magic, 2, 4, 0, 0, snaplen, linktype)]
    last = None
    for pkt in packets:
        ts, payload = pkt[0], bytes(pkt[1])
        orig = pkt[2] if len(pkt) > 2 else len(payload)
        sec, frac = _split_timestamp(ts, nanosecond)
        if last is not None and (sec, frac) < last:
            raise ValueError("packet timestamps must be non-decreasing")
        last = (sec, frac)
        payload = payload[:snaplen]
        if orig < len(payload):
            raise ValueError("original length shorter than payload")
        chunks.append(struct.pack(byte_order + "IIII", sec, frac, len(payload), orig))
        chunks.append(payload)
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise OSError(f"cannot write pcap {path}: {exc}") from exc
