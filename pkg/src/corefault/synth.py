"""Deterministic synthetic call-flow corpora.

Flow templates live in ``corefault/templates/*.json``.  Each file holds::

    {
      "name": str,
      "roles": [role, ...],                 # actors that get an address
      "steps": [step, ...],                 # the successful call flow
      "success_variants": [                 # alternative successful paths
        {"name": str, "start": int, "end": int, "steps": [step, ...]}, ...],
      "fault_variants": [
        {"name": str, "step": int, "causes": [step, ...], "fault": step}, ...]
    }

    step = {"protocol": str, "info": str, "src": role, "dst": role,
            "length": int, "delay": seconds-after-previous-frame}

``info`` may contain ``{imsi}`` and ``{ref}`` placeholders; both expand to
digit strings fixed per capture.  A success variant replaces
``steps[start:end]``.  A fault variant keeps ``steps[:step]``, appends its
cause frames and then the fault frame, and ends the capture there.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import SpecError
from .ingest import CaptureSummary, FrameRecord, dump_summary, write_pcap

TEMPLATE_NAMES = ("registration", "pdu_session", "deregistration")


@dataclass(frozen=True)
class Step:
    protocol: str
    info: str
    src: str
    dst: str
    length: int
    delay: float = 0.0


@dataclass(frozen=True)
class SuccessVariant:
    name: str
    start: int
    end: int
    steps: tuple[Step, ...]


@dataclass(frozen=True)
class FaultVariant:
    name: str
    step: int
    causes: tuple[Step, ...]
    fault: Step


@dataclass(frozen=True)
class FlowTemplate:
    name: str
    roles: tuple[str, ...]
    steps: tuple[Step, ...]
    success_variants: tuple[SuccessVariant, ...] = ()
    fault_variants: tuple[FaultVariant, ...] = ()

    def fault_variant(self, name: str) -> FaultVariant:
        for v in self.fault_variants:
            if v.name == name:
                return v
        raise SpecError(f"template {self.name!r} has no fault variant {name!r}")

    def success_path(self, variant: str | None = None) -> list[Step]:
        if variant is None:
            return list(self.steps)
        for v in self.success_variants:
            if v.name == variant:
                return list(self.steps[: v.start]) + list(v.steps) + list(self.steps[v.end:])
        raise SpecError(f"template {self.name!r} has no success variant {variant!r}")

    def fail_path(self, variant: str) -> list[Step]:
        v = self.fault_variant(variant)
        return list(self.steps[: v.step]) + list(v.causes) + [v.fault]


def _step(d: dict) -> Step:
    return Step(d["protocol"], d["info"], d["src"], d["dst"], int(d["length"]), float(d.get("delay", 0.0)))


def parse_template(doc: dict) -> FlowTemplate:
    steps = tuple(_step(s) for s in doc["steps"])
    if not steps:
        raise SpecError(f"template {doc.get('name')!r} has no steps")
    roles = tuple(doc["roles"])
    tmpl = FlowTemplate(
        name=doc["name"],
        roles=roles,
        steps=steps,
        success_variants=tuple(
            SuccessVariant(v["name"], v["start"], v["end"], tuple(_step(s) for s in v["steps"]))
            for v in doc.get("success_variants", [])
        ),
        fault_variants=tuple(
            FaultVariant(v["name"], v["step"], tuple(_step(s) for s in v["causes"]), _step(v["fault"]))
            for v in doc.get("fault_variants", [])
        ),
    )
    for fv in tmpl.fault_variants:
        if not 0 <= fv.step < len(steps):
            raise SpecError(f"{tmpl.name}/{fv.name}: fault step {fv.step} out of range")
        first = (fv.causes or (fv.fault,))[0]
        if first.info == steps[fv.step].info:
            raise SpecError(f"{tmpl.name}/{fv.name}: first injected frame equals the template step")
    for s in list(steps) + [s for v in tmpl.success_variants for s in v.steps] + [
        s for v in tmpl.fault_variants for s in (*v.causes, v.fault)
    ]:
        if s.src not in roles or s.dst not in roles:
            raise SpecError(f"{tmpl.name}: step {s.info!r} uses an undeclared role")
    return tmpl


def load_template(name: str) -> FlowTemplate:
    text = resources.files("corefault.templates").joinpath(f"{name}.json").read_text(encoding="utf-8")
    return parse_template(json.loads(text))


def load_templates() -> dict[str, FlowTemplate]:
    return {name: load_template(name) for name in TEMPLATE_NAMES}


@dataclass
class CorpusSpec:
    """``success`` maps template -> count; ``fail`` maps ``"template/variant"`` -> count."""

    success: dict[str, int] = field(default_factory=dict)
    fail: dict[str, int] = field(default_factory=dict)
    seed: int = 7
    jitter: float = 0.004
    ip_pool: int = 32
    pcap: bool = False

    @property
    def total(self) -> int:
        return sum(self.success.values()) + sum(self.fail.values())

    def validate(self, templates: dict[str, FlowTemplate]) -> None:
        for key, n in list(self.success.items()) + list(self.fail.items()):
            if n < 0:
                raise SpecError(f"negative count for {key!r}")
        if self.jitter < 0:
            raise SpecError("jitter must be >= 0")
        if self.total == 0:
            raise SpecError("corpus spec produces zero files")
        for name in self.success:
            if name not in templates:
                raise SpecError(f"unknown template {name!r}")
        for key in self.fail:
            name, _, variant = key.partition("/")
            if name not in templates:
                raise SpecError(f"unknown template {name!r}")
            templates[name].fault_variant(variant)
        needed = max(len(t.roles) for t in templates.values())
        if self.ip_pool < needed:
            raise SpecError(f"ip_pool {self.ip_pool} smaller than the {needed} roles of a flow")


def _spread(total: int, keys: list[str]) -> dict[str, int]:
    base, extra = divmod(total, len(keys))
    return {k: base + (i < extra) for i, k in enumerate(keys)}


def default_spec(scale: str = "tiny", seed: int = 7) -> CorpusSpec:
    """``paper_shape``: 58 success / 140 fail; ``tiny``: 6 / 12.

    Files are spread evenly over the three templates and then over each
    template's fault variants, earlier entries taking any remainder.
    """
    sizes = {"tiny": (6, 12), "paper_shape": (58, 140)}
    if scale not in sizes:
        raise SpecError(f"unknown scale {scale!r}; choose from {sorted(sizes)}")
    n_success, n_fail = sizes[scale]
    templates = load_templates()
    success = _spread(n_success, list(TEMPLATE_NAMES))
    fail: dict[str, int] = {}
    for name, n in _spread(n_fail, list(TEMPLATE_NAMES)).items():
        keys = [f"{name}/{v.name}" for v in templates[name].fault_variants]
        fail.update(_spread(n, keys))
    return CorpusSpec(success=success, fail=fail, seed=seed)


def _address_pool(size: int) -> list[str]:
    return [f"{i}.0.0.{i}" for i in range(1, size + 1)]


def render_capture(
    template: FlowTemplate,
    steps: list[Step],
    file_id: str,
    label: str,
    seed: int,
    jitter: float = 0.004,
    ip_pool: int = 32,
) -> CaptureSummary:
    """Instantiate a step list: endpoints, placeholder values, times, lengths."""
    rng = random.Random(f"{seed}:{file_id}")
    addrs = dict(zip(template.roles, rng.sample(_address_pool(ip_pool), len(template.roles))))
    values = {
        "imsi": "20893" + "".join(rng.choice("0123456789") for _ in range(10)),
        "ref": str(rng.randint(1, 99999)),
    }
    frames = []
    t = 0.0
    for no, step in enumerate(steps, start=1):
        t = round(t + step.delay + rng.uniform(0.0, jitter), 6)
        frames.append(FrameRecord(
            no=no,
            time=t,
            src=addrs[step.src],
            dst=addrs[step.dst],
            protocol=step.protocol,
            length=max(1, step.length + rng.randint(-1, 1)),
            info=step.info.format(**values),
        ))
    return CaptureSummary(file_id, label, frames)


def _pcap_payloads(capture: CaptureSummary):
    for f in capture.frames:
        yield f.time, bytes(f.length)


def plan(spec: CorpusSpec, templates: dict[str, FlowTemplate]) -> list[dict]:
    """File list in output order, without rendering anything."""
    entries = []
    for name in sorted(spec.success):
        tmpl = templates[name]
        cycle = [None] + [v.name for v in tmpl.success_variants]
        for i in range(spec.success[name]):
            entries.append({
                "file_id": f"{name}_success_{i:03d}",
                "label": "success",
                "template": name,
                "success_variant": cycle[i % len(cycle)],
                "fault_variant": None,
            })
    for key in sorted(spec.fail):
        name, _, variant = key.partition("/")
        for i in range(spec.fail[key]):
            entries.append({
                "file_id": f"{name}_{variant}_{i:03d}",
                "label": "fail",
                "template": name,
                "success_variant": None,
                "fault_variant": variant,
            })
    return entries


def generate(spec: CorpusSpec, out_dir) -> list[dict]:
    """Write one summary JSON per capture plus ``manifest.json``; returns the manifest."""
    templates = load_templates()
    spec.validate(templates)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = []
    for entry in plan(spec, templates):
        tmpl = templates[entry["template"]]
        if entry["label"] == "success":
            steps = tmpl.success_path(entry["success_variant"])
        else:
            steps = tmpl.fail_path(entry["fault_variant"])
        cap = render_capture(tmpl, steps, entry["file_id"], entry["label"],
                             spec.seed, spec.jitter, spec.ip_pool)
        path = f"{entry['file_id']}.json"
        dump_summary(cap, out / path)
        record = {"path": path, "label": entry["label"], "template": entry["template"],
                  "fault_variant": entry["fault_variant"],
                  "success_variant": entry["success_variant"]}
        if spec.pcap:
            write_pcap(_pcap_payloads(cap), out / f"{entry['file_id']}.pcap")
            record["pcap"] = f"{entry['file_id']}.pcap"
        manifest.append(record)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return manifest


def load_manifest(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    entries = json.loads(path.read_text(encoding="utf-8"))
    for e in entries:
        e["abspath"] = str(path.parent / e["path"])
    return entries


def congestion_scenario(seed: int = 7) -> CaptureSummary:
    """The registration flow rejected for congestion after two 504 responses."""
    tmpl = load_template("registration")
    return render_capture(tmpl, tmpl.fail_path("congestion"), "registration_congestion_scripted", "fail", seed)
