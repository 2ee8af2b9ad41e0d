import socket
from pathlib import Path

import pytest

from corefault import ai_engine, golden_flow, synth
from corefault.ingest import load_summary

DATA = Path(__file__).parent / "data"

# criterion number -> (title, passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}
ACCEPTANCE_COUNT = 10


@pytest.fixture
def acceptance():
    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE[number] = (title, bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, ACCEPTANCE_COUNT + 1):
        if n in ACCEPTANCE:
            title, ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d} {title}: {detail}")
        else:
            terminalreporter.write_line(f"[FAIL] {n:2d} (not reached)")


@pytest.fixture
def no_network(monkeypatch):
    """Any socket creation or connection attempt fails the test."""

    class Blocked(socket.socket):
        def __init__(self, *a, **kw):
            raise AssertionError("network access attempted")

    def refuse(*a, **kw):
        raise AssertionError("network access attempted")

    monkeypatch.setattr(socket, "socket", Blocked)
    monkeypatch.setattr(socket, "create_connection", refuse)
    monkeypatch.setattr(socket, "getaddrinfo", refuse)


def _load(dir_):
    entries = synth.load_manifest(dir_)
    caps = [(e, load_summary(e["abspath"])) for e in entries]
    return (
        [c for e, c in caps if e["label"] == "success"],
        [c for e, c in caps if e["label"] == "fail"],
        entries,
    )


@pytest.fixture(scope="session")
def full_corpus(tmp_path_factory):
    """The 58/140 corpus at seed 7: (successes, failures, manifest entries)."""
    out = tmp_path_factory.mktemp("full")
    synth.generate(synth.default_spec("paper_shape", seed=7), out)
    return _load(out)


@pytest.fixture(scope="session")
def holdout_successes(tmp_path_factory):
    out = tmp_path_factory.mktemp("holdout")
    synth.generate(synth.default_spec("paper_shape", seed=99), out)
    return _load(out)[0]


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    synth.generate(synth.default_spec("tiny", seed=7), out)
    return _load(out)


@pytest.fixture(scope="session")
def trained(full_corpus):
    """Graph, dataset split and the per-protocol SVM bundle on the full corpus."""
    succ, fail, _ = full_corpus
    graph = golden_flow.build_graph(succ)
    dataset = ai_engine.build_dataset(succ, fail)
    train, test = ai_engine.split_dataset(dataset)
    bundle = ai_engine.train_bundle(train, "by_protocol")
    return {"graph": graph, "dataset": dataset, "train": train, "test": test, "bundle": bundle}
