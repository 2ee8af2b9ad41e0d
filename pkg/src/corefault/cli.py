"""Command-line entry point.

Exit codes: 0 clean (or command succeeded), 1 faulty capture, 2 usage or
spec error, 3 data error, 4 transport error.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import __version__, ai_engine, golden_flow, rag, synth, triage
from .errors import CoreFaultError, DatasetError, SpecError, UnsupportedFormatError
from .ingest import load_summary, sniff_pcap

log = logging.getLogger("corefault")

EXIT_CLEAN = 0
EXIT_FAULTY = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_TRANSPORT = 4

ENV_PREFIX = "COREFAULT_"
SPLIT_VERSION = 1
METRICS_VERSION = 1

GRAPH_FILE = "graph.json"
BUNDLE_FILE = "bundle.json"
SPLIT_FILE = "split.json"
COMPARE_FILES = {
    "svm_all": ("svm", "all"),
    "svm_by_protocol": ("svm", "by_protocol"),
    "nb_all": ("naive_bayes", "all"),
}

CONVERTER_HINT = (
    "raw pcap input is not analyzed directly; export the dissector's frame "
    "summary to summary JSON first (see 'Converting captures' in the README)"
)


@dataclass
class RunConfig:
    models_dir: str = "models"
    corpus_dir: str = "corpus"
    docs_dir: str = ""
    index_path: str = ""
    out_dir: str = ""
    seed: int = 7
    ratio: float = 0.8
    split_mode: str = "frame"
    grouping: str = "by_protocol"
    lam: float = ai_engine.DEFAULT_LAMBDA
    epochs: int = ai_engine.DEFAULT_EPOCHS
    window: int = 10
    k: int = 4
    context_frames: int = 1
    strict: bool = True
    llm_url: str = ""
    llm_model: str = "mistral-7b-instruct"
    llm_api_key_env: str = "COREFAULT_API_KEY"
    llm_timeout: float = 60.0
    llm_retries: int = 2

    def validate(self) -> None:
        if not 0 < self.ratio <= 1:
            raise SpecError(f"ratio must be in (0, 1], got {self.ratio}")
        if self.window < 0:
            raise SpecError("window must be >= 0")
        if self.k < 0:
            raise SpecError("k must be >= 0")
        if self.context_frames < 0:
            raise SpecError("context_frames must be >= 0")
        if self.grouping not in ("all", "by_protocol"):
            raise SpecError(f"grouping must be 'all' or 'by_protocol', got {self.grouping!r}")
        if self.split_mode not in ("frame", "file"):
            raise SpecError(f"split_mode must be 'frame' or 'file', got {self.split_mode!r}")
        if self.lam <= 0 or self.epochs < 1:
            raise SpecError("lam must be > 0 and epochs >= 1")
        if self.llm_timeout <= 0 or self.llm_retries < 0:
            raise SpecError("llm_timeout must be > 0 and llm_retries >= 0")

    def endpoint(self) -> rag.EndpointConfig:
        return rag.EndpointConfig(self.llm_url, self.llm_model, self.llm_api_key_env,
                                  self.llm_timeout, self.llm_retries)


def _to_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise SpecError(f"not a boolean: {text!r}")


_CONVERT = {"int": int, "float": float, "bool": _to_bool, "str": str}


def _coerce(name: str, kind: str, value):
    if not isinstance(value, str):
        return value
    try:
        return _CONVERT[kind](value)
    except ValueError as exc:
        raise SpecError(f"config key {name}: {exc}") from exc


def read_config_file(path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",), inline_comment_prefixes=("#",))
    try:
        text = Path(path).read_text(encoding="utf-8")
        parser.read_string("[corefault]\n" + text, source=str(path))
    except OSError as exc:
        raise SpecError(f"cannot read config file {path}: {exc}") from exc
    except configparser.Error as exc:
        raise SpecError(f"bad config file {path}: {exc}") from exc
    values = dict(parser["corefault"])
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise SpecError(f"unknown config key {unknown[0]!r} in {path}")
    return values


def resolve_config(args: argparse.Namespace, environ=None) -> RunConfig:
    """Flags beat env vars, env vars beat the config file, which beats defaults."""
    environ = os.environ if environ is None else environ
    values: dict = {}
    cfg_path = getattr(args, "config", None) or environ.get(ENV_PREFIX + "CONFIG")
    if cfg_path:
        values.update(read_config_file(cfg_path))
    for f in fields(RunConfig):
        env = environ.get(ENV_PREFIX + f.name.upper())
        if env is not None:
            values[f.name] = env
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    kinds = {f.name: f.type for f in fields(RunConfig)}
    config = RunConfig(**{k: _coerce(k, kinds[k], v) for k, v in values.items()})
    config.validate()
    return config


# -- helpers ------------------------------------------------------------------

def _write_json(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _load_corpus(corpus_dir, strict: bool):
    entries = synth.load_manifest(corpus_dir)
    succ, fail = [], []
    for e in entries:
        cap = load_summary(e["abspath"], strict=strict)
        (succ if e["label"] == "success" else fail).append(cap)
    return succ, fail


def _load_capture(path, strict: bool):
    path = Path(path)
    if sniff_pcap(path):
        raise UnsupportedFormatError(f"{path}: {CONVERTER_HINT}")
    return load_summary(path, strict=strict)


def _models(config: RunConfig):
    d = Path(config.models_dir)
    return golden_flow.load_graph(d / GRAPH_FILE), ai_engine.load_bundle(d / BUNDLE_FILE)


def _index(config: RunConfig):
    if config.index_path:
        return rag.load_index(config.index_path)
    if config.docs_dir:
        return rag.build_index(config.docs_dir)
    return None


# -- commands -----------------------------------------------------------------

def cmd_generate(args, config: RunConfig, out) -> int:
    spec = synth.default_spec(args.scale, config.seed)
    if args.jitter is not None:
        spec.jitter = args.jitter
    if args.ip_pool is not None:
        spec.ip_pool = args.ip_pool
    spec.pcap = args.pcap
    target = args.out or config.corpus_dir
    manifest = synth.generate(spec, target)
    n_succ = sum(e["label"] == "success" for e in manifest)
    print(f"wrote {len(manifest)} captures ({n_succ} success, {len(manifest) - n_succ} fail) to {target}", file=out)
    return EXIT_CLEAN


def cmd_train(args, config: RunConfig, out) -> int:
    succ, fail = _load_corpus(config.corpus_dir, config.strict)
    if not succ or not fail:
        raise DatasetError("corpus needs at least one success and one fail capture")
    models = Path(config.models_dir)
    models.mkdir(parents=True, exist_ok=True)

    graph = golden_flow.build_graph(succ)
    golden_flow.save_graph(graph, models / GRAPH_FILE)

    dataset = ai_engine.build_dataset(succ, fail, dedup=args.dedup)
    train, test = ai_engine.split_dataset(dataset, config.ratio, config.seed, mode=config.split_mode)
    if not train:
        raise DatasetError("split left no training frames")
    hp = {"lam": config.lam, "epochs": config.epochs, "seed": config.seed}
    bundle = ai_engine.train_bundle(train, config.grouping, "svm", **hp)
    ai_engine.save_bundle(bundle, models / BUNDLE_FILE)
    if args.compare_grouping:
        for name, (kind, grouping) in COMPARE_FILES.items():
            extra = ai_engine.train_bundle(train, grouping, kind, **hp)
            ai_engine.save_bundle(extra, models / f"bundle_{name}.json")

    _write_json(models / SPLIT_FILE, {
        "version": SPLIT_VERSION,
        "seed": config.seed,
        "ratio": config.ratio,
        "mode": config.split_mode,
        "dedup": args.dedup,
        "n_dataset": len(dataset),
        "train": [[lf.source_file, lf.frame_no] for lf in train],
        "test": [lf.to_dict() for lf in test],
    })
    n_neg = sum(lf.label == ai_engine.NEGATIVE for lf in dataset)
    print(f"graph: {len(graph.nodes)} nodes from {graph.trained_on} success captures", file=out)
    print(f"dataset: {len(dataset)} frames ({n_neg} negative); train {len(train)}, test {len(test)}", file=out)
    degenerate = sorted(k for k, g in bundle.groups.items() if g.degenerate)
    print(f"bundle: {config.grouping}, groups {sorted(bundle.groups)}"
          + (f", constant {degenerate}" if degenerate else ""), file=out)
    return EXIT_CLEAN


def _print_analysis(report, fmt, out):
    out.write(triage.render_report(report, fmt))


def cmd_analyze(args, config: RunConfig, out) -> int:
    capture = _load_capture(args.capture, config.strict)
    graph, bundle = _models(config)
    report = triage.analyze(graph, bundle, capture, window=config.window)
    _print_analysis(report, args.format, out)
    if args.explain and report.verdict == "faulty":
        prompt = rag.build_prompt(report, capture, _index(config), config.k, config.context_frames)
        out.write("\n")
        if args.llm:
            out.write(rag.complete(prompt, config.endpoint()) + "\n")
        else:
            rag.complete(prompt, dry_run=True, out=out)
    return EXIT_FAULTY if report.verdict == "faulty" else EXIT_CLEAN


def cmd_explain(args, config: RunConfig, out) -> int:
    capture = _load_capture(args.capture, config.strict)
    graph, bundle = _models(config)
    report = triage.analyze(graph, bundle, capture, window=config.window)
    if report.verdict == "clean":
        out.write(triage.render_text(report))
        return EXIT_CLEAN
    prompt = rag.build_prompt(report, capture, _index(config), config.k, config.context_frames)
    if args.format == "json":
        out.write(json.dumps(prompt.to_dict(), indent=1, ensure_ascii=False) + "\n")
    elif args.llm:
        out.write(rag.complete(prompt, config.endpoint()) + "\n")
    else:
        rag.complete(prompt, dry_run=True, out=out)
    return EXIT_FAULTY


def _golden_flow_stats(graph, fail, holdout) -> dict:
    missed = [c.file_id for c in fail if golden_flow.check(graph, c).status == golden_flow.CONFORMS]
    stats = {
        "fail_files": len(fail),
        "detected": len(fail) - len(missed),
        "detection_rate": (len(fail) - len(missed)) / len(fail) if fail else 0.0,
        "missed": missed,
        "holdout_success_files": None,
        "false_positives": None,
        "false_positive_rate": None,
    }
    if holdout is not None:
        flagged = [c.file_id for c in holdout if golden_flow.check(graph, c).status != golden_flow.CONFORMS]
        stats.update({
            "holdout_success_files": len(holdout),
            "false_positives": len(flagged),
            "false_positive_rate": len(flagged) / len(holdout) if holdout else 0.0,
            "flagged_holdout": flagged,
        })
    return stats


def _fmt(v) -> str:
    if v is None:
        return "-"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def summary_table(doc: dict) -> str:
    cols = ["model", "group", "n", "n_negative", "accuracy", "precision_negative", "recall_negative", "f1_negative"]
    rows = ["\t".join(cols)]
    for name in sorted(doc["models"]):
        groups = doc["models"][name]["groups"]
        for g in sorted(groups, key=lambda k: (k == "pooled", k)):
            m = groups[g]
            rows.append("\t".join([name, g] + [_fmt(m[c]) for c in cols[2:]]))
    gf = doc["golden_flow"]
    rows.append("")
    rows.append("golden_flow\tdetection_rate\t" + _fmt(gf["detection_rate"])
                + f"\t({gf['detected']}/{gf['fail_files']})")
    fp = gf["false_positive_rate"]
    if fp is not None:
        rows.append("golden_flow\tfalse_positive_rate\t" + _fmt(fp)
                    + f"\t({gf['false_positives']}/{gf['holdout_success_files']})")
    return "\n".join(rows) + "\n"


def cmd_evaluate(args, config: RunConfig, out) -> int:
    models = Path(config.models_dir)
    graph = golden_flow.load_graph(models / GRAPH_FILE)
    split = json.loads((models / SPLIT_FILE).read_text(encoding="utf-8"))
    test = [ai_engine.LabeledFrame.from_dict(d) for d in split["test"]]
    if not test:
        raise DatasetError("split record has an empty test set")

    bundle_files = {"bundle": BUNDLE_FILE}
    for name in COMPARE_FILES:
        if (models / f"bundle_{name}.json").exists():
            bundle_files[name] = f"bundle_{name}.json"
    results = {}
    for name, fname in bundle_files.items():
        bundle = ai_engine.load_bundle(models / fname)
        metrics = ai_engine.evaluate(bundle, test)
        with_neg = [m for k, m in metrics.items() if k != "pooled" and m.n_negative > 0]
        results[name] = {
            "file": fname,
            "kind": bundle.kind,
            "grouping": bundle.grouping,
            "groups": ai_engine.metrics_to_json(metrics),
            "mean_group_recall_negative": ai_engine.mean_group_recall(metrics) if with_neg else None,
        }

    _, fail = _load_corpus(config.corpus_dir, config.strict)
    holdout = None
    if args.holdout:
        holdout, _ = _load_corpus(args.holdout, config.strict)
    doc = {
        "version": METRICS_VERSION,
        "split": {"seed": split["seed"], "ratio": split["ratio"], "mode": split["mode"],
                  "n_train": len(split["train"]), "n_test": len(test)},
        "models": results,
        "golden_flow": _golden_flow_stats(graph, fail, holdout),
    }

    out_dir = Path(config.out_dir or config.models_dir)
    _write_json(out_dir / "metrics.json", doc)
    table = summary_table(doc)
    (out_dir / "metrics.tsv").write_text(table, encoding="utf-8")
    if not args.no_figures:
        from . import plots  # matplotlib import is slow; only pay for it here

        fig_dir = out_dir / "figures"
        plots.plot_group_metrics(results["bundle"]["groups"], fig_dir / "group_metrics.png")
        if len(results) > 1:
            plots.plot_model_comparison(results, fig_dir / "model_comparison.png")
        plots.plot_golden_flow(doc["golden_flow"], fig_dir / "golden_flow.png")
    out.write(table)
    return EXIT_CLEAN


def cmd_index_docs(args, config: RunConfig, out) -> int:
    if not config.docs_dir:
        raise SpecError("index-docs needs --docs")
    index = rag.build_index(config.docs_dir, args.chunk_size, args.overlap)
    target = config.index_path or str(Path(config.models_dir) / "index.json")
    Path(target).parent.mkdir(parents=True, exist_ok=True)
    rag.save_index(index, target)
    n_docs = len({c.doc_id for c in index.chunks})
    print(f"indexed {len(index.chunks)} chunks from {n_docs} documents into {target}", file=out)
    return EXIT_CLEAN


# -- parser -------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    # config-backed flags default to None so lower-precedence sources show through
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--print-config", action="store_true", help="print the effective configuration and exit")
    p.add_argument("--seed", type=int)
    p.add_argument("--models", dest="models_dir", help="model directory")
    p.add_argument("--lenient", dest="strict", action="store_const", const=False,
                   help="ignore unknown keys in summary JSON")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="corefault", description="5G core capture fault analysis")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic corpus")
    _common(p)
    p.add_argument("--scale", choices=["tiny", "paper_shape"], default="tiny")
    p.add_argument("--out", help="output directory (default: corpus_dir)")
    p.add_argument("--jitter", type=float)
    p.add_argument("--ip-pool", type=int)
    p.add_argument("--pcap", action="store_true", help="also write classic pcap containers")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the golden flow graph and classifiers")
    _common(p)
    p.add_argument("--corpus", dest="corpus_dir")
    p.add_argument("--grouping", choices=["all", "by_protocol"])
    p.add_argument("--ratio", type=float)
    p.add_argument("--split-mode", dest="split_mode", choices=["frame", "file"])
    p.add_argument("--lam", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--dedup", action="store_true", help="drop repeated (signature, label) pairs")
    p.add_argument("--compare-grouping", action="store_true",
                   help="also train pooled/per-protocol SVM and pooled naive Bayes bundles")
    p.set_defaults(func=cmd_train)

    for name, helptext, func in (
        ("analyze", "analyze one capture summary", cmd_analyze),
        ("explain", "build a troubleshooting prompt for one capture", cmd_explain),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("capture", help="summary JSON of the capture")
        p.add_argument("--format", choices=["text", "json"], default="text")
        p.add_argument("--window", type=int)
        p.add_argument("--docs", dest="docs_dir", help="directory of .txt/.md reference documents")
        p.add_argument("--index", dest="index_path", help="index file written by index-docs")
        p.add_argument("--k", type=int, help="number of chunks to retrieve")
        p.add_argument("--context-frames", dest="context_frames", type=int)
        p.add_argument("--llm", action="store_true", help="send the prompt to the configured endpoint")
        p.add_argument("--llm-url", dest="llm_url")
        p.add_argument("--llm-model", dest="llm_model")
        if name == "analyze":
            p.add_argument("--explain", action="store_true", help="append the troubleshooting prompt")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="score trained models and the golden flow")
    _common(p)
    p.add_argument("--corpus", dest="corpus_dir")
    p.add_argument("--holdout", help="corpus whose success files measure golden-flow false positives")
    p.add_argument("--out", dest="out_dir", help="where metrics.json, metrics.tsv and figures/ go")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("index-docs", help="chunk and index a document directory")
    _common(p)
    p.add_argument("--docs", dest="docs_dir")
    p.add_argument("--out", dest="index_path")
    p.add_argument("--chunk-size", type=int, default=rag.DEFAULT_CHUNK_SIZE)
    p.add_argument("--overlap", type=int, default=rag.DEFAULT_OVERLAP)
    p.set_defaults(func=cmd_index_docs)
    return parser


def main(argv=None, out=None, environ=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        config = resolve_config(args, environ)
        if args.print_config:
            out.write(json.dumps(asdict(config), indent=1, sort_keys=True) + "\n")
            return EXIT_CLEAN
        return args.func(args, config, out)
    except CoreFaultError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
