"""Frame classifier trained from file-level success/fail labels.

Labels come from a set difference: every frame of a successful capture is
positive, and a frame of a failed capture is negative only when its
signature never occurs in any successful capture.  Frames are vectorized
as L2-normalized bag-of-words counts and classified by a linear SVM,
optionally one model per protocol label.
"""
from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DatasetError, EvaluationError, ModelLoadError, TrainingError, VocabularyError
from .ingest import CaptureSummary, FrameRecord, Signature, signature_of

log = logging.getLogger(__name__)

POSITIVE = "positive"
NEGATIVE = "negative"
ALL = "ALL"
BUNDLE_VERSION = 1

DEFAULT_LAMBDA = 1e-4
DEFAULT_EPOCHS = 50
DEFAULT_SEED = 7


@dataclass(frozen=True)
class LabeledFrame:
    signature: Signature
    raw_info: str
    label: str
    source_file: str
    frame_no: int = 0

    def to_dict(self) -> dict:
        return {
            "protocol": self.signature.protocol,
            "text": self.signature.text,
            "raw_info": self.raw_info,
            "label": self.label,
            "source_file": self.source_file,
            "frame_no": self.frame_no,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabeledFrame":
        return cls(Signature(d["protocol"], d["text"]), d["raw_info"], d["label"],
                   d["source_file"], d.get("frame_no", 0))


def _labeled(frame: FrameRecord, label: str, cap: CaptureSummary, sig=None) -> LabeledFrame:
    return LabeledFrame(sig or signature_of(frame), frame.info, label, cap.file_id, frame.no)


def build_dataset(
    successes: Sequence[CaptureSummary],
    failures: Sequence[CaptureSummary],
    dedup: bool = False,
) -> list[LabeledFrame]:
    """Set-difference labeling; duplicates are kept unless ``dedup``."""
    if not successes or not failures:
        raise DatasetError("need at least one success and one fail capture")
    positives = [_labeled(f, POSITIVE, cap) for cap in successes for f in cap.frames]
    known = {lf.signature for lf in positives}
    negatives = []
    for cap in failures:
        for f in cap.frames:
            sig = signature_of(f)
            if sig not in known:
                negatives.append(_labeled(f, NEGATIVE, cap, sig))
    if not negatives:
        raise DatasetError("failure files contain no novel frames")
    data = positives + negatives
    if dedup:
        seen = set()
        unique = []
        for lf in data:
            if (lf.signature, lf.label) not in seen:
                seen.add((lf.signature, lf.label))
                unique.append(lf)
        data = unique
    return data


# -- bag of words -------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def index(self) -> dict[str, int]:
        idx = self.__dict__.get("_index")
        if idx is None:
            idx = {t: i for i, t in enumerate(self.tokens)}
            object.__setattr__(self, "_index", idx)
        return idx


def _text_of(item) -> str:
    if isinstance(item, LabeledFrame):
        return item.signature.text
    if isinstance(item, Signature):
        return item.text
    return item


def fit_vocabulary(items: Iterable) -> Vocabulary:
    """Tokens in first-seen order.  Accepts LabeledFrames or canonical strings."""
    order: dict[str, None] = {}
    n = 0
    for item in items:
        n += 1
        for tok in _text_of(item).split():
            order.setdefault(tok, None)
    if n == 0:
        raise VocabularyError("empty training set")
    if not order:
        raise VocabularyError("all training texts are empty")
    return Vocabulary(tuple(order))


def count_vector(vocab: Vocabulary, text: str) -> np.ndarray:
    vec = np.zeros(vocab.size)
    idx = vocab.index
    for tok in text.split():
        j = idx.get(tok)
        if j is not None:
            vec[j] += 1.0
    return vec


def vectorize(vocab: Vocabulary, text: str) -> np.ndarray:
    """Dense L2-normalized token counts; unknown tokens are ignored."""
    vec = count_vector(vocab, text)
    norm = math.sqrt(float(vec @ vec))
    return vec / norm if norm > 0 else vec


def _design(vocab: Vocabulary, frames: Sequence[LabeledFrame]) -> tuple[np.ndarray, np.ndarray]:
    X = np.array([vectorize(vocab, f.signature.text) for f in frames]).reshape(len(frames), vocab.size)
    y = np.array([1.0 if f.label == POSITIVE else -1.0 for f in frames])
    return X, y


# -- linear SVM ---------------------------------------------------------------

@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    hyperparams: dict

    def decision(self, x: np.ndarray) -> float:
        return float(x @ self.weights + self.bias)


def svm_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, lam: float) -> float:
    """``lam/2 * (|w|^2 + b^2) + mean hinge``; the bias is an augmented weight."""
    hinge = np.maximum(0.0, 1.0 - y * (X @ w + b))
    return 0.5 * lam * (float(w @ w) + b * b) + float(hinge.mean())


def _check_two_classes(frames: Sequence[LabeledFrame]) -> None:
    labels = {f.label for f in frames}
    if labels != {POSITIVE, NEGATIVE}:
        raise TrainingError(f"training needs both classes, got {sorted(labels) or 'none'}")


def train_svm(
    frames: Sequence[LabeledFrame],
    vocab: Vocabulary | None = None,
    lam: float = DEFAULT_LAMBDA,
    epochs: int = DEFAULT_EPOCHS,
    seed: int = DEFAULT_SEED,
    history: list | None = None,
) -> LinearModel:
    """Soft-margin linear SVM by stochastic sub-gradient descent.

    Step size at update ``t`` is ``1/(lam*t)``; examples are reshuffled every
    epoch from a seeded generator.  The bias is treated as the weight of a
    constant feature, so it shares the regularizer (an unpenalized bias
    random-walks under this step schedule when ``lam`` is small).  The
    returned model is the running average of the iterates from the second
    epoch on; the first epoch's iterates carry norms near ``1/lam`` and would
    dominate the average.  If ``history`` is given, the objective at the
    averaged iterate is appended after every averaged epoch.
    """
    _check_two_classes(frames)
    if vocab is None:
        vocab = fit_vocabulary(frames)
    X, y = _design(vocab, frames)
    n, d = X.shape
    rng = random.Random(seed)
    w = np.zeros(d)
    b = 0.0
    avg_w = np.zeros(d)
    avg_b = 0.0
    t = 0
    k = 0
    burn_in = 1 if epochs > 1 else 0
    order = list(range(n))
    for epoch in range(epochs):
        rng.shuffle(order)
        for i in order:
            t += 1
            xi, yi = X[i], y[i]
            violated = yi * (xi @ w + b) < 1.0
            decay = 1.0 - 1.0 / t
            w = w * decay
            b = b * decay
            if violated:
                eta = 1.0 / (lam * t)
                w = w + (eta * yi) * xi
                b = b + eta * yi
            if epoch >= burn_in:
                k += 1
                avg_w += (w - avg_w) / k
                avg_b += (b - avg_b) / k
        if history is not None and epoch >= burn_in:
            history.append(svm_objective(avg_w, avg_b, X, y, lam))
    if not np.all(np.isfinite(avg_w)) or not math.isfinite(avg_b):
        raise TrainingError("non-finite weights")
    return LinearModel(avg_w, float(avg_b), {"lambda": lam, "epochs": epochs, "seed": seed})


# -- naive Bayes baseline -----------------------------------------------------

@dataclass
class NaiveBayesModel:
    """Multinomial NB with add-one smoothing; tokens outside the vocabulary are ignored."""

    log_prior: dict[str, float]
    log_likelihood: dict[str, np.ndarray]

    def log_posteriors(self, counts: np.ndarray) -> dict[str, float]:
        return {c: self.log_prior[c] + float(counts @ self.log_likelihood[c]) for c in (POSITIVE, NEGATIVE)}

    def decision(self, counts: np.ndarray) -> float:
        post = self.log_posteriors(counts)
        return post[POSITIVE] - post[NEGATIVE]


def train_naive_bayes(frames: Sequence[LabeledFrame], vocab: Vocabulary | None = None) -> NaiveBayesModel:
    _check_two_classes(frames)
    if vocab is None:
        vocab = fit_vocabulary(frames)
    n_docs = Counter(f.label for f in frames)
    totals = {c: np.zeros(vocab.size) for c in (POSITIVE, NEGATIVE)}
    for f in frames:
        totals[f.label] += count_vector(vocab, f.signature.text)
    log_prior = {c: math.log(n_docs[c] / len(frames)) for c in (POSITIVE, NEGATIVE)}
    log_lik = {
        c: np.log((totals[c] + 1.0) / (totals[c].sum() + vocab.size)) for c in (POSITIVE, NEGATIVE)
    }
    return NaiveBayesModel(log_prior, log_lik)


# -- per-group bundles --------------------------------------------------------

@dataclass
class GroupModel:
    vocab: Vocabulary | None
    model: LinearModel | NaiveBayesModel | None
    degenerate: str | None = None

    def predict(self, text: str) -> tuple[str, float]:
        if self.degenerate is not None:
            return self.degenerate, 0.0
        if isinstance(self.model, NaiveBayesModel):
            score = self.model.decision(count_vector(self.vocab, text))
        else:
            score = self.model.decision(vectorize(self.vocab, text))
        return (POSITIVE if score >= 0 else NEGATIVE), score


@dataclass
class ClassifierBundle:
    grouping: str
    kind: str
    groups: dict[str, GroupModel]
    hyperparams: dict = field(default_factory=dict)
    fallback: str = "all-then-positive"

    def route(self, protocol: str) -> str:
        return protocol if self.grouping == "by_protocol" else ALL


@dataclass(frozen=True)
class Prediction:
    label: str
    score: float
    group: str | None
    fallback: bool = False


def _train_group(frames, kind, hp) -> GroupModel:
    labels = {f.label for f in frames}
    if len(labels) == 1:
        return GroupModel(None, None, labels.pop())
    vocab = fit_vocabulary(frames)
    if kind == "naive_bayes":
        return GroupModel(vocab, train_naive_bayes(frames, vocab))
    return GroupModel(vocab, train_svm(frames, vocab, hp["lambda"], hp["epochs"], hp["seed"]))


def train_bundle(
    dataset: Sequence[LabeledFrame],
    grouping: str = "by_protocol",
    kind: str = "svm",
    lam: float = DEFAULT_LAMBDA,
    epochs: int = DEFAULT_EPOCHS,
    seed: int = DEFAULT_SEED,
) -> ClassifierBundle:
    if not dataset:
        raise DatasetError("empty dataset")
    if grouping not in ("all", "by_protocol"):
        raise ValueError(f"unknown grouping {grouping!r}")
    if kind not in ("svm", "naive_bayes"):
        raise ValueError(f"unknown model kind {kind!r}")
    hp = {"lambda": lam, "epochs": epochs, "seed": seed} if kind == "svm" else {}
    buckets: dict[str, list[LabeledFrame]] = {}
    for f in dataset:
        key = f.signature.protocol if grouping == "by_protocol" else ALL
        buckets.setdefault(key, []).append(f)
    groups = {}
    for key in sorted(buckets):
        try:
            groups[key] = _train_group(buckets[key], kind, hp)
        except (TrainingError, VocabularyError) as exc:
            label = Counter(f.label for f in buckets[key]).most_common(1)[0][0]
            log.warning("group %s degraded to constant %s: %s", key, label, exc)
            groups[key] = GroupModel(None, None, label)
        if groups[key].degenerate:
            log.info("group %s is degenerate (%s only)", key, groups[key].degenerate)
    return ClassifierBundle(grouping, kind, groups, hp)


def classify_signature(bundle: ClassifierBundle, sig: Signature) -> Prediction:
    key = bundle.route(sig.protocol)
    group = bundle.groups.get(key)
    fallback = False
    if group is None:
        if ALL not in bundle.groups:
            return Prediction(POSITIVE, 0.0, None, True)
        key, group, fallback = ALL, bundle.groups[ALL], True
    label, score = group.predict(sig.text)
    return Prediction(label, score, key, fallback)


def classify(bundle: ClassifierBundle, frame: FrameRecord) -> Prediction:
    return classify_signature(bundle, signature_of(frame))


# -- evaluation ---------------------------------------------------------------

@dataclass(frozen=True)
class EvalMetrics:
    accuracy: float
    precision_negative: float
    recall_negative: float
    f1_negative: float
    f1_macro: float
    n: int
    n_negative: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def metrics_from_counts(true_pos: int, true_neg: int, false_pos: int, false_neg: int) -> EvalMetrics:
    """Metrics with the negative (faulty) class as the detection class.

    ``true_neg`` counts negatives called negative, ``false_neg`` negatives
    called positive, ``false_pos`` positives called negative.
    """
    n = true_pos + true_neg + false_pos + false_neg
    if n == 0:
        raise EvaluationError("empty test set")
    called_neg = true_neg + false_pos
    actual_neg = true_neg + false_neg
    p_neg = true_neg / called_neg if called_neg else 0.0
    r_neg = true_neg / actual_neg if actual_neg else 0.0
    called_pos = true_pos + false_neg
    actual_pos = true_pos + false_pos
    p_pos = true_pos / called_pos if called_pos else 0.0
    r_pos = true_pos / actual_pos if actual_pos else 0.0
    f1_neg = _f1(p_neg, r_neg)
    return EvalMetrics(
        accuracy=(true_pos + true_neg) / n,
        precision_negative=p_neg,
        recall_negative=r_neg,
        f1_negative=f1_neg,
        f1_macro=(f1_neg + _f1(p_pos, r_pos)) / 2,
        n=n,
        n_negative=actual_neg,
    )


def _counts(pairs) -> tuple[int, int, int, int]:
    tp = tn = fp = fn = 0
    for actual, predicted in pairs:
        if actual == POSITIVE:
            tp += predicted == POSITIVE
            fp += predicted == NEGATIVE
        else:
            tn += predicted == NEGATIVE
            fn += predicted == POSITIVE
    return tp, tn, fp, fn


def evaluate(bundle: ClassifierBundle, test: Sequence[LabeledFrame]) -> dict[str, EvalMetrics]:
    """Metrics per routing group plus ``"pooled"`` over the whole test set."""
    if not test:
        raise EvaluationError("empty test set")
    by_group: dict[str, list] = {}
    pooled = []
    for lf in test:
        pred = classify_signature(bundle, lf.signature)
        pair = (lf.label, pred.label)
        pooled.append(pair)
        by_group.setdefault(bundle.route(lf.signature.protocol), []).append(pair)
    out = {key: metrics_from_counts(*_counts(by_group[key])) for key in sorted(by_group)}
    out["pooled"] = metrics_from_counts(*_counts(pooled))
    return out


def mean_group_recall(metrics: dict[str, EvalMetrics]) -> float:
    """Mean negative recall over groups that have negatives in the test set."""
    vals = [m.recall_negative for k, m in metrics.items() if k != "pooled" and m.n_negative > 0]
    if not vals:
        raise EvaluationError("no group has negative test frames")
    return sum(vals) / len(vals)


def split_dataset(
    dataset: Sequence[LabeledFrame],
    ratio: float = 0.8,
    seed: int = DEFAULT_SEED,
    by_protocol: bool = True,
    mode: str = "frame",
) -> tuple[list[LabeledFrame], list[LabeledFrame]]:
    """Seeded stratified split; each stratum is cut at ``ceil(ratio*n)``.

    Strata are labels (and protocols when ``by_protocol``).  A stratum of two
    or more items keeps at least one item on each side while ``ratio < 1``.
    ``mode="file"`` assigns whole source files to one side instead, stratified
    by the files' majority label.  Output preserves dataset order.
    """
    if not dataset:
        raise DatasetError("empty dataset")
    if not 0 < ratio <= 1:
        raise ValueError("ratio must be in (0, 1]")
    rng = random.Random(seed)

    def cut(n: int) -> int:
        k = math.ceil(ratio * n)
        if ratio < 1 and n >= 2:
            k = min(k, n - 1)
        return k

    train_idx: set[int] = set()
    if mode == "frame":
        strata: dict[tuple, list[int]] = {}
        for i, lf in enumerate(dataset):
            key = (lf.signature.protocol, lf.label) if by_protocol else (lf.label,)
            strata.setdefault(key, []).append(i)
        for key in sorted(strata):
            idx = strata[key]
            rng.shuffle(idx)
            train_idx.update(idx[: cut(len(idx))])
    elif mode == "file":
        files: dict[str, Counter] = {}
        for lf in dataset:
            files.setdefault(lf.source_file, Counter())[lf.label] += 1
        # a fail file is one that contributed any negative frame
        strata = {POSITIVE: [], NEGATIVE: []}
        for fid in sorted(files):
            strata[NEGATIVE if files[fid][NEGATIVE] else POSITIVE].append(fid)
        train_files = set()
        for key in (POSITIVE, NEGATIVE):
            fids = strata[key]
            rng.shuffle(fids)
            train_files.update(fids[: cut(len(fids))])
        train_idx = {i for i, lf in enumerate(dataset) if lf.source_file in train_files}
    else:
        raise ValueError(f"unknown split mode {mode!r}")
    train = [lf for i, lf in enumerate(dataset) if i in train_idx]
    test = [lf for i, lf in enumerate(dataset) if i not in train_idx]
    return train, test


# -- persistence --------------------------------------------------------------

def _floats(arr) -> list[float]:
    return [float(v) for v in arr]


def bundle_to_json(bundle: ClassifierBundle) -> dict:
    groups = {}
    for key in sorted(bundle.groups):
        g = bundle.groups[key]
        entry: dict = {
            "vocab": list(g.vocab.tokens) if g.vocab else [],
            "degenerate": g.degenerate,
        }
        if isinstance(g.model, NaiveBayesModel):
            entry["log_prior"] = dict(g.model.log_prior)
            entry["log_likelihood"] = {c: _floats(v) for c, v in g.model.log_likelihood.items()}
        else:
            entry["weights"] = _floats(g.model.weights) if g.model else []
            entry["bias"] = g.model.bias if g.model else 0.0
            entry["hyperparams"] = dict(g.model.hyperparams) if g.model else dict(bundle.hyperparams)
        groups[key] = entry
    return {
        "version": BUNDLE_VERSION,
        "grouping": bundle.grouping,
        "kind": bundle.kind,
        "fallback": bundle.fallback,
        "groups": groups,
    }


def bundle_from_json(doc) -> ClassifierBundle:
    if not isinstance(doc, dict) or doc.get("version") != BUNDLE_VERSION:
        raise ModelLoadError("unsupported bundle version")
    grouping = doc.get("grouping")
    if grouping not in ("all", "by_protocol"):
        raise ModelLoadError(f"bad grouping {grouping!r}")
    kind = doc.get("kind", "svm")
    groups = {}
    hp: dict = {}
    for key, g in doc.get("groups", {}).items():
        if grouping == "all" and key != ALL:
            raise ModelLoadError(f"grouping 'all' requires the single key {ALL!r}")
        degenerate = g.get("degenerate")
        if degenerate not in (None, POSITIVE, NEGATIVE):
            raise ModelLoadError(f"bad degenerate marker {degenerate!r}")
        if degenerate:
            groups[key] = GroupModel(None, None, degenerate)
            continue
        vocab = Vocabulary(tuple(g["vocab"]))
        if kind == "naive_bayes":
            model = NaiveBayesModel(
                {c: float(v) for c, v in g["log_prior"].items()},
                {c: np.array(v, dtype=float) for c, v in g["log_likelihood"].items()},
            )
            if any(len(v) != vocab.size for v in model.log_likelihood.values()):
                raise ModelLoadError(f"group {key}: likelihood length != vocabulary size")
        else:
            weights = np.array(g["weights"], dtype=float)
            if len(weights) != vocab.size:
                raise ModelLoadError(f"group {key}: weight length != vocabulary size")
            if not np.all(np.isfinite(weights)):
                raise ModelLoadError(f"group {key}: non-finite weights")
            hp = dict(g.get("hyperparams", {}))
            model = LinearModel(weights, float(g["bias"]), hp)
        groups[key] = GroupModel(vocab, model, None)
    return ClassifierBundle(grouping, kind, groups, hp, doc.get("fallback", "all-then-positive"))


def save_bundle(bundle: ClassifierBundle, path) -> None:
    Path(path).write_text(json.dumps(bundle_to_json(bundle), indent=1) + "\n", encoding="utf-8")


def load_bundle(path) -> ClassifierBundle:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelLoadError(f"{path}: {exc}") from exc
    return bundle_from_json(doc)


def metrics_to_json(metrics: dict[str, EvalMetrics]) -> dict:
    return {k: m.to_dict() for k, m in metrics.items()}
