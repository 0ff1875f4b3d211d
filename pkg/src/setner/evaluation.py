"""Exact-match precision/recall/F1, corpus statistics, and sweep harnesses.

An entity prediction counts only when left boundary, right boundary, and
category all match a gold entity; micro-averaged counts are the headline
numbers and a per-category breakdown rides along.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import Sentence


@dataclass
class CategoryCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


@dataclass
class MetricReport:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    per_category: dict[int, CategoryCounts] = field(default_factory=dict)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0

    def add(self, other: "MetricReport") -> None:
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        for cat, counts in other.per_category.items():
            mine = self.per_category.setdefault(cat, CategoryCounts())
            mine.tp += counts.tp
            mine.fp += counts.fp
            mine.fn += counts.fn

    def to_dict(self, category_names=None) -> dict:
        name = category_names or (lambda c: str(c))
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "per_category": {
                name(cat): {
                    "tp": c.tp, "fp": c.fp, "fn": c.fn,
                    "precision": c.precision, "recall": c.recall, "f1": c.f1,
                }
                for cat, c in sorted(self.per_category.items())
            },
        }


def _triples(entities) -> set[tuple[int, int, int]]:
    return {(e.left, e.right, e.category) for e in entities}


def score(gold, predicted) -> MetricReport:
    """Exact-match scores for one sentence's gold and predicted sets."""
    gold_t = _triples(gold)
    pred_t = _triples(predicted)
    report = MetricReport()
    for triple in gold_t | pred_t:
        counts = report.per_category.setdefault(triple[2], CategoryCounts())
        if triple in gold_t and triple in pred_t:
            report.tp += 1
            counts.tp += 1
        elif triple in pred_t:
            report.fp += 1
            counts.fp += 1
        else:
            report.fn += 1
            counts.fn += 1
    return report


def score_corpus(pairs: Iterable[tuple]) -> MetricReport:
    """Count-weighted merge of per-sentence scores."""
    total = MetricReport()
    for gold, predicted in pairs:
        total.add(score(gold, predicted))
    return total


@dataclass
class CorpusStats:
    sentences: int
    with_nested: int
    avg_length: float
    total_entities: int
    nested_entities: int
    nested_pct: float

    def to_dict(self) -> dict:
        return {
            "sentences": self.sentences,
            "with_nested": self.with_nested,
            "avg_length": self.avg_length,
            "total_entities": self.total_entities,
            "nested_entities": self.nested_entities,
            "nested_pct": self.nested_pct,
        }


def _nested_flags(spans: Sequence[tuple[int, int]]) -> list[bool]:
    """A span is nested when it properly contains, or is properly contained
    by, another gold span of the same sentence. Exact-duplicate spans (the
    same boundaries under different categories) only overlap."""
    flags = []
    for i, (l1, r1) in enumerate(spans):
        nested = False
        for j, (l2, r2) in enumerate(spans):
            if i == j or (l1, r1) == (l2, r2):
                continue
            if (l2 <= l1 and r1 <= r2) or (l1 <= l2 and r2 <= r1):
                nested = True
                break
        flags.append(nested)
    return flags


def corpus_stats(sentences: Sequence[Sentence]) -> CorpusStats:
    total_entities = 0
    nested_entities = 0
    with_nested = 0
    total_len = 0
    for sent in sentences:
        total_len += len(sent)
        spans = [(e.left, e.right) for e in sorted(sent.gold)]
        flags = _nested_flags(spans)
        total_entities += len(spans)
        nested_here = sum(flags)
        nested_entities += nested_here
        if nested_here:
            with_nested += 1
    return CorpusStats(
        sentences=len(sentences),
        with_nested=with_nested,
        avg_length=total_len / len(sentences) if sentences else 0.0,
        total_entities=total_entities,
        nested_entities=nested_entities,
        nested_pct=100.0 * nested_entities / total_entities if total_entities else 0.0,
    )


# ---------------------------------------------------------------------------
# sweep / ablation harnesses

SWEEP_AXES = ("query_count", "decoder_layers", "interaction")


@dataclass
class SweepRow:
    value: object
    report: Optional[MetricReport]
    error: Optional[str] = None


def sweep(
    axis: str,
    values: Sequence,
    train_sentences,
    dev_sentences,
    test_sentences,
    model_config,
    train_config,
    vocab,
) -> list[SweepRow]:
    """Train one model per axis value at a fixed seed and score the test set.

    Failures in one cell are recorded and the sweep continues.
    """
    from . import training  # deferred: training depends on this module

    if axis not in SWEEP_AXES:
        raise ValueError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    rows: list[SweepRow] = []
    for value in values:
        mc = _with_axis(model_config, axis, value)
        tc = _copy_config(train_config)
        try:
            from .model import SeqToSetModel

            rng = np.random.default_rng(tc.seed)
            model = SeqToSetModel(vocab, mc, rng)
            result = training.train(model, train_sentences, dev_sentences, tc)
            model.load_state_arrays(result.best_state["params"])
            report = training.evaluate_model(model, test_sentences, tc.batch_size)
            rows.append(SweepRow(value, report))
        except Exception as exc:  # keep sweeping past a broken cell
            rows.append(SweepRow(value, None, error=f"{type(exc).__name__}: {exc}"))
    return rows


def _copy_config(cfg):
    import copy

    return copy.deepcopy(cfg)


def _with_axis(model_config, axis: str, value):
    mc = _copy_config(model_config)
    if axis == "query_count":
        mc.decoder.n_queries = int(value)
    elif axis == "decoder_layers":
        mc.decoder.layers = int(value)
    elif axis == "interaction":
        mc.decoder.interaction = _as_bool(value)
    return mc


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).lower() in ("1", "true", "yes", "on")


@dataclass
class AblationRow:
    seed: int
    loss_mode: str
    f1: float
    precision: float
    recall: float


def loss_mode_ablation(
    train_sentences,
    dev_sentences,
    test_sentences,
    model_config,
    train_config,
    vocab,
    seeds: Sequence[int],
) -> dict:
    """Bipartite vs order-sensitive CE training at several seeds.

    The CE runs shuffle each sentence's gold order every epoch, so the
    baseline cannot exploit a fixed target order.
    """
    from . import training
    from .model import SeqToSetModel

    rows: list[AblationRow] = []
    for mode in ("bipartite", "ce"):
        for seed in seeds:
            tc = _copy_config(train_config)
            tc.seed = int(seed)
            tc.loss_mode = mode
            rng = np.random.default_rng(tc.seed)
            model = SeqToSetModel(vocab, _copy_config(model_config), rng)
            result = training.train(model, train_sentences, dev_sentences, tc)
            model.load_state_arrays(result.best_state["params"])
            report = training.evaluate_model(model, test_sentences, tc.batch_size)
            rows.append(AblationRow(seed, mode, report.f1, report.precision, report.recall))
    means = {
        mode: float(np.mean([r.f1 for r in rows if r.loss_mode == mode]))
        for mode in ("bipartite", "ce")
    }
    return {"rows": rows, "mean_f1": means}
