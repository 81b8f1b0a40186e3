"""Scoring and end-to-end restoration.

Precision/recall/F1 per mark class with O wholly ignored: a prediction
counts as a true positive only when it matches the gold mark at the same
position and class, and O/O agreements contribute to nothing. Overall is
the micro average over COMMA, PERIOD and QUESTION (summed counts).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape
from .data import (PUNCT_LABELS, TASK_PUN, Batch, LabeledSequence, Vocab,
                   make_batches, strip_marks, detokenize)
from .errors import DataError
from .models import predict_punctuation, punctuation_forward

MARK_CLASSES = ("COMMA", "PERIOD", "QUESTION")


@dataclass
class ClassCounts:
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

    def merged(self, other: "ClassCounts") -> "ClassCounts":
        return ClassCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class MetricsReport:
    per_class: dict[str, ClassCounts] = field(
        default_factory=lambda: {c: ClassCounts() for c in MARK_CLASSES})

    @property
    def overall(self) -> ClassCounts:
        total = ClassCounts()
        for counts in self.per_class.values():
            total = total.merged(counts)
        return total

    def to_dict(self) -> dict:
        def block(c: ClassCounts) -> dict:
            return {"tp": c.tp, "fp": c.fp, "fn": c.fn,
                    "precision": c.precision, "recall": c.recall, "f1": c.f1}

        out = {name.lower(): block(counts) for name, counts in self.per_class.items()}
        out["overall"] = block(self.overall)
        return out

    def format_table(self) -> str:
        rows = [f"{'':10s} {'P':>8s} {'R':>8s} {'F1':>8s}"]
        for name in MARK_CLASSES:
            c = self.per_class[name]
            rows.append(f"{name:10s} {c.precision:8.4f} {c.recall:8.4f} {c.f1:8.4f}")
        o = self.overall
        rows.append(f"{'Overall':10s} {o.precision:8.4f} {o.recall:8.4f} {o.f1:8.4f}")
        return "\n".join(rows)


def compute_prf(gold: list, pred: list) -> MetricsReport:
    """Positional scoring of predicted mark labels against gold.

    gold and pred are parallel lists of label-name sequences. Sequences must
    align one to one and position by position.
    """
    if len(gold) != len(pred):
        raise DataError(f"{len(gold)} gold sequences vs {len(pred)} predicted")
    report = MetricsReport()
    for index, (g_seq, p_seq) in enumerate(zip(gold, pred)):
        if len(g_seq) != len(p_seq):
            raise DataError(
                f"sequence {index}: gold length {len(g_seq)} vs predicted {len(p_seq)}")
        for g, p in zip(g_seq, p_seq):
            if g == p:
                if g != "O":
                    report.per_class[g].tp += 1
                continue
            if p != "O":
                report.per_class[p].fp += 1
            if g != "O":
                report.per_class[g].fn += 1
    return report


def decode_batches(model, batches: list[Batch]) -> tuple[list, list]:
    """Viterbi-decode punctuation batches; returns (gold, pred) label names."""
    gold, pred = [], []
    for batch in batches:
        out = punctuation_forward(Tape(), model, batch, train=False, decode=True)
        for row in range(batch.size):
            n = int(batch.lengths[row])
            gold.append([PUNCT_LABELS[i] for i in batch.labels[row, :n]])
            pred.append([PUNCT_LABELS[i] for i in out.predictions[row]])
    return gold, pred


def evaluate(model, seqs: list[LabeledSequence], vocab: Vocab,
             batch_size: int = 32) -> MetricsReport:
    """Batch-decode a labeled corpus and score it; deterministic."""
    batches = make_batches(seqs, vocab, batch_size, model.config.encoder.max_len,
                           shuffle_seed=None)
    gold, pred = decode_batches(model, batches)
    return compute_prf(gold, pred)


@dataclass
class PredictionOutput:
    words: list[str]
    labels: list[str]
    text: str


def restore(model, vocab: Vocab, raw_text: str) -> PredictionOutput:
    """Strip any existing marks, predict labels, and render punctuated text."""
    words = strip_marks(raw_text)  # raises DataError when nothing is left
    label_ids: list[int] = []
    max_len = model.config.encoder.max_len
    for start in range(0, len(words), max_len):
        chunk = words[start:start + max_len]
        label_ids.extend(predict_punctuation(model, vocab.encode(chunk)))
    labels = [PUNCT_LABELS[i] for i in label_ids]
    seq = LabeledSequence(tuple(words), tuple(labels), TASK_PUN)
    return PredictionOutput(words=words, labels=labels, text=detokenize(seq))
