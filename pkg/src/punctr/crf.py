"""Linear-chain CRF scoring and decoding.

A path through labels y_0..y_{T-1} scores
    start[y_0] + sum_t emission[t, y_t] + sum_t transitions[y_{t-1}, y_t] + stop[y_{T-1}]
and the sequence loss is log-partition minus the gold path score. The
partition function is computed by the forward recursion in log space on the
tape, so its gradients come from the same reverse pass as everything else.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import DataError

Array = np.ndarray


class CrfParams:
    """Transition matrix [from, to] plus explicit start/stop score vectors."""

    def __init__(self, num_labels: int, name: str = "crf"):
        if num_labels < 1:
            raise DataError(f"need at least one label, got {num_labels}")
        self.num_labels = num_labels
        self.transitions = Tensor(np.zeros((num_labels, num_labels)), requires_grad=True,
                                  name=f"{name}.transitions")
        self.start_scores = Tensor(np.zeros(num_labels), requires_grad=True,
                                   name=f"{name}.start")
        self.stop_scores = Tensor(np.zeros(num_labels), requires_grad=True,
                                  name=f"{name}.stop")

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(t.name, t) for t in (self.transitions, self.start_scores, self.stop_scores)]


def _lengths_or_full(emissions: Tensor, lengths: Array | None) -> Array:
    batch, length, _ = emissions.values.shape
    if lengths is None:
        return np.full(batch, length, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if lengths.shape != (batch,) or lengths.min() < 1 or lengths.max() > length:
        raise DataError(f"bad lengths {lengths} for emissions of shape {emissions.values.shape}")
    return lengths


def crf_log_partition_batch(tape: Tape, emissions: Tensor, crf: CrfParams,
                            lengths: Array | None = None) -> Tensor:
    """log Z per sequence for padded [B, T, L] emissions.

    alpha[b, j] is the log-sum of all length-t prefixes ending in label j.
    Rows whose sequence already ended keep their alpha frozen via a 0/1
    blend, so padded emissions never enter the chain.
    """
    lengths = _lengths_or_full(emissions, lengths)
    batch, length, num_labels = emissions.values.shape
    alpha = ad.add(tape, ad.slice_(tape, emissions, (slice(None), 0)), crf.start_scores)
    for t in range(1, length):
        scores = ad.add(tape, ad.reshape(tape, alpha, (batch, num_labels, 1)), crf.transitions)
        stepped = ad.add(tape, ad.logsumexp(tape, scores, axis=1),
                         ad.slice_(tape, emissions, (slice(None), t)))
        active = (t < lengths).astype(np.float64)[:, None]
        alpha = ad.add(tape, ad.mul(tape, stepped, Tensor(active)),
                       ad.mul(tape, alpha, Tensor(1.0 - active)))
    return ad.logsumexp(tape, ad.add(tape, alpha, crf.stop_scores), axis=1)


def crf_gold_score_batch(tape: Tape, emissions: Tensor, labels: Array, crf: CrfParams,
                         lengths: Array | None = None) -> Tensor:
    """Score of the gold paths, one scalar per sequence."""
    lengths = _lengths_or_full(emissions, lengths)
    batch, length, num_labels = emissions.values.shape
    labels = np.asarray(labels, dtype=np.int64)
    steps = np.arange(length)[None, :]
    valid = steps < lengths[:, None]
    if labels[valid].size and (labels[valid].min() < 0 or labels[valid].max() >= num_labels):
        raise DataError(f"gold label out of range [0, {num_labels})")

    emit_hot = np.zeros((batch, length, num_labels))
    rows, cols = np.nonzero(valid)
    emit_hot[rows, cols, labels[rows, cols]] = 1.0

    trans_counts = np.zeros((batch, num_labels, num_labels))
    for b in range(batch):
        for t in range(1, lengths[b]):
            trans_counts[b, labels[b, t - 1], labels[b, t]] += 1.0

    start_hot = np.zeros((batch, num_labels))
    start_hot[np.arange(batch), labels[:, 0]] = 1.0
    stop_hot = np.zeros((batch, num_labels))
    stop_hot[np.arange(batch), labels[np.arange(batch), lengths - 1]] = 1.0

    emit_sum = ad.sum_(tape, ad.mul(tape, emissions, Tensor(emit_hot)), axis=(1, 2))
    trans_sum = ad.sum_(tape, ad.mul(tape, Tensor(trans_counts), crf.transitions), axis=(1, 2))
    start_sum = ad.sum_(tape, ad.mul(tape, Tensor(start_hot), crf.start_scores), axis=1)
    stop_sum = ad.sum_(tape, ad.mul(tape, Tensor(stop_hot), crf.stop_scores), axis=1)
    return ad.add(tape, ad.add(tape, emit_sum, trans_sum), ad.add(tape, start_sum, stop_sum))


def crf_nll_batch(tape: Tape, emissions: Tensor, labels: Array, crf: CrfParams,
                  lengths: Array | None = None) -> Tensor:
    """Per-sequence negative log-likelihood, shape [B]."""
    log_z = crf_log_partition_batch(tape, emissions, crf, lengths)
    gold = crf_gold_score_batch(tape, emissions, labels, crf, lengths)
    return ad.add(tape, log_z, ad.mul(tape, gold, -1.0))


def _single(tape: Tape, emissions: Tensor) -> Tensor:
    return ad.reshape(tape, emissions, (1,) + emissions.values.shape)


def crf_log_partition(tape: Tape, emissions: Tensor, crf: CrfParams) -> Tensor:
    """log Z for one [T, L] emission matrix, as a scalar tensor."""
    out = crf_log_partition_batch(tape, _single(tape, emissions), crf)
    return ad.reshape(tape, out, ())


def crf_nll(tape: Tape, emissions: Tensor, labels, crf: CrfParams) -> Tensor:
    """Negative log-likelihood of one gold label sequence, as a scalar tensor."""
    labels = np.asarray(labels, dtype=np.int64)[None, :]
    out = crf_nll_batch(tape, _single(tape, emissions), labels, crf)
    return ad.reshape(tape, out, ())


def viterbi_decode(emissions, crf: CrfParams) -> list[int]:
    """Highest-scoring label path for one [T, L] emission matrix.

    Ties break toward the lowest label index at every backtracking choice:
    the final label is the lowest argmax of delta + stop, and each stored
    backpointer is the lowest argmax over predecessors. Equivalently, among
    all optimal paths this returns the one whose reversed label tuple is
    lexicographically smallest.
    """
    e = emissions.values if isinstance(emissions, Tensor) else np.asarray(emissions, dtype=float)
    trans = crf.transitions.values
    length, num_labels = e.shape
    delta = crf.start_scores.values + e[0]
    back = np.zeros((length, num_labels), dtype=np.int64)
    for t in range(1, length):
        scores = delta[:, None] + trans
        back[t] = scores.argmax(axis=0)
        delta = scores[back[t], np.arange(num_labels)] + e[t]
    label = int(np.argmax(delta + crf.stop_scores.values))
    path = [label]
    for t in range(length - 1, 0, -1):
        label = int(back[t, label])
        path.append(label)
    path.reverse()
    return path
