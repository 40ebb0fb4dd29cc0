"""Task metrics on logits: logit difference and probability difference."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad

KINDS = ("logit_diff", "prob_diff")


@dataclass(frozen=True)
class MetricSpec:
    kind: str
    correct_ids: tuple[int, ...]
    incorrect_ids: tuple[int, ...] = field(default=())
    answer_position: int = -1

    def __post_init__(self) -> None:
        object.__setattr__(self, "correct_ids", tuple(int(i) for i in self.correct_ids))
        object.__setattr__(self, "incorrect_ids", tuple(int(i) for i in self.incorrect_ids))
        if self.kind not in KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}; expected one of {KINDS}")
        if not self.correct_ids:
            raise ValueError("correct_ids must be nonempty")
        if set(self.correct_ids) & set(self.incorrect_ids):
            raise ValueError("correct_ids and incorrect_ids overlap")
        if self.kind == "logit_diff" and (len(self.correct_ids) != 1 or len(self.incorrect_ids) != 1):
            raise ValueError("logit_diff needs exactly one correct and one incorrect id")
        # prob_diff tolerates an empty incorrect set (P(correct) alone)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "correct_ids": list(self.correct_ids),
            "incorrect_ids": list(self.incorrect_ids),
            "answer_position": self.answer_position,
        }

    @classmethod
    def from_dict(cls, d: dict) -> MetricSpec:
        return cls(d["kind"], tuple(d["correct_ids"]), tuple(d.get("incorrect_ids", ())), int(d.get("answer_position", -1)))

    def max_id(self) -> int:
        return max(self.correct_ids + self.incorrect_ids)


def _check_ids(metrics: Sequence[MetricSpec], vocab: int) -> None:
    for i, m in enumerate(metrics):
        bad = [t for t in m.correct_ids + m.incorrect_ids if not 0 <= t < vocab]
        if bad:
            raise ValueError(f"metric {i}: token id {bad[0]} out of vocab [0, {vocab})")


def _weights(metrics: Sequence[MetricSpec], vocab: int, seq: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    _check_ids(metrics, vocab)
    w = np.zeros((len(metrics), vocab), dtype=dtype)
    pos = np.empty(len(metrics), dtype=np.int64)
    for b, m in enumerate(metrics):
        w[b, list(m.correct_ids)] = 1.0
        if m.incorrect_ids:
            w[b, list(m.incorrect_ids)] = -1.0
        p = m.answer_position
        if not -seq <= p < seq:
            raise IndexError(f"answer_position {p} outside sequence of length {seq}")
        pos[b] = p % seq
    return w, pos


def metric_tensor(logits: ad.Tensor, metrics: Sequence[MetricSpec]) -> ad.Tensor:
    """Per-example metric values ``[batch]`` as a differentiable tensor."""
    b, s, v = logits.shape
    if len(metrics) != b:
        raise ValueError(f"{len(metrics)} metric specs for a batch of {b}")
    kinds = {m.kind for m in metrics}
    if len(kinds) != 1:
        raise ValueError(f"mixed metric kinds in one batch: {sorted(kinds)}")
    w, pos = _weights(metrics, v, s, logits.dtype)
    at = logits[np.arange(b), pos]
    if kinds == {"prob_diff"}:
        at = ad.softmax(at, axis=-1)
    # log-softmax normalization cancels in a difference of two log-probs
    return (at * w).sum(axis=-1)


def mean_metric_loss(metrics: Sequence[MetricSpec]):
    """Loss callable ``logits -> scalar``: batch mean of the task metric."""
    metrics = list(metrics)

    def loss(logits: ad.Tensor) -> ad.Tensor:
        return metric_tensor(logits, metrics).mean()

    loss.metrics = metrics
    return loss


def batch_metric(logits: np.ndarray, metrics: Sequence[MetricSpec]) -> np.ndarray:
    return metric_tensor(ad.Tensor(logits), metrics).data


def _single(logits, metric: MetricSpec, kind: str) -> float:
    arr = np.asarray(logits)
    if arr.ndim == 1:
        arr = arr[None, :]
    if metric.kind != kind:
        metric = MetricSpec(kind, metric.correct_ids, metric.incorrect_ids, metric.answer_position)
    return float(batch_metric(arr[None], [metric])[0])


def logit_diff(logits, metric: MetricSpec) -> float:
    """log P(correct) - log P(misleading) at the answer position of one example.

    ``logits`` is ``[seq, vocab]`` (or a single ``[vocab]`` row).
    """
    return _single(logits, metric, "logit_diff")


def prob_diff(logits, metric: MetricSpec) -> float:
    """sum P(correct) - sum P(incorrect) under softmax at the answer position."""
    return _single(logits, metric, "prob_diff")
