"""Deterministic paired clean/corrupted token tasks.

Each generator is a pure function of its seed and size arguments.  Tokens are
plain integers; no tokenizer is involved.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .metrics import MetricSpec


class TaskValidationError(ValueError):
    pass


@dataclass
class TaskBatch:
    clean_tokens: np.ndarray
    corrupted_tokens: np.ndarray
    metrics: list[MetricSpec]
    vocab_size: int
    declared_positions: list[tuple[int, ...]] | None = None
    name: str = "custom"
    reference_circuit: object | None = None
    meta: dict = field(default_factory=dict)
    # optional dense next-token targets for training, -1 where unsupervised
    train_targets: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.clean_tokens = np.asarray(self.clean_tokens, dtype=np.int64)
        self.corrupted_tokens = np.asarray(self.corrupted_tokens, dtype=np.int64)
        if self.train_targets is not None:
            self.train_targets = np.asarray(self.train_targets, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.clean_tokens)

    @property
    def seq_len(self) -> int:
        return self.clean_tokens.shape[1]

    def validate(self) -> TaskBatch:
        c, k = self.clean_tokens, self.corrupted_tokens
        if c.ndim != 2 or c.shape != k.shape:
            raise TaskValidationError(f"clean {c.shape} and corrupted {k.shape} shapes differ")
        if len(self.metrics) != len(c):
            raise TaskValidationError(f"{len(self.metrics)} metrics for {len(c)} examples")
        for arr, label in ((c, "clean"), (k, "corrupted")):
            if arr.size and (arr.min() < 0 or arr.max() >= self.vocab_size):
                raise TaskValidationError(f"{label} token ids outside [0, {self.vocab_size})")
        for i, m in enumerate(self.metrics):
            if m.max_id() >= self.vocab_size:
                raise TaskValidationError(f"example {i}: answer id {m.max_id()} >= vocab {self.vocab_size}")
            if not -self.seq_len <= m.answer_position < self.seq_len:
                raise TaskValidationError(f"example {i}: answer_position {m.answer_position} out of range")
        if self.train_targets is not None:
            t = self.train_targets
            if t.shape != c.shape or t.max(initial=-1) >= self.vocab_size or t.min(initial=-1) < -1:
                raise TaskValidationError("train_targets must match the token shape with ids in [-1, vocab)")
        if self.declared_positions is not None:
            for i, declared in enumerate(self.declared_positions):
                diff = set(np.flatnonzero(c[i] != k[i]).tolist())
                if not diff <= set(declared):
                    raise TaskValidationError(f"example {i}: tokens differ at {sorted(diff)}, declared {declared}")
        return self

    def subset(self, idx) -> TaskBatch:
        idx = np.asarray(idx)
        return TaskBatch(
            self.clean_tokens[idx],
            self.corrupted_tokens[idx],
            [self.metrics[i] for i in idx],
            self.vocab_size,
            None if self.declared_positions is None else [self.declared_positions[i] for i in idx],
            self.name,
            self.reference_circuit,
            dict(self.meta),
            None if self.train_targets is None else self.train_targets[idx],
        )

    def shuffled(self, seed: int) -> TaskBatch:
        return self.subset(np.random.default_rng(seed).permutation(len(self)))

    def chunks(self, size: int) -> Iterator[TaskBatch]:
        for start in range(0, len(self), size):
            yield self.subset(np.arange(start, min(start + size, len(self))))

    # -- JSONL ----------------------------------------------------------------

    def to_jsonl(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for c, k, m in zip(self.clean_tokens, self.corrupted_tokens, self.metrics):
                row = {"clean_tokens": c.tolist(), "corrupted_tokens": k.tolist(), "metric": m.to_dict()}
                f.write(json.dumps(row) + "\n")
        return path

    @classmethod
    def from_jsonl(cls, path, vocab_size: int | None = None, name: str | None = None) -> TaskBatch:
        clean, corrupted, metrics = [], [], []
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    clean.append(row["clean_tokens"])
                    corrupted.append(row["corrupted_tokens"])
                    metrics.append(MetricSpec.from_dict(row["metric"]))
                except (KeyError, ValueError, TypeError) as e:
                    raise TaskValidationError(f"{path}:{lineno}: {e}") from None
        if not clean:
            raise TaskValidationError(f"{path}: no examples")
        if len({len(r) for r in clean + corrupted}) != 1:
            raise TaskValidationError(f"{path}: all token rows must have the same length")
        c, k = np.array(clean), np.array(corrupted)
        if vocab_size is None:
            vocab_size = int(max(c.max(), k.max(), max(m.max_id() for m in metrics))) + 1
        declared = [tuple(np.flatnonzero(a != b).tolist()) for a, b in zip(c, k)]
        return cls(c, k, metrics, vocab_size, declared, name or Path(path).stem).validate()


def concat_batches(batches: Sequence[TaskBatch]) -> TaskBatch:
    first = batches[0]
    return TaskBatch(
        np.concatenate([b.clean_tokens for b in batches]),
        np.concatenate([b.corrupted_tokens for b in batches]),
        [m for b in batches for m in b.metrics],
        max(b.vocab_size for b in batches),
        None if any(b.declared_positions is None for b in batches) else [p for b in batches for p in b.declared_positions],
        first.name,
    )


# -- induction ----------------------------------------------------------------


def induction_targets(tokens: np.ndarray) -> np.ndarray:
    """Dense induction targets: where a token has exactly one earlier occurrence
    (not immediately before it), the target is the token that followed it.

    The final ``A`` of an induction prompt is one such position, so these
    targets agree with the metric's answer while giving several training
    signals per sequence.
    """
    tokens = np.asarray(tokens)
    B, S = tokens.shape
    out = np.full((B, S), -1, dtype=np.int64)
    same = tokens[:, :, None] == tokens[:, None, :]  # [b, i, j]
    earlier = np.tril(np.ones((S, S), dtype=bool), k=-1)
    hits = same & earlier
    unique = hits.sum(-1) == 1
    j = hits.argmax(-1)
    ok = unique & (j < np.arange(S) - 1)
    b, i = np.nonzero(ok)
    out[b, i] = tokens[b, j[b, i] + 1]
    return out


def gen_induction(seed: int, batch: int, seq: int = 12, vocab: int = 16) -> TaskBatch:
    """``... A B ... C D ... A`` -> ``B``; the corruption swaps the final ``A`` for ``C``.

    The corrupted prompt therefore points at ``D``, and the metric is
    ``logit(B) - logit(D)`` at the last position.  ``A`` and ``C`` occur
    exactly once before the final token.
    """
    if vocab < 8:
        raise ValueError(f"induction needs vocab >= 8, got {vocab}")
    if seq < 6:
        raise ValueError(f"induction needs seq >= 6, got {seq}")
    rng = np.random.default_rng(seed)
    clean = np.empty((batch, seq), dtype=np.int64)
    corrupted = np.empty_like(clean)
    metrics, declared = [], []
    starts = [(p, q) for p in range(seq - 2) for q in range(seq - 2) if abs(p - q) >= 2]
    for i in range(batch):
        a, b, c, d = rng.choice(vocab, size=4, replace=False)
        filler = np.setdiff1d(np.arange(vocab), [a, b, c, d])
        row = rng.choice(filler, size=seq)
        p, q = starts[rng.integers(len(starts))]
        row[p], row[p + 1], row[q], row[q + 1] = a, b, c, d
        row[-1] = a
        clean[i] = row
        row[-1] = c
        corrupted[i] = row
        metrics.append(MetricSpec("logit_diff", (int(b),), (int(d),), -1))
        declared.append((seq - 1,))
    return TaskBatch(
        clean, corrupted, metrics, vocab, declared, "induction", meta={"seed": seed}, train_targets=induction_targets(clean)
    ).validate()


def induction_stream(seed: int, batch: int, seq: int = 12, vocab: int = 16) -> Iterator[TaskBatch]:
    """Endless fresh induction batches, one child seed per batch."""
    ss = np.random.SeedSequence(seed)
    while True:
        (child,) = ss.spawn(1)
        yield gen_induction(int(child.generate_state(1)[0]), batch, seq, vocab)


# -- greater-than ----------------------------------------------------------------

# token ids 0..99 are the two-digit numbers "00".."99"
GT_THE, GT_LASTED, GT_FROM, GT_YEAR, GT_TO = 100, 101, 102, 103, 104
GT_NOUNS = tuple(range(105, 110))
GT_VOCAB = 110
GT_CENTURIES = tuple(range(11, 18))


def gen_greater_than_toy(seed: int, batch: int) -> TaskBatch:
    """``The <noun> lasted from the year CC YY to the year CC`` -> any two-digit ``> YY``.

    The corruption sets the start year to ``01``, which makes every
    continuation consistent with the ordering.  Metric: probability of years
    above ``YY`` minus probability of years at or below it.
    """
    rng = np.random.default_rng(seed)
    nouns = rng.choice(GT_NOUNS, size=batch)
    cents = rng.choice(GT_CENTURIES, size=batch)
    years = rng.integers(2, 99, size=batch)
    clean = np.empty((batch, 12), dtype=np.int64)
    clean[:, 0] = GT_THE
    clean[:, 1] = nouns
    clean[:, 2] = GT_LASTED
    clean[:, 3] = GT_FROM
    clean[:, 4] = GT_THE
    clean[:, 5] = GT_YEAR
    clean[:, 6] = cents
    clean[:, 7] = years
    clean[:, 8] = GT_TO
    clean[:, 9] = GT_THE
    clean[:, 10] = GT_YEAR
    clean[:, 11] = cents
    corrupted = clean.copy()
    corrupted[:, 7] = 1
    metrics = [
        MetricSpec("prob_diff", tuple(range(int(y) + 1, 100)), tuple(range(0, int(y) + 1)), -1) for y in years
    ]
    return TaskBatch(clean, corrupted, metrics, GT_VOCAB, [(7,)] * batch, "greater_than", meta={"seed": seed}).validate()


# -- indirect object identification ---------------------------------------------

IOI_WHEN, IOI_AND, IOI_WENT, IOI_TO, IOI_THE, IOI_COMMA, IOI_GAVE, IOI_A = range(8)
IOI_PLACES = tuple(range(8, 12))
IOI_OBJECTS = tuple(range(12, 16))
IOI_NAMES = tuple(range(16, 28))
IOI_VOCAB = 28


def gen_toy_ioi(seed: int, batch: int, names: Sequence[int] = IOI_NAMES) -> TaskBatch:
    """``When A and B went to the <place>, B gave a <object> to`` -> ``A``.

    Half the prompts mention the names in the opposite order (BABA).  The
    corruption replaces the second ``B`` with a third name ``C``; metric is
    ``logit(A) - logit(B)``.
    """
    names = np.asarray(names)
    if len(names) < 3:
        raise ValueError("toy IOI needs at least 3 names")
    rng = np.random.default_rng(seed)
    clean = np.empty((batch, 14), dtype=np.int64)
    corrupted = np.empty_like(clean)
    metrics = []
    for i in range(batch):
        a, b, c = rng.choice(names, size=3, replace=False)
        first, second = (a, b) if rng.random() < 0.5 else (b, a)
        place, obj = rng.choice(IOI_PLACES), rng.choice(IOI_OBJECTS)
        row = [IOI_WHEN, first, IOI_AND, second, IOI_WENT, IOI_TO, IOI_THE, place, IOI_COMMA, b, IOI_GAVE, IOI_A, obj, IOI_TO]
        clean[i] = row
        corrupted[i] = row
        corrupted[i, 9] = c
        metrics.append(MetricSpec("logit_diff", (int(a),), (int(b),), -1))
    return TaskBatch(clean, corrupted, metrics, IOI_VOCAB, [(9,)] * batch, "ioi", meta={"seed": seed}).validate()


GENERATORS = {
    "induction": gen_induction,
    "greater_than": gen_greater_than_toy,
    "ioi": gen_toy_ioi,
}


def make_task(name: str, seed: int, batch: int, **kwargs) -> TaskBatch:
    try:
        gen = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; choose from {sorted(GENERATORS)}") from None
    return gen(seed, batch, **kwargs)


def task_vocab(name: str, **kwargs) -> int:
    if name == "induction":
        return int(kwargs.get("vocab", 16))
    return {"greater_than": GT_VOCAB, "ioi": IOI_VOCAB}[name]
