"""Circuit faithfulness under interventions, normalized faithfulness, sparsity sweeps."""

from __future__ import annotations

import csv
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Circuit, ComputationalGraph, GraphMismatchError, extract_circuit
from .metrics import MetricSpec, batch_metric, logit_diff, prob_diff  # noqa: F401  (re-exported)
from .model import ActivationCache, InterventionSpec, Transformer


class DegenerateTaskError(ValueError):
    pass


@dataclass
class FaithfulnessReport:
    delta_plus: float
    delta_minus: float
    delta_c: float
    nfs: float
    sparsity: float
    n_edges_selected: int
    n_edges_after_prune: int
    method: str | None = None
    k: int | None = None
    wall_time: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Baselines:
    """Both runs of a batch, computed once and reused by every circuit evaluated on it."""

    clean_cache: ActivationCache
    corrupted_cache: ActivationCache
    delta_plus: float
    delta_minus: float


def compute_baselines(model: Transformer, batch) -> Baselines:
    clean_logits, clean = model.forward_with_cache(batch.clean_tokens)
    corrupted_logits, corrupted = model.forward_with_cache(batch.corrupted_tokens)
    return Baselines(
        clean,
        corrupted,
        float(np.mean(batch_metric(clean_logits, batch.metrics))),
        float(np.mean(batch_metric(corrupted_logits, batch.metrics))),
    )


def _check_graph(model: Transformer, graph: ComputationalGraph) -> None:
    if graph.config_hash != model.graph.config_hash or graph.n_edges != model.graph.n_edges:
        raise GraphMismatchError(f"graph {graph!r} was not built for model {model!r}")


def evaluate_circuit(
    model: Transformer, graph: ComputationalGraph, circuit: Circuit, batch, baselines: Baselines | None = None
) -> float:
    """Mean task metric with every edge outside ``circuit`` carrying its corrupted activation."""
    _check_graph(model, graph)
    if circuit.graph.n_edges != graph.n_edges or circuit.graph.config_hash != graph.config_hash:
        raise GraphMismatchError("circuit belongs to a different graph")
    if baselines is None:
        baselines = compute_baselines(model, batch)
    spec = InterventionSpec.from_circuit(circuit, baselines.clean_cache, baselines.corrupted_cache)
    logits = model.patched_forward(batch.clean_tokens, spec)
    return float(np.mean(batch_metric(logits, batch.metrics)))


def normalized_faithfulness(delta_c: float, delta_plus: float, delta_minus: float) -> float:
    """``(delta_c - delta_minus) / (delta_plus - delta_minus)``, not clipped."""
    if delta_plus == delta_minus:
        raise DegenerateTaskError(f"degenerate task: clean and corrupted metrics are both {delta_plus}")
    return (delta_c - delta_minus) / (delta_plus - delta_minus)


def report_for(
    model: Transformer,
    graph: ComputationalGraph,
    circuit: Circuit,
    batch,
    n_selected: int,
    baselines: Baselines | None = None,
    method: str | None = None,
    k: int | None = None,
    started: float | None = None,
) -> FaithfulnessReport:
    start = time.perf_counter() if started is None else started
    if baselines is None:
        baselines = compute_baselines(model, batch)
    delta_c = evaluate_circuit(model, graph, circuit, batch, baselines)
    return FaithfulnessReport(
        delta_plus=baselines.delta_plus,
        delta_minus=baselines.delta_minus,
        delta_c=delta_c,
        nfs=normalized_faithfulness(delta_c, baselines.delta_plus, baselines.delta_minus),
        sparsity=1.0 - n_selected / graph.n_edges,
        n_edges_selected=int(n_selected),
        n_edges_after_prune=circuit.n_edges,
        method=method,
        k=k,
        wall_time=time.perf_counter() - start,
    )


def edges_for_sparsity(level: float, n_edges: int) -> int:
    if not 0.0 <= level < 1.0:
        raise ValueError(f"sparsity level must lie in [0, 1), got {level}")
    return int(round((1.0 - level) * n_edges))


def faithfulness_sweep(
    model: Transformer,
    graph: ComputationalGraph,
    scores,
    sparsity_levels: Sequence[float],
    batch,
    method: str | None = None,
    k: int | None = None,
    baselines: Baselines | None = None,
) -> list[FaithfulnessReport]:
    """One report per level, in the order given; ``n = round((1 - level) * |E|)``."""
    values = getattr(scores, "scores", scores)
    method = method if method is not None else getattr(scores, "method", None)
    k = k if k is not None else getattr(scores, "k", None)
    counts = [edges_for_sparsity(level, graph.n_edges) for level in sparsity_levels]
    if baselines is None:
        baselines = compute_baselines(model, batch)
    rows = []
    for level, n in zip(sparsity_levels, counts):
        start = time.perf_counter()
        circuit = extract_circuit(graph, values, n, method=method, k=k)
        report = report_for(model, graph, circuit, batch, n, baselines, method, k, start)
        report.sparsity = float(level)
        rows.append(report)
    return rows


SWEEP_COLUMNS = (
    "sparsity",
    "n_selected",
    "n_after_prune",
    "method",
    "k",
    "delta_plus",
    "delta_minus",
    "delta_c",
    "nfs",
    "wall_time_s",
)


def sweep_to_csv(rows: Sequence[FaithfulnessReport], path, include_time: bool = True) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = SWEEP_COLUMNS if include_time else SWEEP_COLUMNS[:-1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for r in rows:
            line = [
                repr(r.sparsity),
                r.n_edges_selected,
                r.n_edges_after_prune,
                r.method or "",
                "" if r.k is None else r.k,
                repr(r.delta_plus),
                repr(r.delta_minus),
                repr(r.delta_c),
                repr(r.nfs),
                f"{r.wall_time:.6f}",
            ]
            w.writerow(line[: len(cols)])
    return path
