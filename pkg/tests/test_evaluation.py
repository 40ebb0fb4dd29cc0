import csv

import numpy as np
import pytest

from eapgp.evaluation import (
    SWEEP_COLUMNS,
    DegenerateTaskError,
    compute_baselines,
    edges_for_sparsity,
    evaluate_circuit,
    faithfulness_sweep,
    normalized_faithfulness,
    report_for,
    sweep_to_csv,
)
from eapgp.graph import Circuit, ComputationalGraph, GraphMismatchError
from eapgp.model import ModelConfig, Transformer
from eapgp.tasks import gen_induction


@pytest.fixture(scope="module")
def setup():
    model = Transformer(ModelConfig(n_layers=2, n_heads=2, d_model=16, d_head=8, d_mlp=32, seed=1))
    batch = gen_induction(0, 16)
    return model, model.graph, batch, compute_baselines(model, batch)


def test_nfs_reference_values():
    assert normalized_faithfulness(3.80, 3.80, 0.03) == pytest.approx(1.0)
    assert normalized_faithfulness(0.03, 3.80, 0.03) == 0.0
    assert normalized_faithfulness(1.5, 2.0, 1.0) == 0.5


def test_nfs_not_clipped():
    assert normalized_faithfulness(3.0, 2.0, 1.0) == 2.0
    assert normalized_faithfulness(0.0, 2.0, 1.0) == -1.0


def test_nfs_degenerate_task():
    with pytest.raises(DegenerateTaskError, match="degenerate task"):
        normalized_faithfulness(1.0, 2.0, 2.0)


def test_full_and_empty_circuits(setup):
    model, g, batch, base = setup
    assert evaluate_circuit(model, g, Circuit.full(g), batch, base) == base.delta_plus
    assert evaluate_circuit(model, g, Circuit.empty(g), batch, base) == pytest.approx(base.delta_minus, abs=1e-6)
    full = report_for(model, g, Circuit.full(g), batch, g.n_edges, base)
    empty = report_for(model, g, Circuit.empty(g), batch, 0, base)
    assert abs(full.nfs - 1) < 1e-6 and abs(empty.nfs) < 1e-6
    assert full.sparsity == 0.0 and empty.sparsity == 1.0


def test_evaluate_without_precomputed_baselines(setup):
    model, g, batch, base = setup
    assert evaluate_circuit(model, g, Circuit.full(g), batch) == base.delta_plus


def test_graph_mismatch(setup):
    model, g, batch, base = setup
    other = ComputationalGraph(1, 2)
    with pytest.raises(GraphMismatchError):
        evaluate_circuit(model, other, Circuit.full(other), batch, base)
    with pytest.raises(GraphMismatchError):
        evaluate_circuit(model, g, Circuit.full(ComputationalGraph(2, 2, "x")), batch, base)


def test_sweep_zero_sparsity_is_faithful(setup):
    model, g, batch, base = setup
    scores = np.random.default_rng(0).standard_normal(g.n_edges)
    (row,) = faithfulness_sweep(model, g, scores, [0.0], batch, baselines=base)
    assert row.n_edges_selected == g.n_edges and row.nfs == pytest.approx(1.0, abs=1e-6)


def test_sweep_rows_follow_levels(setup):
    model, g, batch, base = setup
    scores = np.random.default_rng(1).standard_normal(g.n_edges)
    levels = [0.1, 0.5, 0.9, 0.99]
    rows = faithfulness_sweep(model, g, scores, levels, batch, method="eap", k=None, baselines=base)
    assert [r.sparsity for r in rows] == levels
    assert [r.n_edges_selected for r in rows] == [edges_for_sparsity(x, g.n_edges) for x in levels]
    assert all(r.n_edges_after_prune <= r.n_edges_selected for r in rows)
    again = faithfulness_sweep(model, g, scores, levels, batch, baselines=base)
    assert [r.delta_c for r in rows] == [r.delta_c for r in again]


def test_edges_for_sparsity():
    assert edges_for_sparsity(0.9, 46) == 5
    assert edges_for_sparsity(0.975, 32491) == 812
    with pytest.raises(ValueError):
        edges_for_sparsity(1.0, 10)


def test_sweep_csv_columns(setup, tmp_path):
    model, g, batch, base = setup
    scores = np.random.default_rng(2).standard_normal(g.n_edges)
    rows = faithfulness_sweep(model, g, scores, [0.5, 0.9], batch, method="eap-ig", k=5, baselines=base)
    path = sweep_to_csv(rows, tmp_path / "out" / "sweep.csv")
    with open(path) as f:
        got = list(csv.reader(f))
    assert tuple(got[0]) == SWEEP_COLUMNS
    assert len(got) == 3
    assert got[1][3] == "eap-ig" and got[1][4] == "5"
    assert float(got[2][8]) == rows[1].nfs
    no_time = sweep_to_csv(rows, tmp_path / "b.csv", include_time=False).read_text()
    assert "wall_time_s" not in no_time
