import csv

import numpy as np
import pytest

from eapgp import autodiff as ad
from eapgp.attribution import (
    DoubleSigmoidToy,
    EdgeScores,
    PathSpec,
    build_gradpath,
    build_straight_line,
    compute_scores,
    diagnostics_to_csv,
    eap_gp_scores,
    eap_ig_scores,
    eap_scores,
    function_saturation_profile,
    gradpath,
    integrated_gradients,
    run_pipeline,
    saturation_profile,
    scores_from_csv,
    scores_to_csv,
    straight_line_path,
)
from eapgp.evaluation import compute_baselines
from eapgp.metrics import batch_metric
from eapgp.model import InterventionSpec, ModelConfig, Transformer, linear_surrogate, train_toy
from eapgp.tasks import GENERATORS, TaskBatch, gen_induction, induction_stream, make_task, task_vocab


def small_model(dtype="float64", **kw):
    cfg = dict(n_layers=2, n_heads=2, d_model=16, d_head=8, d_mlp=32, seed=2, dtype=dtype)
    cfg.update(kw)
    return Transformer(ModelConfig(**cfg))


def patching_deltas(model, batch, base):
    g = model.graph
    out = np.zeros(g.n_edges)
    for e in range(g.n_edges):
        corrupt = np.zeros(g.n_edges, dtype=bool)
        corrupt[e] = True
        logits = model.patched_forward(batch.clean_tokens, InterventionSpec(corrupt, base.clean_cache, base.corrupted_cache))
        out[e] = np.mean(batch_metric(logits, batch.metrics)) - base.delta_plus
    return out


# -- paths ---------------------------------------------------------------------


def test_straight_line_points():
    p = straight_line_path(np.float64(1.0), np.float64(0.0), 4)
    np.testing.assert_array_equal(p.points, [0.25, 0.5, 0.75, 1.0])
    x = np.arange(6.0).reshape(2, 3)
    one = straight_line_path(x, np.zeros_like(x), 1)
    np.testing.assert_array_equal(one.points, [x])
    same = straight_line_path(x, x, 5)
    np.testing.assert_array_equal(same.points, np.stack([x] * 5))


def test_straight_line_rejects_bad_input():
    with pytest.raises(ValueError):
        straight_line_path(np.zeros(2), np.zeros(2), 0)
    with pytest.raises(ad.ShapeError):
        straight_line_path(np.zeros(2), np.zeros(3), 2)


def test_gradpath_starts_at_clean_activation():
    model = small_model()
    batch = gen_induction(0, 4)
    base = compute_baselines(model, batch)
    path = build_gradpath(model, batch, 4, baselines=base)
    assert path.points[0].tobytes() == base.clean_cache["input"].tobytes()
    assert path.k == 4 and path.step_norms.shape == (4, 4)


def test_gradpath_unit_steps():
    model = small_model()
    batch = gen_induction(1, 4)
    path = build_gradpath(model, batch, 6)
    assert np.all(path.terminated_at == -1)
    np.testing.assert_allclose(path.step_lengths(), 1.0, atol=1e-5)


def test_gradpath_endpoint_budget_steps():
    model = small_model()
    batch = gen_induction(1, 4)
    base = compute_baselines(model, batch)
    path = build_gradpath(model, batch, 5, PathSpec("gradpath", 5, step_rule="endpoint_budget"), base)
    dist = np.sqrt(((base.clean_cache["input"] - base.corrupted_cache["input"]) ** 2).sum(axis=(1, 2)))
    np.testing.assert_allclose(path.step_lengths(), np.broadcast_to(dist / 5, (4, 4)), rtol=1e-6)


def test_gradpath_orthogonal_map_follows_straight_line():
    rng = np.random.default_rng(0)
    W, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    # one example, a single row
    x, xp = rng.standard_normal((1, 6)) * 4, rng.standard_normal((1, 6)) * 4
    path = gradpath(lambda g: g @ ad.Tensor(W.T), x, xp, 5)
    u = ((x - xp) / np.linalg.norm(x - xp))[0]

    def off_line(p):
        d = (p - xp)[0]
        return np.linalg.norm(d - np.dot(d, u) * u)

    assert max(off_line(p) for p in path.points) < 1e-9
    assert max(off_line(p) for p in straight_line_path(x, xp, 5).points) < 1e-9
    np.testing.assert_allclose(path.step_lengths(), 1.0, atol=1e-12)


def test_gradpath_degenerate_gradient_fills_straight_line():
    x, xp = np.array([3.0, 0.0]), np.array([-1.0, 0.0])
    path = gradpath(lambda g: g * 0.0, x, xp, 4)
    assert path.terminated_at[0] == 0
    np.testing.assert_allclose(path.points[:, 0], [3.0, 2.0, 1.0, 0.0])
    assert path.endpoint_residual[0] == pytest.approx(0.0, abs=1e-12)


def test_gradpath_non_finite_output_raises():
    with np.errstate(invalid="ignore"), pytest.raises(ad.NonFiniteError, match="step 0"):
        gradpath(lambda g: ad.log(g * 0.0 - 1.0), np.ones(2), np.zeros(2), 3, target=np.zeros(2))


def test_path_spec_validation():
    with pytest.raises(ValueError):
        PathSpec(k=0)
    with pytest.raises(ValueError):
        PathSpec(mode="curved")
    with pytest.raises(ValueError):
        PathSpec(step_rule="huge")
    assert PathSpec().to_dict()["mode"] == "straight_line"


# -- integrated gradients on plain functions --------------------------------------


def test_ig_completeness_quadratic():
    k = 256
    attr = integrated_gradients(lambda t: t * t, np.float64(1.0), np.float64(0.0), k)
    assert float(attr) == pytest.approx((k + 1) / k, abs=1e-12)
    assert abs(float(attr) - 1.0) <= 0.004


def test_ig_convergence_in_k():
    model = small_model()
    batch = gen_induction(3, 8)
    base = compute_baselines(model, batch)
    s = {k: eap_ig_scores(model, None, batch, k, baselines=base).scores for k in (4, 8, 16, 32, 64)}
    gaps = [np.abs(s[2 * k] - s[k]).max() for k in (4, 8, 16, 32)]
    assert all(b <= a for a, b in zip(gaps, gaps[1:]))


# -- saturation ------------------------------------------------------------------------


def test_linear_function_never_saturates():
    prof = function_saturation_profile(lambda t: t * 3.0, straight_line_path(np.float64(1.0), np.float64(0.0), 10), 0.9)
    assert prof.fraction == 0.0


def test_single_sigmoid_saturates_only_at_far_end():
    f = lambda t: ad.sigmoid((t - 0.5) * 10.0)  # noqa: E731
    prof = function_saturation_profile(f, straight_line_path(np.float64(1.0), np.float64(0.0), 10), 0.05)
    # sigma' relative to its peak at t=0.5: only t=1.0 drops below 5%
    t = np.arange(1, 11) / 10
    d = np.exp(-10 * (t - 0.5)) / (1 + np.exp(-10 * (t - 0.5))) ** 2
    np.testing.assert_array_equal(prof.saturated[:, 0], d < 0.05 * d.max())
    assert prof.fraction == pytest.approx(0.1)


def test_double_sigmoid_profiles():
    toy = DoubleSigmoidToy()
    line = function_saturation_profile(toy.loss, toy.straight_line(10), 0.05)
    gp = function_saturation_profile(toy.loss, toy.gradpath(10), 0.05)
    budget = function_saturation_profile(toy.loss, toy.gradpath(10, "endpoint_budget"), 0.05)
    assert line.fraction == pytest.approx(0.5)
    assert gp.fraction < line.fraction
    # in one dimension a budgeted descent is the straight line walked backwards
    assert budget.fraction == line.fraction


def test_saturation_errors():
    p = straight_line_path(np.float64(1.0), np.float64(0.0), 3)
    with pytest.raises(ValueError):
        function_saturation_profile(lambda t: t, p, 0.0)
    empty = straight_line_path(np.float64(1.0), np.float64(0.0), 1)
    empty.points = empty.points[:0]
    with pytest.raises(ValueError, match="empty"):
        function_saturation_profile(lambda t: t, empty, 0.1)


def test_model_saturation_profile_shape_and_linear_case():
    model = linear_surrogate(ModelConfig(n_layers=1, n_heads=2, d_model=8, d_head=4, d_mlp=8, dtype="float64"))
    batch = gen_induction(0, 4)
    path = build_straight_line(model, batch, 6)
    prof = saturation_profile(model, batch, path, 0.5)
    assert prof.norms.shape == (6, model.graph.n_channels)
    assert prof.fraction == 0.0


# -- edge scores -------------------------------------------------------------------------


def test_identical_inputs_give_zero_scores():
    model = small_model()
    b = gen_induction(0, 4)
    same = TaskBatch(b.clean_tokens, b.clean_tokens, b.metrics, b.vocab_size)
    for method in ("eap", "eap-ig", "eap-gp"):
        assert not np.any(compute_scores(model, None, same, method, k=3).scores)


def test_gradpath_k1_equals_eap():
    model = small_model()
    batch = gen_induction(4, 8)
    base = compute_baselines(model, batch)
    e = eap_scores(model, None, batch, "clean", base).scores
    gp = eap_gp_scores(model, None, batch, 1, baselines=base).scores
    assert np.abs(gp - e).max() <= 1e-6


@pytest.mark.parametrize("k", [1, 2, 5, 10])
def test_linear_surrogate_methods_agree_with_patching(k):
    model = linear_surrogate(ModelConfig(n_layers=2, n_heads=2, d_model=8, d_head=4, d_mlp=8, seed=1, dtype="float64"))
    batch = gen_induction(2, 6)
    base = compute_baselines(model, batch)
    e = eap_scores(model, None, batch, baselines=base).scores
    ig = eap_ig_scores(model, None, batch, k, baselines=base).scores
    gp = eap_gp_scores(model, None, batch, k, baselines=base).scores
    assert np.abs(ig - e).max() <= 1e-6
    assert np.abs(gp - e).max() <= 1e-6
    assert np.abs(e - patching_deltas(model, batch, base)).max() <= 1e-6


def test_corrupted_grad_point_differs_on_nonlinear_model():
    model = small_model()
    batch = gen_induction(5, 4)
    a = eap_scores(model, None, batch, "clean").scores
    b = eap_scores(model, None, batch, "corrupted").scores
    assert not np.allclose(a, b)


@pytest.mark.parametrize("method", ["eap", "eap-ig", "eap-gp"])
def test_scores_independent_of_example_order(method):
    model = small_model()
    batch = gen_induction(6, 10)
    a = compute_scores(model, None, batch, method, k=3).scores
    b = compute_scores(model, None, batch.shuffled(1), method, k=3).scores
    assert np.abs(a - b).max() <= 1e-6


@pytest.mark.parametrize("method", ["eap-ig", "eap-gp"])
def test_per_node_scope_matches_shared_on_input_edges(method):
    model = small_model()
    batch = gen_induction(7, 4)
    g = model.graph
    opts = PathSpec(scope="per_node")
    shared = compute_scores(model, None, batch, method, k=3).scores
    per = compute_scores(model, None, batch, method, k=3, options=opts)
    from_input = g.edge_src == 0
    np.testing.assert_allclose(per.scores[from_input], shared[from_input], rtol=1e-9, atol=1e-12)
    assert set(per.paths) == set(range(g.n_upstream))


@pytest.mark.parametrize("task", sorted(GENERATORS))
def test_scores_finite_on_every_task(task):
    vocab = task_vocab(task)
    model = Transformer(ModelConfig(n_layers=1, n_heads=2, d_model=8, d_head=4, d_mlp=16, vocab_size=vocab, seed=0))
    batch = make_task(task, 0, 6)
    for method in ("eap", "eap-ig", "eap-gp"):
        s = compute_scores(model, None, batch, method, k=3)
        assert np.all(np.isfinite(s.scores)) and len(s) == model.graph.n_edges


def test_eap_tracks_patching_on_trained_one_layer_toy():
    # 1 layer cannot solve induction; a short run still gives it non-random structure
    model = Transformer(ModelConfig(n_layers=1, n_heads=2, d_model=32, d_head=16, d_mlp=128, seed=0))
    train_toy(model, induction_stream(0, 32), 300, 3e-3)
    model = model.astype("float64")
    batch = gen_induction(100, 32)
    base = compute_baselines(model, batch)
    s = eap_scores(model, None, batch, baselines=base).scores
    true = patching_deltas(model, batch, base)
    top = np.argsort(-np.abs(s), kind="stable")[:20]
    assert np.corrcoef(s[top], true[top])[0, 1] >= 0.8


def test_sequence_length_mismatch_rejected():
    model = small_model()
    b = gen_induction(0, 2)
    bad = TaskBatch(b.clean_tokens, b.corrupted_tokens[:, :-1], b.metrics, b.vocab_size)
    with pytest.raises(ad.ShapeError):
        eap_scores(model, None, bad)


def test_unknown_method_rejected():
    with pytest.raises(ValueError, match="method"):
        compute_scores(small_model(), None, gen_induction(0, 2), "acdc")


def test_edge_scores_reject_non_finite():
    g = small_model().graph
    with pytest.raises(ad.NonFiniteError):
        EdgeScores(np.full(g.n_edges, np.nan), g, "eap", PathSpec())
    with pytest.raises(ValueError):
        EdgeScores(np.zeros(3), g, "eap", PathSpec())


# -- pipeline and files --------------------------------------------------------------------


@pytest.mark.parametrize("method", ["eap", "eap-ig", "eap-gp"])
def test_pipeline_full_and_empty(method):
    model = small_model()
    batch = gen_induction(8, 6)
    g = model.graph
    full, rep_full, _ = run_pipeline(model, g, batch, method, 3, g.n_edges)
    empty, rep_empty, scores = run_pipeline(model, g, batch, method, 3, 0)
    assert full.n_edges == g.n_edges and abs(rep_full.nfs - 1) < 1e-6
    assert empty.n_edges == 0 and abs(rep_empty.nfs) < 1e-6
    assert rep_full.method == method and rep_full.wall_time > 0
    assert scores.k == (None if method == "eap" else 3)


def test_scores_csv_round_trip(tmp_path):
    model = small_model()
    s = eap_ig_scores(model, None, gen_induction(0, 4), 2)
    path = scores_to_csv(s, tmp_path / "s.csv")
    with open(path) as f:
        header = next(csv.reader(f))
    assert header == ["edge_index", "src", "dst", "channel", "score"]
    np.testing.assert_array_equal(scores_from_csv(path, model.graph), s.scores)


def test_diagnostics_csv_rows(tmp_path):
    model = small_model()
    batch = gen_induction(0, 4)
    path = build_gradpath(model, batch, 3)
    prof = saturation_profile(model, batch, path, 0.05)
    out = diagnostics_to_csv(prof, path, tmp_path / "d.csv")
    with open(out) as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3 * model.graph.n_channels
    assert all(np.isfinite(float(r["grad_norm"])) and float(r["W_j"]) > 0 for r in rows)
