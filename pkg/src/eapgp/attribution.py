"""Edge attribution: EAP, EAP-IG and EAP-GP scores, integration paths, saturation.

Every score uses the sign convention

    score(u, v) = (x'_u - x_u) . mean_j dL/d(input of v at its channel)

where ``x`` is the clean and ``x'`` the corrupted contribution of node ``u``
and ``L`` is the batch-mean task metric.  The dot product runs over sequence
positions and the model dimension, so on a model that is linear in its node
inputs a score is exactly the change in ``L`` when that one edge is corrupted.
Circuits are chosen by ``|score|``, so the global sign never matters there.

Paths live in the activation space of the input embedding and are shared by
all edges; everything downstream is recomputed at each path point.  The
``per_node`` scope instead builds one path per upstream node in that node's
own output space (exact but ``|upstream nodes|`` times more expensive).
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .evaluation import Baselines, FaithfulnessReport, compute_baselines, report_for
from .graph import Circuit, ComputationalGraph, GraphMismatchError, extract_circuit
from .metrics import mean_metric_loss
from .model import Transformer

METHODS = ("eap", "eap-ig", "eap-gp")
STEP_RULES = ("literal_unit", "endpoint_budget")
# below this gradient norm a GradPath step has no direction
DEGENERATE_NORM = 1e-12


@dataclass(frozen=True)
class PathSpec:
    mode: str = "straight_line"
    k: int = 5
    step_rule: str = "literal_unit"
    objective_positions: str = "all"
    grad_point: str = "clean"
    scope: str = "shared"

    def __post_init__(self) -> None:
        if self.mode not in ("straight_line", "gradpath"):
            raise ValueError(f"mode must be straight_line or gradpath, got {self.mode!r}")
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k must be an integer >= 1, got {self.k}")
        if self.step_rule not in STEP_RULES:
            raise ValueError(f"step_rule must be one of {STEP_RULES}, got {self.step_rule!r}")
        if self.objective_positions not in ("all", "final"):
            raise ValueError(f"objective_positions must be all or final, got {self.objective_positions!r}")
        if self.grad_point not in ("clean", "corrupted"):
            raise ValueError(f"grad_point must be clean or corrupted, got {self.grad_point!r}")
        if self.scope not in ("shared", "per_node"):
            raise ValueError(f"scope must be shared or per_node, got {self.scope!r}")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "step_rule": self.step_rule,
            "objective_positions": self.objective_positions,
            "grad_point": self.grad_point,
            "scope": self.scope,
        }


def _example_norms(a: np.ndarray) -> np.ndarray:
    """L2 norm per example: over everything but axis 0 for arrays of rank >= 2."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim <= 1:
        return np.array([np.sqrt(np.sum(a * a))])
    return np.sqrt(np.sum(a * a, axis=tuple(range(1, a.ndim))))


def _per_example(scale: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Reshape per-example factors to broadcast against ``like``."""
    if like.ndim <= 1:
        return scale.reshape(())
    return scale.reshape((-1,) + (1,) * (like.ndim - 1))


@dataclass
class IntegrationPath:
    """The ``k`` points at which gradients are averaged, plus diagnostics.

    ``points[j]`` has the shape of the activation.  For GradPath
    ``step_norms[j]`` is ``W_j``, the per-example gradient norm used to take
    the step out of point ``j``; ``terminated_at`` marks examples whose
    descent stopped early (-1 if never).  ``endpoint_residual`` is the
    per-example distance from the path's far end to the corrupted activation.
    """

    points: np.ndarray
    mode: str
    clean: np.ndarray
    corrupted: np.ndarray
    endpoint_residual: np.ndarray
    step_norms: np.ndarray | None = None
    terminated_at: np.ndarray | None = None
    step_rule: str | None = None

    @property
    def k(self) -> int:
        return len(self.points)

    def __len__(self) -> int:
        return len(self.points)

    def step_lengths(self) -> np.ndarray:
        """``[k-1, examples]`` distances between consecutive points."""
        return np.stack([_example_norms(b - a) for a, b in zip(self.points[:-1], self.points[1:])]) if self.k > 1 else np.zeros((0, 1))


def straight_line_path(x, x_prime, k: int) -> IntegrationPath:
    """Points ``x' + (j/k)(x - x')`` for ``j = 1..k``; the last point is ``x``."""
    if int(k) != k or k < 1:
        raise ValueError(f"k must be an integer >= 1, got {k}")
    x = np.asarray(x)
    x_prime = np.asarray(x_prime)
    if x.shape != x_prime.shape:
        raise ad.ShapeError(f"clean {x.shape} and corrupted {x_prime.shape} shapes differ")
    dt = np.result_type(x.dtype, x_prime.dtype, np.float32)
    x, x_prime = x.astype(dt), x_prime.astype(dt)
    diff = x - x_prime
    pts = np.stack([x_prime + (np.asarray(j / k, dtype=dt)) * diff for j in range(1, k + 1)])
    pts[-1] = x  # exact at j = k
    # the path starts at x' itself, so it reaches the corrupted endpoint exactly
    return IntegrationPath(pts, "straight_line", x, x_prime, np.zeros(len(_example_norms(x))))


def gradpath(
    G: Callable[[ad.Tensor], ad.Tensor],
    x,
    x_prime,
    k: int,
    step_rule: str = "literal_unit",
    target: np.ndarray | None = None,
) -> IntegrationPath:
    """Normalized gradient descent on ``||G(gamma) - G(x')||^2`` starting at ``x``.

    ``G`` maps a tape tensor of the activation's shape to an output tensor and
    must treat axis 0 as independent examples when the activation has rank
    >= 2 (each example is normalized by its own gradient norm).  Returns the
    ``k`` points ``gamma_0 = x, ..., gamma_{k-1}``; one extra step is taken
    to report how far ``gamma_k`` lands from ``x'``.

    ``literal_unit`` steps have length 1; ``endpoint_budget`` steps have
    length ``||x - x'|| / k``.  An example whose gradient norm drops below
    ``1e-12`` stops descending and its remaining points walk the straight
    line to ``x'``.
    """
    if int(k) != k or k < 1:
        raise ValueError(f"k must be an integer >= 1, got {k}")
    if step_rule not in STEP_RULES:
        raise ValueError(f"step_rule must be one of {STEP_RULES}, got {step_rule!r}")
    x = np.asarray(x)
    x_prime = np.asarray(x_prime)
    if x.shape != x_prime.shape:
        raise ad.ShapeError(f"clean {x.shape} and corrupted {x_prime.shape} shapes differ")
    dt = np.result_type(x.dtype, x_prime.dtype, np.float32)
    x, x_prime = x.astype(dt), x_prime.astype(dt)
    if target is None:
        target = G(ad.Tensor(x_prime)).data
    n_ex = len(_example_norms(x))
    eta = np.ones(n_ex) if step_rule == "literal_unit" else _example_norms(x - x_prime) / k

    gamma = x.copy()
    points = [gamma.copy()]
    norms = np.zeros((k, n_ex))
    stopped = np.full(n_ex, -1, dtype=np.int64)
    # straight-line fill for stopped examples: fixed per-step increment
    fill_step = np.zeros_like(x)
    for j in range(k):
        live = stopped < 0
        if live.any():
            g_in = ad.Tensor(gamma, requires_grad=True)
            with ad.Tape() as tape:
                out = G(g_in)
                if not np.all(np.isfinite(out.data)):
                    raise ad.NonFiniteError(f"GradPath: model output is not finite at step {j}")
                obj = ad.squared_l2_norm(out - ad.Tensor(np.asarray(target, dtype=out.dtype)))
            tape.backward(obj)
            grad = g_in.grad if g_in.grad is not None else np.zeros_like(gamma)
            w = _example_norms(grad)
            newly = live & (w < DEGENERATE_NORM)
            for b in np.flatnonzero(newly):
                stopped[b] = j
                remaining = k - j
                if gamma.ndim <= 1:
                    fill_step = (x_prime - gamma) / remaining
                else:
                    fill_step[b] = (x_prime[b] - gamma[b]) / remaining
            norms[j] = np.where(live, w, 0.0)
            move = live & ~newly
            scale = np.where(move, eta / np.where(w > 0, w, 1.0), 0.0)
            descent = _per_example(scale, gamma).astype(dt) * grad
        else:
            descent = np.zeros_like(gamma)
        filling = _per_example((stopped >= 0).astype(dt), gamma)
        gamma = gamma - descent + filling * fill_step
        if j < k - 1:
            points.append(gamma.copy())
    residual = _example_norms(gamma - x_prime)
    return IntegrationPath(np.stack(points), "gradpath", x, x_prime, residual, norms, stopped, step_rule)


def integrated_gradients(f: Callable[[ad.Tensor], ad.Tensor], x, x_prime, k: int, path: IntegrationPath | None = None):
    """Feature attributions ``(x - x') * mean_j grad f(point_j)`` of a scalar function.

    Uses the straight line unless ``path`` is given.  By completeness the
    attributions sum to roughly ``f(x) - f(x')``.
    """
    path = straight_line_path(x, x_prime, k) if path is None else path
    return (path.clean - path.corrupted) * np.mean(function_gradients(f, path), axis=0)


def function_gradients(f: Callable[[ad.Tensor], ad.Tensor], path: IntegrationPath) -> np.ndarray:
    """Gradient of scalar ``f`` at each path point, ``[k, *shape]``."""
    out = []
    for p in path.points:
        t = ad.Tensor(p, requires_grad=True)
        with ad.Tape() as tape:
            y = f(t)
            if y.data.size != 1:
                y = y.sum()
        tape.backward(y)
        out.append(t.grad if t.grad is not None else np.zeros_like(p))
    return np.stack(out)


# -- saturation -------------------------------------------------------------------


@dataclass
class SaturationProfile:
    """Per-step gradient norms ``[k, channels]`` and which entries are saturated."""

    norms: np.ndarray
    threshold: float
    channel_names: list[str]

    @property
    def saturated(self) -> np.ndarray:
        peak = self.norms.max(axis=0, keepdims=True)
        return self.norms < self.threshold * peak

    @property
    def fraction(self) -> float:
        return float(self.saturated.mean())

    def channel_fractions(self) -> np.ndarray:
        return self.saturated.mean(axis=0)


def _check_threshold(eps: float) -> None:
    if not eps > 0:
        raise ValueError(f"saturation threshold must be > 0, got {eps}")


def function_saturation_profile(
    f: Callable[[ad.Tensor], ad.Tensor], path: IntegrationPath, eps: float
) -> SaturationProfile:
    """Saturation of a scalar function along a path; the activation is one channel."""
    _check_threshold(eps)
    if path.k == 0:
        raise ValueError("empty path")
    grads = function_gradients(f, path)
    norms = np.sqrt(np.sum(grads.reshape(path.k, -1).astype(np.float64) ** 2, axis=1))[:, None]
    return SaturationProfile(norms, eps, ["x"])


def saturation_profile(model: Transformer, batch, path: IntegrationPath, eps: float) -> SaturationProfile:
    """Norm of ``dL/d(input of v)`` per channel at each point of an input-space path."""
    _check_threshold(eps)
    if path.k == 0:
        raise ValueError("empty path")
    loss = mean_metric_loss(batch.metrics)
    rows = []
    for point in path.points:
        _, grads = model.channel_grads(batch.clean_tokens, loss, {0: point})
        flat = grads.reshape(grads.shape[0], -1).astype(np.float64)
        rows.append(np.sqrt(np.sum(flat * flat, axis=1)))
    g = model.graph
    return SaturationProfile(np.stack(rows), eps, [g.channel_name(c) for c in range(g.n_channels)])


# -- model-level paths --------------------------------------------------------------


def _answer_positions(batch, seq: int) -> np.ndarray:
    return np.array([m.answer_position % seq for m in batch.metrics])


def _output_fn(model: Transformer, batch, node: int, objective_positions: str) -> Callable[[ad.Tensor], ad.Tensor]:
    tokens = model.check_tokens(batch.clean_tokens)
    B, S = tokens.shape
    pos = _answer_positions(batch, S)

    def G(value: ad.Tensor) -> ad.Tensor:
        logits = model.logits_with_override(tokens, node, value)
        if objective_positions == "final":
            return logits[np.arange(B), pos]
        return logits

    return G


def build_straight_line(model: Transformer, batch, k: int, baselines: Baselines | None = None, node: int = 0) -> IntegrationPath:
    baselines = compute_baselines(model, batch) if baselines is None else baselines
    name = model.node_names[node]
    return straight_line_path(baselines.clean_cache[name], baselines.corrupted_cache[name], k)


def build_gradpath(
    model: Transformer,
    batch,
    k: int,
    options: PathSpec | None = None,
    baselines: Baselines | None = None,
    node: int = 0,
) -> IntegrationPath:
    """GradPath from the clean to the corrupted activation of ``node`` (default: the input)."""
    options = options or PathSpec(mode="gradpath", k=k)
    baselines = compute_baselines(model, batch) if baselines is None else baselines
    name = model.node_names[node]
    x = baselines.clean_cache[name]
    x_prime = baselines.corrupted_cache[name]
    G = _output_fn(model, batch, node, options.objective_positions)
    return gradpath(G, x, x_prime, k, options.step_rule)


# -- scores -------------------------------------------------------------------------


@dataclass
class EdgeScores:
    scores: np.ndarray
    graph: ComputationalGraph
    method: str
    path_spec: PathSpec
    batch_id: str = ""
    n_examples: int = 0
    paths: dict[int, IntegrationPath] = field(default_factory=dict)
    wall_time: float = 0.0

    def __post_init__(self) -> None:
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (self.graph.n_edges,):
            raise ValueError(f"{self.scores.shape} scores for {self.graph.n_edges} edges")
        if not np.all(np.isfinite(self.scores)):
            raise ad.NonFiniteError(f"{method_label(self.method)} produced non-finite scores")

    @property
    def k(self) -> int | None:
        return None if self.method == "eap" else self.path_spec.k

    def __len__(self) -> int:
        return len(self.scores)

    def top(self, n: int) -> np.ndarray:
        return np.argsort(-np.abs(self.scores), kind="stable")[:n]

    @property
    def path(self) -> IntegrationPath | None:
        return self.paths.get(0)


def method_label(method: str) -> str:
    return {"eap": "EAP", "eap-ig": "EAP-IG", "eap-gp": "EAP-GP"}.get(method, method)


def _check_batch(model: Transformer, graph: ComputationalGraph | None, batch) -> ComputationalGraph:
    graph = model.graph if graph is None else graph
    if graph.config_hash != model.graph.config_hash or graph.n_edges != model.graph.n_edges:
        raise GraphMismatchError(f"graph {graph!r} was not built for model {model!r}")
    c, k = np.asarray(batch.clean_tokens), np.asarray(batch.corrupted_tokens)
    if c.shape != k.shape:
        raise ad.ShapeError(f"clean {c.shape} and corrupted {k.shape} token shapes differ")
    if len(batch.metrics) != c.shape[0]:
        raise ValueError(f"{len(batch.metrics)} metrics for {c.shape[0]} examples")
    return graph


def _deltas(model: Transformer, baselines: Baselines) -> np.ndarray:
    """``x'_u - x_u`` for every upstream node, ``[n_upstream, B, S, D]`` in float64."""
    names = model.node_names
    return np.stack([baselines.corrupted_cache[n].astype(np.float64) - baselines.clean_cache[n] for n in names])


def _contract(grads: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """``[channels, upstream]`` matrix of summed products over example, position and width."""
    C, U = grads.shape[0], deltas.shape[0]
    return grads.reshape(C, -1).astype(np.float64) @ deltas.reshape(U, -1).T


def _mean_grads(model: Transformer, tokens, loss, points: Sequence[np.ndarray] | None, node: int = 0) -> np.ndarray:
    if points is None:
        return model.channel_grads(tokens, loss)[1].astype(np.float64)
    acc = None
    for p in points:
        g = model.channel_grads(tokens, loss, {node: p})[1].astype(np.float64)
        acc = g if acc is None else acc + g
    return acc / len(points)


def _edge_vector(graph: ComputationalGraph, matrix: np.ndarray) -> np.ndarray:
    return matrix[graph.edge_channel, graph.edge_src]


def _path_for(model, batch, spec: PathSpec, baselines: Baselines, node: int) -> IntegrationPath:
    if spec.mode == "gradpath":
        return build_gradpath(model, batch, spec.k, spec, baselines, node)
    return build_straight_line(model, batch, spec.k, baselines, node)


def _scores(model: Transformer, graph, batch, method: str, spec: PathSpec, baselines: Baselines | None) -> EdgeScores:
    start = time.perf_counter()
    graph = _check_batch(model, graph, batch)
    baselines = compute_baselines(model, batch) if baselines is None else baselines
    loss = mean_metric_loss(batch.metrics)
    deltas = _deltas(model, baselines)
    paths: dict[int, IntegrationPath] = {}
    if method == "eap":
        tokens = batch.clean_tokens if spec.grad_point == "clean" else batch.corrupted_tokens
        matrix = _contract(_mean_grads(model, tokens, loss, None), deltas)
    elif spec.scope == "shared":
        path = _path_for(model, batch, spec, baselines, 0)
        paths[0] = path
        matrix = _contract(_mean_grads(model, batch.clean_tokens, loss, list(path.points)), deltas)
    else:
        matrix = np.zeros((graph.n_channels, graph.n_upstream))
        for u in range(graph.n_upstream):
            path = _path_for(model, batch, spec, baselines, u)
            paths[u] = path
            grads = _mean_grads(model, batch.clean_tokens, loss, list(path.points), node=u)
            matrix[:, u] = _contract(grads, deltas[u : u + 1])[:, 0]
    name = getattr(batch, "name", "")
    seed = getattr(batch, "meta", {}).get("seed")
    return EdgeScores(
        _edge_vector(graph, matrix),
        graph,
        method,
        spec,
        f"{name}:{seed}" if seed is not None else name,
        len(batch.metrics),
        paths,
        time.perf_counter() - start,
    )


def eap_scores(
    model: Transformer, graph: ComputationalGraph | None, batch, grad_point: str = "clean", baselines: Baselines | None = None
) -> EdgeScores:
    """One gradient, at the clean (default) or corrupted input."""
    return _scores(model, graph, batch, "eap", PathSpec(k=1, grad_point=grad_point), baselines)


def eap_ig_scores(
    model: Transformer,
    graph: ComputationalGraph | None,
    batch,
    k: int,
    scope: str = "shared",
    baselines: Baselines | None = None,
) -> EdgeScores:
    """Gradients averaged over the straight line from corrupted to clean input."""
    return _scores(model, graph, batch, "eap-ig", PathSpec("straight_line", k, scope=scope), baselines)


def eap_gp_scores(
    model: Transformer,
    graph: ComputationalGraph | None,
    batch,
    k: int,
    options: PathSpec | None = None,
    baselines: Baselines | None = None,
) -> EdgeScores:
    """Gradients averaged over GradPath points ``gamma_0 .. gamma_{k-1}``; k=1 is EAP."""
    spec = PathSpec("gradpath", k) if options is None else replace(options, mode="gradpath", k=k)
    return _scores(model, graph, batch, "eap-gp", spec, baselines)


def compute_scores(
    model: Transformer,
    graph: ComputationalGraph | None,
    batch,
    method: str,
    k: int = 5,
    options: PathSpec | None = None,
    baselines: Baselines | None = None,
) -> EdgeScores:
    options = options or PathSpec()
    if method == "eap":
        return eap_scores(model, graph, batch, options.grad_point, baselines)
    if method == "eap-ig":
        return eap_ig_scores(model, graph, batch, k, options.scope, baselines)
    if method == "eap-gp":
        return eap_gp_scores(model, graph, batch, k, options, baselines)
    raise ValueError(f"method must be one of {METHODS}, got {method!r}")


def run_pipeline(
    model: Transformer,
    graph: ComputationalGraph | None,
    batch,
    method: str,
    k: int,
    n: int,
    options: PathSpec | None = None,
) -> tuple[Circuit, FaithfulnessReport, EdgeScores]:
    """Path, scores, top-``n`` extraction with pruning, then intervention evaluation."""
    start = time.perf_counter()
    graph = _check_batch(model, graph, batch)
    baselines = compute_baselines(model, batch)
    scores = compute_scores(model, graph, batch, method, k, options, baselines)
    circuit = extract_circuit(graph, scores.scores, n, method=method, k=scores.k)
    report = report_for(model, graph, circuit, batch, n, baselines, method, scores.k, start)
    return circuit, report, scores


# -- CSV ------------------------------------------------------------------------------


def scores_to_csv(scores: EdgeScores, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    g = scores.graph
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["edge_index", "src", "dst", "channel", "score"])
        for e in g.edges():
            w.writerow([e.index, e.src.name, e.dst.name, e.channel, repr(float(scores.scores[e.index]))])
    return path


def scores_from_csv(path, graph: ComputationalGraph) -> np.ndarray:
    out = np.full(graph.n_edges, np.nan)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out[graph.edge_index(row["src"], row["dst"], row["channel"])] = float(row["score"])
    if np.isnan(out).any():
        raise ValueError(f"{path}: scores missing for {int(np.isnan(out).sum())} edges")
    return out


def diagnostics_to_csv(profile: SaturationProfile, path_obj: IntegrationPath, path) -> Path:
    """Long format: one row per (step, channel)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sat = profile.saturated
    residual = float(np.mean(path_obj.endpoint_residual))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "channel", "grad_norm", "saturated", "W_j", "endpoint_residual"])
        for j in range(profile.norms.shape[0]):
            wj = "" if path_obj.step_norms is None else repr(float(np.mean(path_obj.step_norms[j])))
            for c, name in enumerate(profile.channel_names):
                w.writerow([j, name, repr(float(profile.norms[j, c])), int(sat[j, c]), wj, repr(residual)])
    return path


# -- 1-D saturation toy -------------------------------------------------------------------


@dataclass(frozen=True)
class DoubleSigmoidToy:
    """A scalar activation ``s`` whose loss rises in two sigmoid steps between
    the corrupted value ``s'`` and the clean value ``s``.

    In path units ``t = (s - corrupted) / (clean - corrupted)`` the loss is
    ``sigmoid(a (t - c1)) + sigmoid(a (t - c2))``: flat near both endpoints,
    steep around ``c1`` and ``c2``.  The model output used by GradPath is the
    loss itself.
    """

    clean: float = 15.0
    corrupted: float = 0.0
    sharpness: float = 30.0
    centers: tuple[float, float] = (0.4, 0.6)

    def loss(self, s: ad.Tensor) -> ad.Tensor:
        span = self.clean - self.corrupted
        t = (s - self.corrupted) * (1.0 / span)
        c1, c2 = self.centers
        return ad.sigmoid((t - c1) * self.sharpness) + ad.sigmoid((t - c2) * self.sharpness)

    def straight_line(self, k: int) -> IntegrationPath:
        return straight_line_path(np.float64(self.clean), np.float64(self.corrupted), k)

    def gradpath(self, k: int, step_rule: str = "literal_unit") -> IntegrationPath:
        return gradpath(self.loss, np.float64(self.clean), np.float64(self.corrupted), k, step_rule)
