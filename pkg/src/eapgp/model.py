"""Tiny pre-norm decoder-only transformer with explicit residual bookkeeping.

Every forward pass keeps each node's contribution to the residual stream
separately, so a node's input is literally the sum of its parents' outputs.
Layer norms live inside the node that reads the residual stream; edges carry
raw contributions.  Inside a layer the heads run before the MLP.

Three kinds of pass share one code path (:meth:`Transformer._run`):

* plain / cached: channel inputs are the running residual sum;
* patched: each channel input is re-summed from per-edge choices between the
  current run's contribution and a frozen corrupted-run contribution;
* taped: channel inputs become tape tensors whose gradients are read back.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .graph import ComputationalGraph, build_graph
from .metrics import MetricSpec, mean_metric_loss

CHECKPOINT_MAGIC = b"EAPG1"


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite training loss {loss} at step {step}")
        self.step = step


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 2
    n_heads: int = 2
    d_model: int = 32
    d_head: int = 16
    d_mlp: int = 128
    vocab_size: int = 16
    max_seq_len: int = 16
    norm_placement: str = "pre"
    seed: int = 0
    dtype: str = "float32"
    # linearized surrogate: no layer norms, identity MLP activation and a
    # fixed uniform causal attention pattern, so the logits are affine in
    # every node input
    linear: bool = False

    def __post_init__(self) -> None:
        for name in ("n_heads", "d_model", "d_head", "d_mlp", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_layers < 0:
            raise ValueError(f"n_layers must be >= 0, got {self.n_layers}")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError(f"d_model ({self.d_model}) must equal n_heads*d_head ({self.n_heads}*{self.d_head})")
        if self.vocab_size < 4:
            raise ValueError(f"vocab_size must be >= 4, got {self.vocab_size}")
        if self.norm_placement != "pre":
            raise ValueError(f"only pre-norm is supported, got {self.norm_placement!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)

    def hash(self) -> str:
        # precision is not part of model identity
        d = self.to_dict()
        d.pop("dtype")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class ActivationCache:
    """Per-node residual contributions ``[batch, seq, d_model]`` of one run."""

    contributions: dict[str, np.ndarray]
    logits: np.ndarray
    tokens: np.ndarray | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.contributions[name]
        except KeyError:
            raise KeyError(f"cache has no entry for node {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.contributions

    def keys(self):
        return self.contributions.keys()

    def stacked(self, names: Sequence[str] | None = None) -> np.ndarray:
        names = list(self.contributions) if names is None else names
        return np.stack([self[n] for n in names])

    def residual(self) -> np.ndarray:
        """Sum of all contributions, in canonical order."""
        it = iter(self.contributions.values())
        acc = next(it)
        for x in it:
            acc = acc + x
        return acc

    @property
    def shape(self) -> tuple[int, ...]:
        return next(iter(self.contributions.values())).shape


@dataclass
class InterventionSpec:
    """Edges to corrupt (the complement of a circuit) plus both caches."""

    corrupt: np.ndarray
    clean_cache: ActivationCache
    corrupted_cache: ActivationCache

    @classmethod
    def from_circuit(cls, circuit, clean_cache: ActivationCache, corrupted_cache: ActivationCache) -> InterventionSpec:
        return cls(~circuit.edge_mask, clean_cache, corrupted_cache)


@dataclass
class _Patch:
    mask: np.ndarray  # [n_channels, n_upstream] True where the edge is corrupted
    corrupted: list[np.ndarray]

    def mix(self, channels: slice, contribs: list[ad.Tensor]) -> np.ndarray:
        m = self.mask[channels]
        acc = None
        for u, x in enumerate(contribs):
            sel = np.where(m[:, u, None, None, None], self.corrupted[u], x.data)
            acc = sel if acc is None else acc + sel
        return acc


@dataclass
class _Run:
    logits: ad.Tensor
    contribs: list[ad.Tensor]
    attn_in: list[ad.Tensor] = field(default_factory=list)
    mlp_in: list[ad.Tensor] = field(default_factory=list)
    logits_in: ad.Tensor | None = None


def _init_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    D, H, dh, M, V = cfg.d_model, cfg.n_heads, cfg.d_head, cfg.d_mlp, cfg.vocab_size
    dt = np.dtype(cfg.dtype)

    def normal(shape, std):
        return (rng.standard_normal(shape) * std).astype(dt)

    p = {
        "embed.W_E": normal((V, D), 1.0 / math.sqrt(D)),
        "embed.W_pos": normal((cfg.max_seq_len, D), 1.0 / math.sqrt(D)),
    }
    for l in range(cfg.n_layers):
        pre = f"blocks.{l}."
        p[pre + "ln1.w"] = np.ones(D, dt)
        p[pre + "ln1.b"] = np.zeros(D, dt)
        for name in ("W_Q", "W_K", "W_V"):
            p[pre + "attn." + name] = normal((H, D, dh), 1.0 / math.sqrt(D))
            p[pre + "attn.b_" + name[-1]] = np.zeros((H, dh), dt)
        p[pre + "attn.W_O"] = normal((H, dh, D), 1.0 / math.sqrt(D))
        p[pre + "ln2.w"] = np.ones(D, dt)
        p[pre + "ln2.b"] = np.zeros(D, dt)
        p[pre + "mlp.W_in"] = normal((D, M), 1.0 / math.sqrt(D))
        p[pre + "mlp.b_in"] = np.zeros(M, dt)
        p[pre + "mlp.W_out"] = normal((M, D), 1.0 / math.sqrt(M))
        p[pre + "mlp.b_out"] = np.zeros(D, dt)
    p["ln_f.w"] = np.ones(D, dt)
    p["ln_f.b"] = np.zeros(D, dt)
    p["unembed.W_U"] = normal((D, V), 1.0 / math.sqrt(D))
    p["unembed.b_U"] = np.zeros(V, dt)
    return p


class Transformer:
    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None):
        self.config = config
        arrays = _init_params(config) if params is None else params
        dt = np.dtype(config.dtype)
        self.params: dict[str, ad.Tensor] = {k: ad.Tensor(np.asarray(v, dtype=dt)) for k, v in arrays.items()}
        self.graph: ComputationalGraph = build_graph(config)
        self.node_names = [n.name for n in self.graph.upstream_nodes()]

    def __repr__(self) -> str:
        c = self.config
        return f"Transformer(L={c.n_layers}, H={c.n_heads}, d_model={c.d_model}, vocab={c.vocab_size}, {c.dtype})"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.config.dtype)

    def astype(self, dtype) -> Transformer:
        dtype = np.dtype(dtype).name
        cfg = ModelConfig.from_dict({**self.config.to_dict(), "dtype": dtype})
        return Transformer(cfg, {k: v.data.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> Transformer:
        return Transformer(self.config, {k: v.data.copy() for k, v in self.params.items()})

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    # -- input handling ---------------------------------------------------------

    def check_tokens(self, tokens) -> np.ndarray:
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        if tokens.ndim != 2 or not np.issubdtype(tokens.dtype, np.integer):
            raise ValueError(f"tokens must be an integer matrix [batch, seq], got {tokens.dtype} {tokens.shape}")
        if tokens.shape[1] > self.config.max_seq_len:
            raise ValueError(f"sequence length {tokens.shape[1]} exceeds max_seq_len {self.config.max_seq_len}")
        bad = np.argwhere((tokens < 0) | (tokens >= self.config.vocab_size))
        if len(bad):
            b, s = bad[0]
            raise IndexError(
                f"token id {int(tokens[b, s])} at position (batch={b}, seq={s}) out of range [0, {self.config.vocab_size})"
            )
        return tokens

    # -- building blocks ----------------------------------------------------------

    def embed(self, tokens: np.ndarray) -> ad.Tensor:
        p = self.params
        return ad.embedding(p["embed.W_E"], tokens) + p["embed.W_pos"][: tokens.shape[1]]

    def _attention(self, layer: int, attn_in: ad.Tensor) -> ad.Tensor:
        """``attn_in`` is ``[H, 3, B, S, D]`` (per-head Q/K/V inputs); returns ``[H, B, S, D]``."""
        cfg, p = self.config, self.params
        pre = f"blocks.{layer}."
        H, dh, D = cfg.n_heads, cfg.d_head, cfg.d_model
        S = attn_in.shape[3]
        causal = np.tril(np.ones((S, S), dtype=bool))
        x = attn_in if cfg.linear else ad.layer_norm(attn_in, p[pre + "ln1.w"], p[pre + "ln1.b"])

        def project(channel: int, name: str) -> ad.Tensor:
            w = p[pre + "attn.W_" + name].reshape(H, 1, D, dh)
            b = p[pre + "attn.b_" + name].reshape(H, 1, 1, dh)
            return x[:, channel] @ w + b

        v = project(2, "V")
        if cfg.linear:
            pattern = ad.Tensor((causal / causal.sum(axis=1, keepdims=True)).astype(self.dtype))
        else:
            q, k = project(0, "Q"), project(1, "K")
            scores = (q @ ad.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
            pattern = ad.softmax(scores, axis=-1, where=causal)
        z = pattern @ v
        return z @ p[pre + "attn.W_O"].reshape(H, 1, dh, D)

    def _mlp(self, layer: int, mlp_in: ad.Tensor) -> ad.Tensor:
        p = self.params
        pre = f"blocks.{layer}."
        if self.config.linear:
            hidden = mlp_in @ p[pre + "mlp.W_in"] + p[pre + "mlp.b_in"]
        else:
            x = ad.layer_norm(mlp_in, p[pre + "ln2.w"], p[pre + "ln2.b"])
            hidden = ad.gelu(x @ p[pre + "mlp.W_in"] + p[pre + "mlp.b_in"])
        return hidden @ p[pre + "mlp.W_out"] + p[pre + "mlp.b_out"]

    def unembed(self, resid) -> ad.Tensor:
        """Final norm and unembedding of a summed residual stream."""
        p = self.params
        x = ad.as_tensor(resid)
        if not self.config.linear:
            x = ad.layer_norm(x, p["ln_f.w"], p["ln_f.b"])
        return x @ p["unembed.W_U"] + p["unembed.b_U"]

    # -- the shared forward ---------------------------------------------------------

    def _run(
        self,
        tokens: np.ndarray,
        overrides: dict[int, ad.Tensor] | None = None,
        patch: _Patch | None = None,
        track: bool = False,
        channel_shift: dict[int, np.ndarray] | None = None,
    ) -> _Run:
        cfg, g = self.config, self.graph
        H, L = cfg.n_heads, cfg.n_layers
        B, S = tokens.shape
        D = cfg.d_model
        contribs: list[ad.Tensor] = []

        def emit(value: ad.Tensor) -> ad.Tensor:
            idx = len(contribs)
            if overrides and idx in overrides:
                value = ad.as_tensor(overrides[idx])
                if value.shape != (B, S, D):
                    raise ad.ShapeError(f"override for {self.node_names[idx]} has shape {value.shape}, expected {(B, S, D)}")
            contribs.append(value)
            return value

        x0 = emit(self.embed(tokens))
        if track and not x0.requires_grad:
            # make everything downstream land on the tape
            x0 = contribs[0] = ad.Tensor(x0.data, requires_grad=True)
        run = _Run(logits=None, contribs=contribs)  # type: ignore[arg-type]
        resid = x0
        per_layer = 3 * H + 1
        for l in range(L):
            c0 = l * per_layer
            if patch is None:
                attn_in = ad.broadcast_to(resid.reshape(1, 1, B, S, D), (H, 3, B, S, D))
            else:
                attn_in = ad.Tensor(patch.mix(slice(c0, c0 + 3 * H), contribs).reshape(H, 3, B, S, D))
            if channel_shift:
                attn_in = attn_in + self._shift(channel_shift, c0, 3 * H, (H, 3, B, S, D))
            run.attn_in.append(attn_in)
            heads = self._attention(l, attn_in)
            for h in range(H):
                resid = resid + emit(heads[h])
            if patch is None:
                mlp_in = ad.identity(resid)
            else:
                mlp_in = ad.Tensor(patch.mix(slice(c0 + 3 * H, c0 + 3 * H + 1), contribs)[0])
            if channel_shift:
                mlp_in = mlp_in + self._shift(channel_shift, c0 + 3 * H, 1, (B, S, D))
            run.mlp_in.append(mlp_in)
            resid = resid + emit(self._mlp(l, mlp_in))
        if patch is None:
            logits_in = ad.identity(resid)
        else:
            logits_in = ad.Tensor(patch.mix(slice(g.n_channels - 1, g.n_channels), contribs)[0])
        if channel_shift:
            logits_in = logits_in + self._shift(channel_shift, g.n_channels - 1, 1, (B, S, D))
        run.logits_in = logits_in
        run.logits = self.unembed(logits_in)
        return run

    def _shift(self, shifts: dict[int, np.ndarray], first: int, count: int, shape: tuple[int, ...]) -> np.ndarray:
        out = np.zeros((count,) + shape[-3:], dtype=self.dtype)
        for c, v in shifts.items():
            if first <= c < first + count:
                out[c - first] = v
        return out.reshape(shape)

    # -- public passes ----------------------------------------------------------------

    def forward(self, tokens) -> np.ndarray:
        return self._run(self.check_tokens(tokens)).logits.data

    __call__ = forward

    def forward_with_cache(self, tokens, input_override: np.ndarray | None = None) -> tuple[np.ndarray, ActivationCache]:
        tokens = self.check_tokens(tokens)
        overrides = None if input_override is None else {0: ad.Tensor(input_override)}
        run = self._run(tokens, overrides)
        cache = ActivationCache(
            {name: x.data for name, x in zip(self.node_names, run.contribs)},
            run.logits.data,
            tokens,
        )
        return run.logits.data, cache

    def patched_forward(self, tokens_clean, spec: InterventionSpec) -> np.ndarray:
        """Run on clean tokens with every corrupted edge reading the frozen corrupted cache."""
        tokens = self.check_tokens(tokens_clean)
        g = self.graph
        corrupt = np.asarray(spec.corrupt, dtype=bool)
        if corrupt.shape != (g.n_edges,):
            raise ValueError(f"corruption mask has shape {corrupt.shape}, graph has {g.n_edges} edges")
        missing = [n for n in self.node_names if n not in spec.corrupted_cache]
        if missing:
            raise KeyError(f"corrupted cache is missing entries for {missing}")
        shape = spec.corrupted_cache.shape
        if spec.clean_cache is not None and spec.clean_cache.shape != shape:
            raise ValueError(f"clean cache shape {spec.clean_cache.shape} != corrupted cache shape {shape}")
        if shape[:2] != tokens.shape:
            raise ValueError(f"cache batch/seq {shape[:2]} does not match tokens {tokens.shape}")
        mask = np.zeros((g.n_channels, g.n_upstream), dtype=bool)
        mask[g.edge_channel[corrupt], g.edge_src[corrupt]] = True
        corrupted = [np.asarray(spec.corrupted_cache[n], dtype=self.dtype) for n in self.node_names]
        return self._run(tokens, patch=_Patch(mask, corrupted)).logits.data

    def _resolve_loss(self, loss) -> Callable[[ad.Tensor], ad.Tensor]:
        if callable(loss):
            return loss
        metrics = list(loss)
        if not all(isinstance(m, MetricSpec) for m in metrics):
            raise TypeError("loss must be a callable or a sequence of MetricSpec")
        for m in metrics:
            if m.max_id() >= self.config.vocab_size:
                raise ValueError(f"metric references token id {m.max_id()} >= vocab_size {self.config.vocab_size}")
        return mean_metric_loss(metrics)

    def channel_grads(self, tokens, loss, overrides: dict[int, np.ndarray] | None = None) -> tuple[float, np.ndarray]:
        """Loss value and ``[n_channels, B, S, D]`` gradients w.r.t. every node-input channel.

        One forward and one backward pass.  ``overrides`` maps upstream-node
        index to a replacement contribution (index 0 is the input embedding).
        """
        tokens = self.check_tokens(tokens)
        loss_fn = self._resolve_loss(loss)
        ov = None if overrides is None else {i: ad.Tensor(v) for i, v in overrides.items()}
        with ad.Tape() as tape:
            run = self._run(tokens, ov, track=True)
            value = loss_fn(run.logits)
        tape.backward(value)
        B, S = tokens.shape
        D = self.config.d_model
        out = np.empty((self.graph.n_channels, B, S, D), dtype=self.dtype)
        per_layer = 3 * self.config.n_heads + 1
        for l in range(self.config.n_layers):
            c0 = l * per_layer
            out[c0 : c0 + per_layer - 1] = _grad(run.attn_in[l]).reshape(-1, B, S, D)
            out[c0 + per_layer - 1] = _grad(run.mlp_in[l])
        out[-1] = _grad(run.logits_in)
        return float(value.data), out

    def loss_with_channel_shift(self, tokens, loss, shifts: dict[int, np.ndarray]) -> float:
        """Loss after adding ``shifts[c]`` to the input of channel ``c``; for finite differences."""
        tokens = self.check_tokens(tokens)
        run = self._run(tokens, channel_shift=shifts)
        return float(self._resolve_loss(loss)(run.logits).data)

    def grads_wrt_node_inputs(self, tokens, loss, input_override: np.ndarray | None = None) -> dict[str, np.ndarray]:
        """Map ``"<node><channel>"`` to the loss gradient at that node-input channel."""
        overrides = None if input_override is None else {0: input_override}
        _, grads = self.channel_grads(tokens, loss, overrides)
        return {self.graph.channel_name(c): grads[c] for c in range(self.graph.n_channels)}

    def logits_with_override(self, tokens: np.ndarray, node: int, value: ad.Tensor) -> ad.Tensor:
        """Differentiable logits with one node's contribution replaced by ``value``."""
        return self._run(self.check_tokens(tokens), {node: value}).logits


def _grad(t: ad.Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros_like(t.data)


# -- training -------------------------------------------------------------------


@dataclass
class TrainResult:
    model: Transformer
    losses: list[float]


def cross_entropy(logits: ad.Tensor, positions: np.ndarray, targets: np.ndarray, rows: np.ndarray | None = None) -> ad.Tensor:
    """Mean of ``-log p(target)`` over (row, position) pairs; rows default to ``0..B-1``."""
    if rows is None:
        rows = np.arange(logits.shape[0])
    at = logits[rows, positions]
    logp = ad.log_softmax(at, axis=-1)
    return -(logp[np.arange(len(rows)), targets].mean())


def _training_targets(batch, seq: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dense = getattr(batch, "train_targets", None)
    if dense is not None:
        rows, pos = np.nonzero(dense >= 0)
        if len(rows):
            return rows, pos, dense[rows, pos]
    pos = np.array([mt.answer_position % seq for mt in batch.metrics])
    tgt = np.array([mt.correct_ids[0] for mt in batch.metrics])
    return np.arange(len(pos)), pos, tgt


def train_toy(
    model: Transformer,
    batches: Iterable,
    steps: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.98),
    weight_decay: float = 0.0,
    callback: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Adam on next-token cross-entropy; trains ``model`` in place.

    ``batches`` yields task batches.  Supervised positions come from the
    batch's dense ``train_targets`` when it has them, otherwise from each
    metric's answer position with its first correct id as the target.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if lr < 0 or not math.isfinite(lr):
        raise ValueError(f"lr must be a finite non-negative number, got {lr}")
    params = model.params
    m = {k: np.zeros_like(v.data) for k, v in params.items()}
    v2 = {k: np.zeros_like(v.data) for k, v in params.items()}
    b1, b2 = betas
    losses: list[float] = []
    it = iter(batches)
    for k in params:
        params[k].requires_grad = True
    try:
        for step in range(1, steps + 1):
            batch = next(it)
            tokens = model.check_tokens(batch.clean_tokens)
            rows, pos, tgt = _training_targets(batch, tokens.shape[1])
            with ad.Tape() as tape:
                loss = cross_entropy(model._run(tokens).logits, pos, tgt, rows)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(step, value)
            tape.backward(loss)
            for k, p in params.items():
                g = p.grad
                m[k] = b1 * m[k] + (1 - b1) * g
                v2[k] = b2 * v2[k] + (1 - b2) * g * g
                mhat = m[k] / (1 - b1**step)
                vhat = v2[k] / (1 - b2**step)
                update = lr * (mhat / (np.sqrt(vhat) + 1e-8) + weight_decay * p.data)
                p.data = (p.data - update).astype(p.data.dtype)
                p.grad = None
            losses.append(value)
            if callback is not None:
                callback(step, value)
    finally:
        for k in params:
            params[k].requires_grad = False
    return TrainResult(model, losses)


def accuracy(model: Transformer, batch) -> float:
    logits = model.forward(batch.clean_tokens)
    S = logits.shape[1]
    hits = [
        int(np.argmax(logits[b, mt.answer_position % S]) == mt.correct_ids[0]) for b, mt in enumerate(batch.metrics)
    ]
    return float(np.mean(hits))


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(model: Transformer, path) -> Path:
    """``EAPG1`` + u64 header length + JSON header + little-endian float payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    code = "<f4" if model.dtype == np.float32 else "<f8"
    manifest, chunks, offset = [], [], 0
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data, dtype=code).tobytes()
        manifest.append({"name": name, "shape": list(t.shape), "offset": offset, "dtype": code})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"config": model.config.to_dict(), "tensors": manifest}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for raw in chunks:
            f.write(raw)
    return path


def load_checkpoint(path) -> Transformer:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not an EAPG1 checkpoint")
    n = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack("<Q", data[n : n + 8])
    header = json.loads(data[n + 8 : n + 8 + hlen])
    payload = memoryview(data)[n + 8 + hlen :]
    config = ModelConfig.from_dict(header["config"])
    params = {}
    for entry in header["tensors"]:
        dt = np.dtype(entry.get("dtype", "<f4"))
        count = int(np.prod(entry["shape"], dtype=np.int64))
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=entry["offset"])
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(config.dtype)
    return Transformer(config, params)


def linear_surrogate(config: ModelConfig) -> Transformer:
    """Same architecture with ``linear=True``: loss is affine in every node input."""
    return Transformer(ModelConfig.from_dict({**config.to_dict(), "linear": True}))
