"""Command-line interface: ``eapgp <command> [flags]``.

Any flag can also come from a JSON file given with ``--config`` (keys are the
flag names with dashes or underscores); flags on the command line win.
Outputs go under ``--out``, defaulting to ``$EAPGP_OUTPUT_ROOT`` (or
``./runs``).  Wall-clock times are written to a ``timing.json`` sidecar so the
other outputs are byte-for-byte reproducible.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
import zlib
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attribution import (
    METHODS,
    PathSpec,
    build_gradpath,
    build_straight_line,
    compute_scores,
    diagnostics_to_csv,
    saturation_profile,
    scores_to_csv,
)
from .evaluation import compute_baselines, faithfulness_sweep, report_for, sweep_to_csv
from .graph import (
    circuit_from_dict,
    circuit_to_json,
    expected_edge_count,
    extract_circuit,
    graph_for_circuit_file,
    precision_recall,
    to_dot,
)
from .model import ModelConfig, Transformer, TrainingDivergedError, accuracy, load_checkpoint, save_checkpoint, train_toy
from .tasks import GENERATORS, TaskBatch, induction_stream, make_task, task_vocab

OUTPUT_ROOT_ENV = "EAPGP_OUTPUT_ROOT"

DEFAULTS = {
    "seed": 0,
    "precision": "float32",
    "task": "induction",
    "task_file": None,
    "batch_size": 64,
    "seq": 12,
    "vocab": 16,
    "method": "eap-gp",
    "steps": 5,
    "top_n": None,
    "sparsity": None,
    "grad_point": "clean",
    "path_mode": "shared",
    "step_rule": "literal_unit",
    "objective_positions": "all",
    "mode": "straight_line",
    "eps": 0.05,
    # training
    "train_steps": 2000,
    "lr": 3e-3,
    "layers": 2,
    "heads": 2,
    "d_model": 32,
    "d_head": None,
    "d_mlp": 128,
    "out": None,
    "checkpoint": None,
}


class UsageError(Exception):
    pass


def component_seed(seed: int, component: str) -> int:
    """Independent, stable child seed of the global seed for one component."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(component.encode())])
    return int(ss.generate_state(1)[0])


def _output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def _out_dir(opts: dict, command: str) -> Path:
    out = Path(opts["out"]) if opts.get("out") else _output_root() / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _timing(out: Path, **fields) -> None:
    _write_json(out / "timing.json", {k: round(v, 6) for k, v in fields.items()})


# -- shared pieces -------------------------------------------------------------


def _load_model(opts: dict) -> Transformer:
    if not opts.get("checkpoint"):
        raise UsageError("--checkpoint is required")
    model = load_checkpoint(opts["checkpoint"])
    if opts["precision"] != model.config.dtype:
        model = model.astype(opts["precision"])
    return model


def _load_task(opts: dict, model: Transformer) -> TaskBatch:
    if opts.get("task_file"):
        return TaskBatch.from_jsonl(opts["task_file"], vocab_size=model.config.vocab_size)
    seed = component_seed(opts["seed"], "eval-task")
    kwargs = {}
    if opts["task"] == "induction":
        kwargs = {"seq": opts["seq"], "vocab": model.config.vocab_size}
    return make_task(opts["task"], seed, opts["batch_size"], **kwargs)


def _path_spec(opts: dict) -> PathSpec:
    return PathSpec(
        mode="gradpath" if opts["method"] == "eap-gp" else "straight_line",
        k=int(opts["steps"]),
        step_rule=opts["step_rule"],
        objective_positions=opts["objective_positions"],
        grad_point=opts["grad_point"],
        scope=opts["path_mode"],
    )


def _report_dict(report) -> dict:
    d = report.as_dict()
    d.pop("wall_time")
    return d


# -- commands ------------------------------------------------------------------


def cmd_train(opts: dict) -> int:
    start = time.perf_counter()
    if opts["task_file"]:
        raise UsageError("train uses a task generator, not --task-file")
    heads, d_model = int(opts["heads"]), int(opts["d_model"])
    d_head = int(opts["d_head"]) if opts["d_head"] else d_model // heads
    vocab = task_vocab(opts["task"], vocab=opts["vocab"])
    cfg = ModelConfig(
        n_layers=int(opts["layers"]),
        n_heads=heads,
        d_model=d_model,
        d_head=d_head,
        d_mlp=int(opts["d_mlp"]),
        vocab_size=vocab,
        max_seq_len=max(16, int(opts["seq"])),
        seed=component_seed(opts["seed"], "model-init"),
        dtype=opts["precision"],
    )
    with ad.default_dtype(cfg.dtype):
        model = Transformer(cfg)
        data_seed = component_seed(opts["seed"], "train-data")
        if opts["task"] == "induction":
            stream = induction_stream(data_seed, int(opts["batch_size"]), int(opts["seq"]), vocab)
        else:
            stream = _generator_stream(opts["task"], data_seed, int(opts["batch_size"]))
        result = train_toy(model, stream, int(opts["train_steps"]), float(opts["lr"]))
        held_out = _load_task({**opts, "task_file": None}, model)
        acc = accuracy(model, held_out)
    out = _out_dir(opts, "train")
    ckpt = Path(opts["checkpoint"]) if opts.get("checkpoint") else out / "model.eapg"
    save_checkpoint(model, ckpt)
    with open(out / "loss.csv", "w") as f:
        f.write("step,loss\n")
        for i, loss in enumerate(result.losses, 1):
            f.write(f"{i},{loss!r}\n")
    _write_json(out / "train.json", {"checkpoint": str(ckpt), "config": cfg.to_dict(), "accuracy": acc, "final_loss": result.losses[-1]})
    _timing(out, wall_time_s=time.perf_counter() - start)
    print(f"wrote {ckpt} (accuracy {acc:.3f})")
    return 0


def _generator_stream(name: str, seed: int, batch: int):
    ss = np.random.SeedSequence(seed)
    while True:
        (child,) = ss.spawn(1)
        yield make_task(name, int(child.generate_state(1)[0]), batch)


def cmd_discover(opts: dict) -> int:
    start = time.perf_counter()
    if opts["top_n"] is None and opts["sparsity"] is None:
        raise UsageError("one of --top-n or --sparsity is required")
    model = _load_model(opts)
    with ad.default_dtype(model.dtype):
        batch = _load_task(opts, model)
        graph = model.graph
        if opts["top_n"] is not None:
            n = int(opts["top_n"])
        else:
            levels = _levels(opts["sparsity"])
            if len(levels) != 1:
                raise UsageError("discover takes a single --sparsity level; use sweep for several")
            n = int(round((1.0 - levels[0]) * graph.n_edges))
        if not 0 <= n <= graph.n_edges:
            raise UsageError(f"--top-n must lie in [0, {graph.n_edges}], got {n}")
        baselines = compute_baselines(model, batch)
        scores = compute_scores(model, graph, batch, opts["method"], int(opts["steps"]), _path_spec(opts), baselines)
        circuit = extract_circuit(graph, scores.scores, n, method=opts["method"], k=scores.k)
        report = report_for(model, graph, circuit, batch, n, baselines, opts["method"], scores.k, start)
    out = _out_dir(opts, "discover")
    (out / "circuit.json").write_text(circuit_to_json(circuit))
    scores_to_csv(scores, out / "scores.csv")
    _write_json(out / "report.json", _report_dict(report))
    _timing(out, wall_time_s=time.perf_counter() - start, scoring_s=scores.wall_time)
    print(f"{opts['method']}: {circuit.n_edges} edges after pruning, NFS {report.nfs:.4f}")
    return 0


def _levels(value) -> list[float]:
    if isinstance(value, (list, tuple)):
        return [float(v) for v in value]
    return [float(v) for v in str(value).split(",") if v.strip()]


def cmd_sweep(opts: dict) -> int:
    start = time.perf_counter()
    if opts["sparsity"] is None:
        raise UsageError("--sparsity is required (comma-separated levels)")
    levels = _levels(opts["sparsity"])
    model = _load_model(opts)
    with ad.default_dtype(model.dtype):
        batch = _load_task(opts, model)
        baselines = compute_baselines(model, batch)
        scores = compute_scores(model, model.graph, batch, opts["method"], int(opts["steps"]), _path_spec(opts), baselines)
        rows = faithfulness_sweep(model, model.graph, scores, levels, batch, baselines=baselines)
    out = _out_dir(opts, "sweep")
    sweep_to_csv(rows, out / "sweep.csv")
    scores_to_csv(scores, out / "scores.csv")
    _timing(out, wall_time_s=time.perf_counter() - start)
    for r in rows:
        print(f"sparsity {r.sparsity:.4f}: {r.n_edges_after_prune} edges, NFS {r.nfs:.4f}")
    return 0


def cmd_saturate(opts: dict) -> int:
    start = time.perf_counter()
    model = _load_model(opts)
    with ad.default_dtype(model.dtype):
        batch = _load_task(opts, model)
        baselines = compute_baselines(model, batch)
        k = int(opts["steps"])
        if opts["mode"] == "gradpath":
            spec = PathSpec("gradpath", k, opts["step_rule"], opts["objective_positions"])
            path = build_gradpath(model, batch, k, spec, baselines)
        else:
            path = build_straight_line(model, batch, k, baselines)
        profile = saturation_profile(model, batch, path, float(opts["eps"]))
    out = _out_dir(opts, "saturate")
    diagnostics_to_csv(profile, path, out / "diagnostics.csv")
    _timing(out, wall_time_s=time.perf_counter() - start)
    print(f"{opts['mode']}: saturated fraction {profile.fraction:.4f}")
    return 0


def _read_circuit(path):
    d = json.loads(Path(path).read_text())
    return circuit_from_dict(d, graph_for_circuit_file(d))


def cmd_compare(opts: dict) -> int:
    candidate, reference = _read_circuit(opts["candidate"]), _read_circuit(opts["reference"])
    pr = precision_recall(candidate, reference)
    text = json.dumps(pr.as_dict(), indent=2, sort_keys=True)
    if opts.get("out"):
        out = Path(opts["out"])
        out.mkdir(parents=True, exist_ok=True)
        (out / "compare.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_edge_count(opts: dict) -> int:
    print(expected_edge_count(int(opts["layers"]), int(opts["heads"])))
    return 0


def cmd_export_dot(opts: dict) -> int:
    dot = to_dot(_read_circuit(opts["circuit"]))
    if opts.get("out"):
        Path(opts["out"]).parent.mkdir(parents=True, exist_ok=True)
        Path(opts["out"]).write_text(dot)
    else:
        sys.stdout.write(dot)
    return 0


COMMANDS = {
    "train": cmd_train,
    "discover": cmd_discover,
    "sweep": cmd_sweep,
    "saturate": cmd_saturate,
    "compare": cmd_compare,
    "edge-count": cmd_edge_count,
    "export-dot": cmd_export_dot,
}


# -- argument parsing ----------------------------------------------------------


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected an integer >= 0, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eapgp", description="Gradient-based edge attribution for circuit discovery.")
    sub = parser.add_subparsers(dest="command", required=True)
    S = argparse.SUPPRESS

    def common(p):
        p.add_argument("--config", default=S, help="JSON file of flag values")
        p.add_argument("--seed", type=int, default=S)
        p.add_argument("--precision", choices=("float32", "float64"), default=S)
        p.add_argument("--out", default=S, help="output directory")

    def task_flags(p):
        p.add_argument("--checkpoint", default=S)
        p.add_argument("--task", choices=sorted(GENERATORS), default=S)
        p.add_argument("--task-file", default=S, help="task JSONL instead of a generator")
        p.add_argument("--batch-size", type=_positive_int, default=S)
        p.add_argument("--seq", type=_positive_int, default=S)

    def method_flags(p):
        p.add_argument("--method", choices=METHODS, default=S)
        p.add_argument("--steps", type=_positive_int, default=S, help="path steps k")
        p.add_argument("--grad-point", choices=("clean", "corrupted"), default=S)
        p.add_argument("--path-mode", choices=("shared", "per_node"), default=S)
        p.add_argument("--step-rule", choices=("literal_unit", "endpoint_budget"), default=S)
        p.add_argument("--objective-positions", choices=("all", "final"), default=S)

    p = sub.add_parser("train", help="train a toy model and write a checkpoint")
    common(p)
    p.add_argument("--task", choices=sorted(GENERATORS), default=S)
    p.add_argument("--checkpoint", default=S, help="checkpoint path (default <out>/model.eapg)")
    p.add_argument("--train-steps", type=_positive_int, default=S)
    p.add_argument("--lr", type=float, default=S)
    p.add_argument("--batch-size", type=_positive_int, default=S)
    p.add_argument("--seq", type=_positive_int, default=S)
    p.add_argument("--vocab", type=_positive_int, default=S)
    p.add_argument("--layers", type=_nonneg_int, default=S)
    p.add_argument("--heads", type=_positive_int, default=S)
    p.add_argument("--d-model", type=_positive_int, default=S)
    p.add_argument("--d-head", type=_positive_int, default=S)
    p.add_argument("--d-mlp", type=_positive_int, default=S)

    p = sub.add_parser("discover", help="score edges and extract one circuit")
    common(p)
    task_flags(p)
    method_flags(p)
    size = p.add_mutually_exclusive_group()
    size.add_argument("--top-n", type=_nonneg_int, default=S)
    size.add_argument("--sparsity", default=S)

    p = sub.add_parser("sweep", help="faithfulness across sparsity levels")
    common(p)
    task_flags(p)
    method_flags(p)
    p.add_argument("--sparsity", default=S, help="comma-separated levels in [0, 1)")

    p = sub.add_parser("saturate", help="per-step gradient norms along an integration path")
    common(p)
    task_flags(p)
    p.add_argument("--mode", choices=("straight_line", "gradpath"), default=S)
    p.add_argument("--steps", type=_positive_int, default=S)
    p.add_argument("--eps", type=float, default=S)
    p.add_argument("--step-rule", choices=("literal_unit", "endpoint_budget"), default=S)
    p.add_argument("--objective-positions", choices=("all", "final"), default=S)

    p = sub.add_parser("compare", help="edge and node precision/recall of two circuits")
    p.add_argument("candidate")
    p.add_argument("reference")
    p.add_argument("--out", default=S)

    p = sub.add_parser("edge-count", help="number of edges for a layer/head count")
    p.add_argument("--layers", type=_nonneg_int, required=True)
    p.add_argument("--heads", type=_positive_int, required=True)

    p = sub.add_parser("export-dot", help="circuit JSON to Graphviz DOT")
    p.add_argument("circuit")
    p.add_argument("--out", default=S)
    return parser


def _merge(ns: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    explicit = {k: v for k, v in vars(ns).items() if k != "config"}
    opts = dict(DEFAULTS)
    config = getattr(ns, "config", None)
    if config:
        try:
            loaded = json.loads(Path(config).read_text())
        except (OSError, ValueError) as e:
            parser.error(f"cannot read config {config}: {e}")
        if not isinstance(loaded, dict):
            parser.error(f"config {config} must hold a JSON object")
        unknown = sorted(k for k in loaded if k.replace("-", "_") not in DEFAULTS)
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        opts.update({k.replace("-", "_"): v for k, v in loaded.items()})
    opts.update(explicit)
    if opts["method"] not in METHODS:
        parser.error(f"method must be one of {METHODS}")
    if opts["top_n"] is not None and opts["sparsity"] is not None and ns.command == "discover":
        parser.error("--top-n and --sparsity are mutually exclusive")
    return opts


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    opts = _merge(ns, parser)
    try:
        return COMMANDS[ns.command](opts)
    except UsageError as e:
        parser.error(str(e))
    except TrainingDivergedError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures exit 1 with a message
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
