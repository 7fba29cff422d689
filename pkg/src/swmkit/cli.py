"""Command-line pipeline.

Every subcommand reads options from flags and, optionally, a JSON file
given with ``--config`` (flags win). Outputs go to ``--out``. Exit codes:
0 success, 2 configuration error, 3 domain error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .codec import (
    SharingViolation,
    SwmFormatError,
    compress,
    condensed_forward,
    extract_model,
    load_bundle,
    reconstruct_dense,
    save_bundle,
)
from .latency import LatencyPredictor, default_profile, fit_profile, load_calibration
from .patterns import PatternLibrary, generate_pattern_space, uniform_assignment
from .runtime import (
    DeviceProfile,
    HorizonExceeded,
    PowerTrace,
    events_to_csv,
    mixed_trace,
    no_prune_bundle,
    run_adaptive,
    run_inference_intermittent,
)
from .search import RewardConfig, SharedWeightEnvironment, episodes_to_csv, search
from .shared_training import TrainConfig, build_mask_schedule, train_shared_sequence
from .tensor_nn import (
    Dataset,
    NetworkDef,
    ShapeError,
    evaluate_accuracy,
    load_idx_dataset,
    load_models,
    load_network,
    make_synthetic_dataset,
    save_models,
    to_kernels,
    toy_network,
)

EXIT_OK, EXIT_CONFIG, EXIT_DOMAIN = 0, 2, 3


class ConfigError(Exception):
    pass


DATA_DEFAULTS = {"dataset": "synthetic", "classes": 4, "samples_per_class": 80, "data_seed": None}
TRAIN_DEFAULTS = {"network": None, "patterns": None, "pattern_ids": None, "epochs": 5, "lr": 0.05, "batch_size": 32,
                  "calibration": None, "mode": "cpu"}

DEFAULTS = {
    "gen-patterns": {"shape": "3x3", "count": 44, "counts": None},
    "train": {**DATA_DEFAULTS, **TRAIN_DEFAULTS},
    "search": {**DATA_DEFAULTS, **TRAIN_DEFAULTS, "latency_constraint": None, "accuracy_constraint": None,
               "phi_pattern": 1.0, "phi_accuracy": 1.0, "phi_latency": 1.0, "max_episodes": 300, "n_models": 3,
               "epochs_search": 2, "epochs_final": 5, "controller_lr": 5e-3, "beta": 0.9},
    "pack": {"models": None},
    "extract": {"bundle": None, "model": 0},
    "predict": {**DATA_DEFAULTS, "bundle": None, "model": -1},
    "simulate": {**DATA_DEFAULTS, "bundle": None, "device": None, "trace": None, "power": None, "sweep": None,
                 "policy": "adaptive", "storage": "swm", "inferences": 40, "compare_baselines": False,
                 "horizon": 1e5},
    "report": {**DATA_DEFAULTS, "models": None, "train_report": None, "calibration": None, "mode": "cpu"},
}


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swmkit", description="Shared-weight pattern-pruned models for intermittent devices.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        p.add_argument("--config", default=None, help="JSON file of options; flags override it")
        p.add_argument("--out", default=None, help="output directory (default .)")

    def data(p):
        p.add_argument("--dataset", default=None, help="'synthetic', an .npz with x_train/y_train/x_holdout/y_holdout, or idx:IMAGES,LABELS")
        p.add_argument("--classes", type=int, default=None)
        p.add_argument("--samples-per-class", type=int, default=None)
        p.add_argument("--data-seed", type=int, default=None)

    def training(p):
        p.add_argument("--network", default=None, help="network JSON (default: built-in toy network)")
        p.add_argument("--patterns", default=None, help="pattern library JSON")
        p.add_argument("--pattern-ids", default=None, help="comma-separated library ids, one per model")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--calibration", default=None, help="latency calibration CSV (default: shipped)")
        p.add_argument("--mode", default=None, choices=["cpu", "lea", "lea_regular", "lea_irregular"])

    p = sub.add_parser("gen-patterns", help="generate a pattern library")
    common(p)
    p.add_argument("--shape", default=None, help="kernel shape, e.g. 3x3")
    p.add_argument("--count", type=int, default=None, help="total patterns, split across sparsity bands")

    p = sub.add_parser("train", help="train a shared-weight model sequence")
    common(p)
    data(p)
    training(p)

    p = sub.add_parser("search", help="search pruning patterns under accuracy/latency constraints")
    common(p)
    data(p)
    training(p)
    p.add_argument("--latency-constraint", type=float, default=None)
    p.add_argument("--accuracy-constraint", type=float, default=None)
    p.add_argument("--phi-pattern", type=float, default=None)
    p.add_argument("--phi-accuracy", type=float, default=None)
    p.add_argument("--phi-latency", type=float, default=None)
    p.add_argument("--max-episodes", type=int, default=None)
    p.add_argument("--n-models", type=int, default=None)
    p.add_argument("--epochs-search", type=int, default=None)
    p.add_argument("--epochs-final", type=int, default=None)
    p.add_argument("--controller-lr", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)

    p = sub.add_parser("pack", help="pack trained models into an SWM bundle")
    common(p)
    p.add_argument("--models", default=None, help="models .npz from train/search")

    p = sub.add_parser("extract", help="print one model's condensed weights from a bundle")
    common(p)
    p.add_argument("--bundle", default=None)
    p.add_argument("--model", type=int, default=None)

    p = sub.add_parser("predict", help="classify the holdout set with a bundle model")
    common(p)
    data(p)
    p.add_argument("--bundle", default=None)
    p.add_argument("--model", type=int, default=None, help="model index (default: last, the densest)")

    p = sub.add_parser("simulate", help="run inferences on the simulated intermittent device")
    common(p)
    data(p)
    p.add_argument("--bundle", default=None)
    p.add_argument("--device", default=None, help="device profile JSON (default: built-in)")
    p.add_argument("--trace", default=None, help="power trace CSV t_start_s,power_w (default: mixed trace)")
    p.add_argument("--power", type=float, default=None, help="constant harvested power in watts")
    p.add_argument("--sweep", default=None, help="comma-separated powers: per-model latency sweep")
    p.add_argument("--policy", default=None, help="'adaptive' or a fixed model index")
    p.add_argument("--storage", default=None, choices=["swm", "reload", "offchip"])
    p.add_argument("--inferences", type=int, default=None)
    p.add_argument("--compare-baselines", action="store_true", default=None)
    p.add_argument("--horizon", type=float, default=None, help="simulation horizon in seconds")

    p = sub.add_parser("report", help="per-model sparsity/accuracy/predicted-latency table")
    common(p)
    data(p)
    p.add_argument("--models", default=None)
    p.add_argument("--train-report", default=None, help="train_report.csv to take accuracies from")
    p.add_argument("--calibration", default=None)
    p.add_argument("--mode", default=None, choices=["cpu", "lea", "lea_regular", "lea_irregular"])
    return parser


def _options(args: argparse.Namespace) -> dict:
    opts = dict(DEFAULTS[args.command])
    opts.update({"seed": 0, "out": "."})
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        unknown = set(cfg) - set(opts)
        if unknown:
            raise ConfigError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        opts.update(cfg)
    for k, v in vars(args).items():
        if k not in ("command", "config") and v is not None:
            opts[k] = v
    if opts.get("data_seed", 1) is None:
        opts["data_seed"] = opts["seed"]
    return opts


def _input(path, what: str) -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{what} file not found: {p}")
    return p


def _out_dir(opts) -> Path:
    out = Path(opts["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _ints(text, what: str) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(t) for t in text]
    try:
        return [int(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated integers") from None


def _floats(text, what: str) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(t) for t in text]
    try:
        return [float(t) for t in str(text).split(",") if t.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be comma-separated numbers") from None


def _dataset(opts) -> Dataset:
    spec = str(opts["dataset"])
    if spec == "synthetic":
        return make_synthetic_dataset(int(opts["data_seed"]), int(opts["classes"]), int(opts["samples_per_class"]))
    if spec.startswith("idx:"):
        parts = spec[4:].split(",")
        if len(parts) != 2:
            raise ConfigError("idx dataset must be idx:IMAGES,LABELS")
        return load_idx_dataset(_input(parts[0], "dataset"), _input(parts[1], "dataset"), seed=int(opts["data_seed"]))
    with np.load(_input(spec, "dataset")) as f:
        y_tr, y_ho = f["y_train"].astype(np.int64), f["y_holdout"].astype(np.int64)
        classes = int(max(y_tr.max(), y_ho.max())) + 1
        return Dataset(f["x_train"].astype(np.float32), y_tr, f["x_holdout"].astype(np.float32), y_ho, classes,
                       {"source": spec})


def _network(opts, data: Dataset) -> NetworkDef:
    if opts.get("network"):
        return load_network(_input(opts["network"], "network"))
    return toy_network(data.num_classes, data.x_train.shape[-1])


def _library(opts) -> PatternLibrary:
    if opts.get("patterns") is None:
        return generate_pattern_space((3, 3), 44, seed=0)
    return PatternLibrary.load(_input(opts["patterns"], "patterns"))


def _predictor(opts) -> LatencyPredictor:
    if opts.get("calibration"):
        return fit_profile(load_calibration(_input(opts["calibration"], "calibration")), source=str(opts["calibration"]))
    return default_profile()


def _write(path: Path, text: str) -> None:
    path.write_text(text)
    print(f"wrote {path}")


def _train_report_with_latency(net, report, schedule, predictor, mode):
    for m, masks in zip(report.models, schedule.full_masks):
        m.latency_predicted = predictor.predict_masks(net, masks, mode)
    return report


def cmd_gen_patterns(opts) -> int:
    try:
        shape = tuple(int(v) for v in str(opts["shape"]).lower().split("x"))
    except ValueError:
        raise ConfigError("shape must look like 3x3") from None
    if len(shape) != 2:
        raise ConfigError("shape must look like 3x3")
    counts = opts["counts"] if opts["counts"] is not None else int(opts["count"])
    lib = generate_pattern_space(shape, counts, seed=int(opts["seed"]))
    out = _out_dir(opts)
    lib.save(out / "patterns.json")
    print(f"{len(lib)} patterns of shape {shape[0]}x{shape[1]} written to {out / 'patterns.json'}")
    return EXIT_OK


def cmd_train(opts) -> int:
    data = _dataset(opts)
    net = _network(opts, data)
    lib = _library(opts)
    if opts["pattern_ids"] is None:
        raise ConfigError("--pattern-ids is required")
    ids = _ints(opts["pattern_ids"], "pattern-ids")
    ids = sorted(ids, key=lambda i: (-lib[i].sparsity(), i))
    schedule = build_mask_schedule(net, [uniform_assignment(net, lib, i) for i in ids], lib)
    cfg = TrainConfig(int(opts["epochs"]), float(opts["lr"]), int(opts["batch_size"]), int(opts["seed"]))
    models, report = train_shared_sequence(net, schedule, data, cfg)
    _train_report_with_latency(net, report, schedule, _predictor(opts), opts["mode"])
    out = _out_dir(opts)
    save_models(out / "models.npz", models)
    _write(out / "train_report.csv", report.to_csv())
    print(f"sharing verified: {report.sharing_verified}")
    return EXIT_OK


def cmd_search(opts) -> int:
    if opts["latency_constraint"] is None or opts["accuracy_constraint"] is None:
        raise ConfigError("latency_constraint and accuracy_constraint are required")
    try:
        cfg = RewardConfig(float(opts["latency_constraint"]), float(opts["accuracy_constraint"]),
                           float(opts["phi_pattern"]), float(opts["phi_accuracy"]), float(opts["phi_latency"]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed constraints: {exc}") from None
    data = _dataset(opts)
    net = _network(opts, data)
    lib = _library(opts)
    env = SharedWeightEnvironment(net, lib, data, _predictor(opts), opts["mode"], int(opts["epochs_search"]),
                                  int(opts["epochs_final"]), float(opts["lr"]), int(opts["batch_size"]), int(opts["seed"]))
    result = search(net, lib, data, cfg, env, int(opts["max_episodes"]), int(opts["n_models"]), int(opts["seed"]),
                    float(opts["beta"]), float(opts["controller_lr"]))
    out = _out_dir(opts)
    _write(out / "episodes.csv", episodes_to_csv(result.episodes))
    _write(out / "best_assignment.json", json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")
    save_models(out / "models.npz", result.models)
    _train_report_with_latency(net, result.report, env.schedule(result.actions), env.predictor, opts["mode"])
    _write(out / "train_report.csv", result.report.to_csv())
    print(f"satisfied={result.satisfied} pattern_ids={result.actions} episodes={len(result.episodes)}")
    return EXIT_OK


def cmd_pack(opts) -> int:
    models = load_models(_input(opts["models"], "models"))
    bundle = compress(models)
    out = _out_dir(opts)
    save_bundle(bundle, out / "bundle.swm")
    print(f"packed {bundle.num_models} models, payload {bundle.payload_size()} values -> {out / 'bundle.swm'}")
    return EXIT_OK


def _format_condensed(bundle, model: int) -> str:
    lines = [f"# model {model}"]
    for li, kernels in enumerate(extract_model(bundle, model)):
        if kernels is None:
            continue
        lines.append(f"layer {li} ({bundle.layers[li].layer.type}, {len(kernels)} kernels)")
        for k, ck in enumerate(kernels):
            vals = " ".join(f"{v:.9g}" for v in ck.values)
            lines.append(f"  kernel {k} pattern {ck.pattern.to_string()}: {vals}")
    return "\n".join(lines) + "\n"


def cmd_extract(opts) -> int:
    bundle = load_bundle(_input(opts["bundle"], "bundle"))
    model = int(opts["model"])
    if not 0 <= model < bundle.num_models:
        raise IndexError(f"model index {model} outside bundle of {bundle.num_models} models")
    text = _format_condensed(bundle, model)
    # cross-check the extraction against the independent dense scatter
    dense = reconstruct_dense(bundle, model)
    for li, kernels in enumerate(extract_model(bundle, model)):
        if kernels is None:
            continue
        dk = to_kernels(bundle.layers[li].layer, dense.weights[li])
        for k, ck in enumerate(kernels):
            if not np.array_equal(dk[k][ck.pattern.array], ck.values):
                raise RuntimeError(f"layer {li} kernel {k}: extraction disagrees with dense reconstruction")
    out = _out_dir(opts)
    sys.stdout.write(text)
    (out / f"condensed_model{model}.txt").write_text(text)
    return EXIT_OK


def cmd_predict(opts) -> int:
    bundle = load_bundle(_input(opts["bundle"], "bundle"))
    model = int(opts["model"]) % bundle.num_models if int(opts["model"]) < 0 else int(opts["model"])
    data = _dataset(opts)
    scores = condensed_forward(bundle, model, data.x_holdout)
    pred = scores.argmax(axis=1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["index", "label", "prediction"])
    for i, (y, p) in enumerate(zip(data.y_holdout, pred)):
        w.writerow([i, int(y), int(p)])
    out = _out_dir(opts)
    _write(out / "predictions.csv", buf.getvalue())
    print(f"model {model} holdout accuracy {float((pred == data.y_holdout).mean()):.4f}")
    return EXIT_OK


def _device(opts) -> DeviceProfile:
    if opts["device"] is None:
        return DeviceProfile()
    try:
        return DeviceProfile.load(_input(opts["device"], "device"))
    except (TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"malformed device profile: {exc}") from None


def _trace(opts) -> PowerTrace:
    if opts["trace"] is not None:
        return PowerTrace.load(_input(opts["trace"], "trace"))
    if opts["power"] is not None:
        return PowerTrace.constant(float(opts["power"]))
    return mixed_trace()


def cmd_simulate(opts) -> int:
    bundle = load_bundle(_input(opts["bundle"], "bundle"))
    device = _device(opts)
    data = _dataset(opts)
    n = int(opts["inferences"])
    if n < 1:
        raise ConfigError("inferences must be at least 1")
    inputs = [data.x_holdout[i % len(data.x_holdout)] for i in range(n)]
    horizon = float(opts["horizon"])
    out = _out_dir(opts)

    if opts["sweep"] is not None:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["power_w", "model_index", "latency_s", "cycles", "checkpoints", "energy_j"])
        for p in _floats(opts["sweep"], "sweep"):
            for k in range(bundle.num_models):
                _, r = run_inference_intermittent(bundle, k, inputs[0], device, PowerTrace.constant(p), horizon_s=horizon)
                w.writerow([f"{p:.9g}", k, f"{r.latency_s:.9f}", r.cycles, r.checkpoints, f"{r.energy_j:.9e}"])
        _write(out / "latency_sweep.csv", buf.getvalue())
        return EXIT_OK

    trace = _trace(opts)
    policy = opts["policy"]
    if policy != "adaptive":
        try:
            policy = int(policy)
        except ValueError:
            raise ConfigError("policy must be 'adaptive' or a model index") from None
    run = run_adaptive(bundle, inputs, device, trace, policy, opts["storage"], horizon_s=horizon)
    _write(out / "run_report.csv", run.to_csv())
    _write(out / "events.csv", events_to_csv(run.events))
    print(f"completed {n} inferences in {run.completion_s:.6f} s (models used: {sorted(set(run.models_used))})")
    if opts["compare_baselines"]:
        reload_run = run_adaptive(bundle, inputs, device, trace, policy, "reload", horizon_s=horizon)
        dense_run = run_adaptive(no_prune_bundle(bundle), inputs, device, trace, 0, "offchip", horizon_s=horizon)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["strategy", "completion_s", "speedup_vs_no_prune"])
        for name, r in [("swm", run), ("reload", reload_run), ("no_prune", dense_run)]:
            w.writerow([name, f"{r.completion_s:.9f}", f"{dense_run.completion_s / r.completion_s:.6f}"])
        _write(out / "comparison.csv", buf.getvalue())
    return EXIT_OK


def cmd_report(opts) -> int:
    models = load_models(_input(opts["models"], "models"))
    net = models[0].net
    predictor = _predictor(opts)
    accuracies = None
    if opts["train_report"] is not None:
        rows = list(csv.DictReader(_input(opts["train_report"], "train_report").open()))
        if len(rows) != len(models):
            raise ValueError("train report and models disagree on the number of models")
        accuracies = [float(r["accuracy"]) for r in rows]
    else:
        data = _dataset(opts)
        accuracies = [evaluate_accuracy(m, data.x_holdout, data.y_holdout) for m in models]
    # pruned layers: those some model does not keep dense
    pruned = [i for i in net.weighted_layers() if any(not m.masks[i].all() for m in models)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model_index", "sparsity", "accuracy", "latency_predicted"])
    for k, m in enumerate(models):
        total = sum(m.masks[i].size for i in pruned)
        sparsity = 1.0 - sum(int(m.masks[i].sum()) for i in pruned) / total if total else 0.0
        lat = predictor.predict_masks(net, m.masks, opts["mode"])
        w.writerow([k, f"{sparsity:.6f}", f"{accuracies[k]:.6f}", f"{lat:.9g}"])
    out = _out_dir(opts)
    _write(out / "summary.csv", buf.getvalue())
    return EXIT_OK


COMMANDS = {
    "gen-patterns": cmd_gen_patterns,
    "train": cmd_train,
    "search": cmd_search,
    "pack": cmd_pack,
    "extract": cmd_extract,
    "predict": cmd_predict,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        opts = _options(args)
        return COMMANDS[args.command](opts)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SwmFormatError, SharingViolation, HorizonExceeded, ShapeError, ValueError, RuntimeError, IndexError,
            KeyError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
