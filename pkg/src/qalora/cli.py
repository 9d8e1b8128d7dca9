"""Command-line front end.

Exit codes: 0 ok, 1 verification failure, 2 usage, 3 format, 4 divergence,
5 model state (e.g. merging a model that has no adapters).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import container
from .adapter import DenseLayer, QuantLinearLayer, effective_delta, relative_discrepancy
from .bench import run_bench
from .data import DataFormatError, load_jsonl, save_jsonl, write_loss_csv
from .quant import SUPPORTED_BITS, dequantize, roundtrip_bound
from .runconfig import ConfigError, load_run_config
from .tasks import TASKS
from .training import (
    ToyModel,
    TrainingDivergedError,
    evaluate,
    init_adapters,
    merge_model,
    quantize_model,
    train_qalora,
)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_DIVERGED = 4
EXIT_STATE = 5

DEFAULT_VERIFY_TOL = 1e-6


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _load_model(path) -> ToyModel:
    try:
        return container.load(path)
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc.strerror}", EXIT_FORMAT) from None
    except container.ContainerFormatError as exc:
        raise CommandError(f"{path}: {exc}", EXIT_FORMAT) from None


def _write_model(model: ToyModel, out, inputs=()) -> None:
    out = Path(out)
    for src in inputs:
        if out.exists() and out.resolve() == Path(src).resolve():
            raise CommandError("output path must differ from the input path", EXIT_USAGE)
    tmp = out.with_name(out.name + ".tmp")
    tmp.write_bytes(container.dumps(model))
    os.replace(tmp, out)


def _load_data(path):
    try:
        return load_jsonl(path)
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc.strerror}", EXIT_FORMAT) from None
    except DataFormatError as exc:
        raise CommandError(f"{path}: {exc}", EXIT_FORMAT) from None


# -- commands -----------------------------------------------------------------------


def cmd_quantize(args) -> int:
    model = _load_model(args.in_model)
    if any(not isinstance(layer, DenseLayer) or layer.adapter is not None for layer in model.layers):
        raise CommandError("quantize expects a model made only of plain FP layers", EXIT_STATE)
    for i, layer in enumerate(model.layers):
        if layer.d_in % args.group_size:
            raise CommandError(f"--group-size {args.group_size} does not divide d_in={layer.d_in} of layer {i}", EXIT_USAGE)
    quantized = container.loads(container.dumps(quantize_model(model, args.bits, args.group_size)))
    _write_model(quantized, args.out_model, [args.in_model])
    for i, (fp, q) in enumerate(zip(model.layers, quantized.layers)):
        err = np.abs(fp.weight - dequantize(q.base))
        print(f"layer{i}: max_roundtrip_error={err.max():.6e} max_half_step={roundtrip_bound(q.base).max():.6e}")
    return EXIT_OK


def cmd_export(args) -> int:
    model = _load_model(args.in_model)
    layers = []
    for layer in model.layers:
        if isinstance(layer, QuantLinearLayer):
            w = dequantize(layer.base)
            if layer.adapter is not None:
                w = w + effective_delta(layer.adapter, layer.base.group_size, layer.d_in)
            layers.append(DenseLayer(w))
        else:
            layers.append(DenseLayer(layer.weight, layer.adapter))
    _write_model(model.with_layers(layers), args.out_model, [args.in_model])
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        run = load_run_config(args.config)
    except OSError as exc:
        raise CommandError(f"cannot read {args.config}: {exc.strerror}", EXIT_USAGE) from None
    except ConfigError as exc:
        raise CommandError(f"{args.config}: {exc}", EXIT_USAGE) from None
    cfg = run.train
    model = _load_model(args.model)
    dataset = _load_data(args.data)
    if not all(isinstance(layer, QuantLinearLayer) for layer in model.layers):
        raise CommandError("train expects a quantized model", EXIT_STATE)
    if dataset.inputs.shape[1] != model.d_in:
        raise CommandError(f"dataset has {dataset.inputs.shape[1]} features, model expects {model.d_in}", EXIT_FORMAT)
    if not container.has_adapters(model):
        try:
            model = init_adapters(model, cfg.rank, cfg.seed, cfg.adapter_scale)
        except ValueError as exc:
            raise CommandError(str(exc), EXIT_USAGE) from None
    try:
        trained, losses = train_qalora(model, dataset, cfg)
    except TrainingDivergedError as exc:
        raise CommandError(str(exc), EXIT_DIVERGED) from None
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_FORMAT) from None
    _write_model(trained, args.out_model, [args.model])
    loss_csv = args.loss_csv or run.paths.get("loss_csv") or f"{args.out_model}.loss.csv"
    write_loss_csv(losses, loss_csv)
    if losses:
        print(f"trained {len(losses)} steps, final batch loss {losses[-1]:.6g}; loss curve -> {loss_csv}")
    return EXIT_OK


def cmd_merge(args) -> int:
    model = _load_model(args.in_model)
    if not container.has_adapters(model):
        raise CommandError("model has no adapters to merge", EXIT_STATE)
    if not all(isinstance(layer, QuantLinearLayer) for layer in model.layers):
        raise CommandError("merge expects a quantized model", EXIT_STATE)
    _write_model(merge_model(model), args.out_model, [args.in_model])
    return EXIT_OK


def verify_pair(reference: ToyModel, candidate: ToyModel, trials: int, seed: int = 0):
    """Per-trial relative output discrepancies on seeded Gaussian inputs."""
    x = np.stack([np.random.default_rng(seed + t).normal(size=reference.d_in) for t in range(trials)])
    ref = reference.forward(x)
    out = candidate.forward(x)
    return np.array([relative_discrepancy(ref[t], out[t]) for t in range(trials)])


def _same_architecture(a: ToyModel, b: ToyModel) -> bool:
    return (
        len(a.layers) == len(b.layers)
        and a.activations == b.activations
        and all(la.d_in == lb.d_in and la.d_out == lb.d_out for la, lb in zip(a.layers, b.layers))
    )


def cmd_verify(args) -> int:
    if args.trials < 1:
        raise CommandError("--trials must be >= 1", EXIT_USAGE)
    if not args.tol > 0:
        raise CommandError("--tol must be positive", EXIT_USAGE)
    reference = _load_model(args.model_with_adapters)
    merged = _load_model(args.merged_model)
    if not _same_architecture(reference, merged):
        raise CommandError("models have different architectures", EXIT_FORMAT)
    disc = verify_pair(reference, merged, args.trials, args.seed)
    worst = int(np.argmax(disc))
    print(f"max relative discrepancy {disc[worst]:.3e} over {args.trials} trials (tol {args.tol:.1e})")
    bad = np.flatnonzero(disc > args.tol)
    if bad.size:
        print(f"FAIL: trial seed {args.seed + int(bad[0])} exceeds tolerance ({disc[bad[0]]:.3e})")
        return EXIT_VERIFY
    print("OK")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = _load_model(args.model)
    dataset = _load_data(args.data)
    try:
        metrics = evaluate(model, dataset)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_FORMAT) from None
    print(json.dumps(metrics, sort_keys=True))
    return EXIT_OK


def cmd_bench(args) -> int:
    try:
        report = run_bench(args.d_in, args.d_out, args.bits, args.group_size, args.iters, args.rank, args.seed)
    except ValueError as exc:
        raise CommandError(str(exc), EXIT_USAGE) from None
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_synth(args) -> int:
    task = TASKS[args.task](args.seed)
    _write_model(task.model, args.out_model)
    save_jsonl(task.train, args.out_train)
    if args.out_test:
        save_jsonl(task.test, args.out_test)
    return EXIT_OK


# -- argument parsing ---------------------------------------------------------------------


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qalora", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="group-wise quantize every FP layer")
    p.add_argument("in_model")
    p.add_argument("out_model")
    p.add_argument("--bits", type=int, choices=SUPPORTED_BITS, default=4)
    p.add_argument("--group-size", type=_positive_int, default=32)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("export", help="write the de-quantized model as FP layers")
    p.add_argument("in_model")
    p.add_argument("out_model")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("train", help="train pooled adapters against the quantized base")
    p.add_argument("model")
    p.add_argument("data")
    p.add_argument("config")
    p.add_argument("out_model")
    p.add_argument("--loss-csv", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("merge", help="fold adapters into the zero points")
    p.add_argument("in_model")
    p.add_argument("out_model")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("verify", help="check a merged model against its adapter model")
    p.add_argument("model_with_adapters")
    p.add_argument("merged_model")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--tol", type=float, default=DEFAULT_VERIFY_TOL)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("eval", help="print loss (and accuracy) as JSON")
    p.add_argument("model")
    p.add_argument("data")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time packed vs FP forward and report storage")
    p.add_argument("--d-in", type=int, default=4096)
    p.add_argument("--d-out", type=int, default=4096)
    p.add_argument("--bits", type=int, choices=SUPPORTED_BITS, default=4)
    p.add_argument("--group-size", type=int, default=32)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--rank", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("synth", help="write a synthetic FP model and dataset")
    p.add_argument("--task", choices=sorted(TASKS), default="linear-teacher")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", default=None)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    try:
        return args.func(args)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
