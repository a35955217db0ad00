"""Command-line entry point.

Subcommands: build, train, eval, convert, verify-order, inspect-steps.
Exit codes: 0 success, 1 validation failure, 2 runtime error.  Command-line
flags override values from the config file's optional "train" section.
All randomness flows from --seed (default 0).
"""

import argparse
import json
import os
import sys

import numpy as np

from . import data as datamod
from . import model_spec as ms
from . import network, rk
from . import train as trainmod


def _fail(message):
    raise ValueError(message)


def _load_spec(path):
    return ms.spec_from_config(ms.load_config(path))


def _resolve_data(arg, spec, seed, noise, train_per_class, test_per_class):
    if arg == "synthetic":
        c, h, w = spec.input_shape
        if c != 3 or h != w:
            _fail(f"synthetic data needs input_shape (3, s, s), config has {spec.input_shape}")
        train = datamod.gen_synthetic_shapes(train_per_class, classes=spec.num_classes,
                                             size=h, noise=noise, seed=seed, split="train")
        test = datamod.gen_synthetic_shapes(test_per_class, classes=spec.num_classes,
                                            size=h, noise=noise, seed=seed, split="test")
        return train, test
    if arg.startswith("cifar10:"):
        train, test = datamod.load_cifar10_binary(arg.split(":", 1)[1])
        return train, test
    _fail(f"unknown data source {arg!r}; expected 'synthetic' or 'cifar10:<dir>'")


def _check_data_shape(spec, dataset):
    if tuple(dataset.images.shape[1:]) != tuple(spec.input_shape):
        _fail(f"dataset images have shape {dataset.images.shape[1:]} but the "
              f"model expects {tuple(spec.input_shape)}")


def cmd_build(args):
    spec = _load_spec(args.config)
    violations = ms.validate_spec(spec)
    if violations:
        for v in violations:
            print(str(v))
        return 1
    total = ms.count_parameters(spec)
    if args.print_summary:
        per_period = ms.period_parameter_counts(spec)
        print(f"{'period':>6} {'kind':>12} {'s':>3} {'r':>3} {'k':>4} {'m':>3} "
              f"{'channels':>8} {'params':>10}")
        for i, (p, n) in enumerate(zip(spec.periods, per_period)):
            print(f"{i + 1:>6} {p.kind:>12} {p.s:>3} {p.r:>3} {p.k:>4} {p.m:>3} "
                  f"{p.channels:>8} {n:>10}")
    print(f"total parameters: {total}")
    return 0


def cmd_train(args):
    cfg = ms.load_config(args.config)
    spec = ms.spec_from_config(cfg)

    tcfg = dict(cfg.get("train", {}))
    for key, value in (("epochs", args.epochs), ("batch_size", args.batch_size),
                       ("lr0", args.lr), ("seed", args.seed), ("augment", args.augment),
                       ("dropout_p", args.dropout)):
        if value is not None:
            tcfg[key] = value
    tcfg.setdefault("seed", 0)
    if "epochs" not in tcfg:
        _fail("at least 1 epoch required: pass --epochs or set train.epochs in the config")
    if tcfg["epochs"] < 1:
        _fail(f"at least 1 epoch required, got {tcfg['epochs']}")
    config = trainmod.TrainConfig(**tcfg)

    train_data, test_data = _resolve_data(args.data, spec, config.seed, args.synthetic_noise,
                                          args.synthetic_train, args.synthetic_test)
    _check_data_shape(spec, train_data)
    model = network.build_model(spec, seed=config.seed)

    os.makedirs(args.out, exist_ok=True)
    best = {"acc": -1.0}

    def on_epoch_end(m, row):
        if row["test_acc"] > best["acc"]:
            best["acc"] = row["test_acc"]
            network.save_checkpoint(m, os.path.join(args.out, "best.ckpt"))

    history = trainmod.train_epochs(model, train_data, test_data, config,
                                    on_epoch_end=on_epoch_end)
    trainmod.write_metrics_csv(history, os.path.join(args.out, "metrics.csv"))
    network.save_checkpoint(model, os.path.join(args.out, "final.ckpt"))
    last = history[-1]
    print(f"trained {config.epochs} epochs: train_acc={last['train_acc']:.4f} "
          f"test_acc={last['test_acc']:.4f} (outputs in {args.out})")
    return 0


def cmd_eval(args):
    model = network.load_checkpoint(args.checkpoint)
    _, test = _resolve_data(args.data, model.spec, model.seed, args.synthetic_noise,
                            args.synthetic_train, args.synthetic_test)
    _check_data_shape(model.spec, test)
    loss, acc = trainmod.evaluate(model, test)
    print(f"loss={loss:.6f} acc={acc:.6f}")
    return 0


def _int_list(text, flag):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        _fail(f"{flag} expects comma-separated integers, got {text!r}")


def cmd_convert(args):
    if args.source == "densenet":
        if args.channels is None:
            _fail("--from densenet requires --channels (input width per block)")
        spec = ms.convert_densenet(_int_list(args.layers, "--layers"), args.growth,
                                   _int_list(args.channels, "--channels"))
    else:
        spec = ms.convert_cliquenet(_int_list(args.layers, "--layers"), args.growth)
    violations = ms.validate_spec(spec)
    if violations:
        for v in violations:
            print(str(v), file=sys.stderr)
        return 1
    print(ms.render_model_name(spec))
    doc = json.dumps(ms.spec_to_config(spec), indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(doc + "\n")
    else:
        print(doc)
    return 0


def cmd_verify_order(args):
    methods = args.methods.split(",")
    problems = args.problem.split(",")
    for m in methods:
        if m not in rk.tableau_names():
            _fail(f"unknown method {m!r}; known: {rk.tableau_names()}")
    for p in problems:
        if p not in rk.problem_names():
            _fail(f"unknown problem {p!r}; known: {rk.problem_names()}")
    lines = ["method,problem,h,error,estimated_order"]
    for m in methods:
        tab = rk.tableau_library(m)
        for pname in problems:
            problem = rk.problem_library(pname)
            hs, errors, order = rk.order_study(tab, problem, args.h0, args.levels)
            for h, err in zip(hs, errors):
                lines.append(f"{m},{pname},{h:.10g},{err:.10e},{order:.6f}")
            print(f"{m} on {pname}: estimated order {order:.3f}")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    else:
        print("\n".join(lines))
    return 0


def cmd_inspect_steps(args):
    model = network.load_checkpoint(args.checkpoint)
    rows = model.time_channel_ratios()
    if not rows:
        print("checkpoint has no time-channel periods; step-size ratios exist "
              "only for time-channel step blocks", file=sys.stderr)
        return 1
    print("period,step,ratio")
    for p_idx, s_idx, ratio in rows:
        print(f"{p_idx + 1},{s_idx + 1},{ratio:.6g}")
    return 0


def _add_data_flags(p):
    p.add_argument("--data", required=True,
                   help="'synthetic' or 'cifar10:<dir with the 6 binary batches>'")
    p.add_argument("--synthetic-noise", type=float, default=0.15,
                   help="noise level for synthetic data (default 0.15)")
    p.add_argument("--synthetic-train", type=int, default=500,
                   help="synthetic training samples per class (default 500)")
    p.add_argument("--synthetic-test", type=int, default=100,
                   help="synthetic test samples per class (default 100)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="rknet",
        description="Build, train, and inspect Runge-Kutta convolutional networks; "
                    "verify integrator convergence orders.",
        epilog="Flags override values from the config file's 'train' section; "
               "all randomness derives from --seed (default 0).")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="validate a config and print the model summary")
    p.add_argument("--config", required=True)
    p.add_argument("--print-summary", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("train", help="train a model; writes metrics.csv, final.ckpt, best.ckpt")
    p.add_argument("--config", required=True)
    _add_data_flags(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    _add_data_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("convert", help="derive an RKNet config from a DenseNet/CliqueNet layout")
    p.add_argument("--from", dest="source", required=True, choices=("densenet", "cliquenet"))
    p.add_argument("--layers", required=True,
                   help="growths per block, comma separated (e.g. 12,12,12)")
    p.add_argument("--growth", type=int, required=True, help="growth rate k")
    p.add_argument("--channels", default=None,
                   help="densenet only: input width per block, comma separated")
    p.add_argument("--out", default=None, help="write the config JSON here instead of stdout")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("verify-order", help="measure integrator convergence orders")
    p.add_argument("--methods", default=",".join(rk.tableau_names()),
                   help="comma-separated tableau names")
    p.add_argument("--problem", default="decay,logistic",
                   help="comma-separated problem names")
    p.add_argument("--h0", type=float, default=0.1)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--out", default=None, help="write the CSV here instead of stdout")
    p.set_defaults(func=cmd_verify_order)

    p = sub.add_parser("inspect-steps", help="print trained h_n/u ratios of time-channel periods")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect_steps)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyError as exc:
        print(f"error: {exc.args[0] if exc.args else exc}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
