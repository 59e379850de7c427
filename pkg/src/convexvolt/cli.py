"""Command-line entry point: ``convexvolt <subcommand> ...``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments, fixtures
from .datagen import ScenarioConfig, generate_dataset, load_dataset, save_dataset
from .grid import load_network
from .icnn import Activation, init_model, load_model, save_model
from .regulate import RegulationProblem, solve
from .train import TrainConfig, TrainingDiverged, TrainStrategy, evaluate_mape, train

log = logging.getLogger("convexvolt")


def read_vector(path) -> np.ndarray:
    """Floats separated by whitespace, commas or newlines; ``#`` starts a comment."""
    values = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].replace(",", " ")
        values += [float(tok) for tok in line.split()]
    return np.array(values)


def _hidden(text: str) -> list[int]:
    dims = [int(t) for t in text.split(",") if t.strip()]
    if not dims or min(dims) < 1:
        raise argparse.ArgumentTypeError("hidden sizes must be positive integers, e.g. 16,32,16")
    return dims


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    net = load_network(fixtures.resolve(args.network))
    cfg = ScenarioConfig(args.samples, args.scale_min, args.scale_max, args.pf_min, args.pf_max,
                         args.seed, args.v_ref)
    ds = generate_dataset(net, cfg, workers=args.workers)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.skipped} skipped) to {args.out}")
    return 0


def cmd_train(args) -> int:
    ds = load_dataset(args.dataset)
    if args.network:
        net = load_network(fixtures.resolve(args.network))
        if net.n_loads != ds.n_buses:
            raise ValueError(f"network has {net.n_loads} load buses, dataset has {ds.n_buses}")
    strategy = TrainStrategy.parse(args.strategy, args.slope)
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
                      optimizer=args.optimizer, seed=args.seed, strategy=strategy)
    model = init_model(ds.inputs.shape[1], args.hidden, ds.targets.shape[1], seed=args.seed,
                       activation=Activation.parse(args.activation), weight_sign=args.init)
    timing = not args.no_timing
    try:
        model, rep = train(model, ds, cfg, record_timing=timing)
    except TrainingDiverged as exc:
        if args.out_report:
            experiments.write_train_report(exc.report.loss_history, exc.report.wall_ms,
                                           exc.report.negative_weight_events, args.out_report, timing)
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    save_model(model, args.out_model)
    if args.out_report:
        experiments.write_train_report(rep.loss_history, rep.wall_ms, rep.negative_weight_events,
                                       args.out_report, timing)
    print(f"{strategy.kind}: loss {rep.initial_loss:.6g} -> {rep.final_loss:.6g} "
          f"over {rep.iterations} iterations")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.dataset)
    rep = evaluate_mape(model, ds, v_ref=args.v_ref, basis=args.basis)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bus", "mape_percent"])
            for bus, val in enumerate(rep.per_bus, 1):
                w.writerow([bus, repr(float(val))])
    print(f"MAPE ({args.basis}) mean {rep.mean:.6f}%  max {rep.max:.6f}%")
    return 0


def cmd_regulate(args) -> int:
    model = load_model(args.model)
    a = read_vector(args.a) if args.a else np.ones(model.out_dim)
    problem = RegulationProblem(model, read_vector(args.p), read_vector(args.q_min),
                                read_vector(args.q_max), a, args.v_ref)
    res = solve(problem, step0=args.step0, max_iter=args.max_iter, tol=args.tol)
    with open(args.out, "w", newline="") as fh:
        fh.write("# q: controllable net reactive injection per non-slack bus (consumption "
                 "positive, replaces the load reactive demand)\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "index", "value"])
        for i, v in enumerate(res.q_star, 1):
            w.writerow(["q_star", i, repr(float(v))])
        w.writerow(["objective", 0, repr(res.objective)])
        w.writerow(["iterations", 0, res.iterations])
        w.writerow(["converged", 0, int(res.converged)])
        for k, v in enumerate(res.trace):
            w.writerow(["trace", k, repr(float(v))])
    print(f"objective {res.objective:.6g} after {res.iterations} iterations"
          f"{'' if res.converged else ' (not converged)'}")
    return 0


def _load_spec(args) -> experiments.ExperimentSpec:
    spec = experiments.ExperimentSpec.load(args.config) if args.config else experiments.ExperimentSpec()
    changes = {}
    if args.out_dir:
        changes["out_dir"] = args.out_dir
    if args.seeds:
        changes["n_seeds"] = args.seeds
    if args.workers:
        changes["workers"] = args.workers
    if args.no_timing:
        changes["record_timing"] = False
    return dataclasses.replace(spec, **changes) if changes else spec


def _finish(checks, assert_checks: bool) -> int:
    for c in checks:
        print(c.line())
    if assert_checks and not all(c.passed for c in checks):
        return 2
    return 0


def cmd_compare_duplication(args) -> int:
    result = experiments.run_duplication_study(_load_spec(args))
    print((result.out_dir / "summary.txt").read_text(), end="")
    return 2 if args.assert_checks and not all(c.passed for c in result.checks) else 0


def cmd_compare_strategies(args) -> int:
    result = experiments.run_strategy_study(_load_spec(args))
    print((result.out_dir / "summary.txt").read_text(), end="")
    return 2 if args.assert_checks and not all(c.passed for c in result.checks) else 0


def cmd_end_to_end(args) -> int:
    spec = _load_spec(args)
    if args.model:
        spec = dataclasses.replace(spec, model_path=args.model)
    report = experiments.end_to_end(spec)
    return _finish(report.checks, args.assert_checks)


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="convexvolt",
                                     description="Input-convex voltage surrogates for radial feeders.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample operating points and solve the power flow")
    p.add_argument("--network", required=True, help="feeder file or bundled name (feeder4, feeder10, feeder33)")
    p.add_argument("--samples", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale-min", type=float, default=0.5)
    p.add_argument("--scale-max", type=float, default=1.5)
    p.add_argument("--pf-min", type=float, default=0.85)
    p.add_argument("--pf-max", type=float, default=0.95)
    p.add_argument("--v-ref", type=float, default=1.0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an ICNN on a dataset")
    p.add_argument("--network", help="feeder the dataset came from (checked against its size)")
    p.add_argument("--dataset", required=True)
    p.add_argument("--strategy", default="smooth_gate",
                   choices=["post_check", "clamp_gate", "smooth_gate", "post-check", "clamp", "smooth"])
    p.add_argument("--slope", type=float, default=-0.01, help="negative-branch slope s of the smooth gate")
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", default="adam", choices=["adam", "sgd"])
    p.add_argument("--hidden", type=_hidden, default=[16, 32, 16])
    p.add_argument("--activation", default="relu", help="relu, leaky_relu:A or elu:A")
    p.add_argument("--init", default="mixed", choices=["mixed", "positive", "negative"],
                   help="sign of the initial hidden weights")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-model", required=True)
    p.add_argument("--out-report", help="per-iteration CSV: iteration, loss, wall_ms, negative_weight_events")
    p.add_argument("--no-timing", action="store_true", help="leave wall-clock columns empty")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-bus MAPE of a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--v-ref", type=float, default=1.0)
    p.add_argument("--basis", default="magnitude", choices=["magnitude", "deviation"])
    p.add_argument("--out", help="per-bus CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("regulate", help="minimise predicted voltage deviation over reactive injections")
    p.add_argument("--model", required=True)
    p.add_argument("--p", required=True, help="vector file of fixed real injections")
    p.add_argument("--q-min", required=True)
    p.add_argument("--q-max", required=True)
    p.add_argument("--a", help="vector file of per-bus weights (default all ones)")
    p.add_argument("--v-ref", type=float, default=1.0)
    p.add_argument("--step0", type=float, default=1.0)
    p.add_argument("--max-iter", type=int, default=1000)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_regulate)

    for name, func, text in [
        ("compare-duplication", cmd_compare_duplication, "basic ICNN against mirrored-input variants"),
        ("compare-strategies", cmd_compare_strategies, "post-check, clamp-gate and smooth-gate training"),
        ("end-to-end", cmd_end_to_end, "train, regulate held-out scenarios, audit with the power flow"),
    ]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="JSON experiment spec (defaults apply to missing keys)")
        p.add_argument("--out-dir")
        p.add_argument("--seeds", type=int, help="override n_seeds")
        p.add_argument("--workers", type=int, help="worker processes (default: CONVEXVOLT_WORKERS or 1)")
        p.add_argument("--no-timing", action="store_true",
                       help="do not record wall-clock times, so outputs are byte-reproducible")
        p.add_argument("--assert", dest="assert_checks", action="store_true",
                       help="exit with status 2 if any ordering check fails")
        if name == "end-to-end":
            p.add_argument("--model", help="use this trained model instead of training one")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
