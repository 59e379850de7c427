"""Multi-seed comparison studies and the regulation demo.

Every study writes its raw per-run data (``runs.csv`` plus one loss curve per
run) and derives the summary tables from it. Runs are independent tasks; with
more than one worker they go through a process pool and are collected in
submission order, so outputs do not depend on scheduling.
"""

from __future__ import annotations

import csv
import dataclasses
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fixtures
from .datagen import Dataset, ScenarioConfig, dataset_hash, generate_dataset, split_dataset
from .grid import RadialNetwork, load_network, solve_distflow, voltage_magnitudes
from .icnn import (
    Activation, IcnnModel, build_duplicated, forward, init_model, is_convex_admissible,
    mirror_inputs, resplit_passthrough,
)
from .regulate import RegulationProblem, objective_batch, solve
from .train import (
    TrainConfig, TrainingDiverged, TrainStrategy, evaluate_mape, post_check_clamp, train,
)

log = logging.getLogger(__name__)

VARIANTS = ("basic", "dup_trick_equal_params", "dup_trick_equal_neurons")
PARAM_TOLERANCE = 0.05


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentSpec:
    networks: list[str] = field(default_factory=lambda: ["feeder10"])
    dataset: ScenarioConfig = field(default_factory=lambda: ScenarioConfig(n_samples=1000, seed=1))
    train_fraction: float = 0.8
    split_seed: int = 0
    hidden_dims: list[int] = field(default_factory=lambda: [16, 32, 16])
    equal_params_dims: Optional[list[int]] = None  # derived from hidden_dims when None
    variants: list[str] = field(default_factory=lambda: list(VARIANTS))
    strategies: list[str] = field(default_factory=lambda: ["post_check", "clamp_gate", "smooth_gate"])
    n_seeds: int = 20
    first_seed: int = 0
    activation: str = "relu"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=200))
    out_dir: str = "results"
    record_timing: bool = True
    workers: Optional[int] = None
    # end-to-end demo
    model_path: Optional[str] = None
    n_scenarios: int = 20
    q_margin: float = 0.5

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if not self.variants and not self.strategies:
            raise ValueError("need at least one variant or strategy")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")
        for s in self.strategies:
            TrainStrategy.parse(s)

    @property
    def seeds(self) -> list[int]:
        return list(range(self.first_seed, self.first_seed + self.n_seeds))

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        doc = dict(doc)
        if "dataset" in doc:
            doc["dataset"] = ScenarioConfig(**doc["dataset"])
        if "train" in doc:
            tr = dict(doc["train"])
            if "strategy" in tr:
                st = tr["strategy"]
                tr["strategy"] = (TrainStrategy.parse(st) if isinstance(st, str)
                                  else TrainStrategy(**st))
            doc["train"] = TrainConfig(**tr)
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def n_workers(self) -> int:
        if self.workers is not None:
            return max(1, int(self.workers))
        cap = os.environ.get("CONVEXVOLT_WORKERS")
        return max(1, int(cap)) if cap else 1


def icnn_param_count(in_dim: int, hidden_dims: Sequence[int], out_dim: int) -> int:
    widths = list(hidden_dims) + [out_dim]
    total = 0
    for i, w in enumerate(widths):
        total += w * in_dim + w
        if i:
            total += w * widths[i - 1]
    return total


def match_param_count(in_dim: int, hidden_dims: Sequence[int], out_dim: int,
                      tolerance: float = PARAM_TOLERANCE) -> list[int]:
    """Hidden widths, proportional to ``hidden_dims``, giving a mirrored-input
    model (input ``2 * in_dim``) with about as many parameters as the plain one.
    """
    target = icnn_param_count(in_dim, hidden_dims, out_dim)
    base = np.asarray(hidden_dims, dtype=float)
    best = None
    for scale in np.linspace(0.05, 1.0, 400):
        widths = base * scale
        # floor or ceil per layer around the proportional widths
        for choice in itertools.product(*[sorted({max(1, math.floor(w)), max(1, math.ceil(w))})
                                          for w in widths]):
            dims = list(choice)
            err = abs(icnn_param_count(2 * in_dim, dims, out_dim) - target) / target
            shape = float(np.abs(np.asarray(dims) - widths).sum())
            if best is None or (err, shape) < best[0]:
                best = ((err, shape), dims)
    best = (best[0][0], best[1])
    if best[0] > tolerance:
        raise ValueError(f"no proportional widths within {tolerance:.0%} of {target} parameters")
    return best[1]


def _spec_network(name: str) -> RadialNetwork:
    return load_network(fixtures.resolve(name))


def _make_data(spec: ExperimentSpec, net: RadialNetwork):
    ds = generate_dataset(net, spec.dataset)
    train_set, test_set = split_dataset(ds, spec.train_fraction, spec.split_seed)
    return ds, train_set, test_set


# ---------------------------------------------------------------------------
# single runs


@dataclass
class RunTask:
    network: str
    label: str  # variant or strategy name
    seed: int
    train_inputs: np.ndarray
    train_targets: np.ndarray
    test: Dataset
    hidden_dims: list[int]
    cfg: TrainConfig
    activation: Activation
    mirrored: bool = False
    weight_sign: str = "mixed"
    record_timing: bool = True


@dataclass
class RunResult:
    network: str
    label: str
    seed: int
    status: str  # "ok" or "diverged"
    loss_history: list[float]
    wall_ms: list[float]
    negative_weight_events: list[int]
    final_loss: float = float("nan")
    final_sse: float = float("nan")
    mape_mean: float = float("nan")
    mape_max: float = float("nan")
    mape_dev_mean: float = float("nan")
    per_bus_mape: Optional[np.ndarray] = None
    per_bus_mismatch: Optional[np.ndarray] = None
    wall_time: float = float("nan")
    n_params: int = 0
    convex: bool = False

    @property
    def iterations(self) -> int:
        return len(self.loss_history)

    @property
    def iter_ms(self) -> float:
        return 1000.0 * self.wall_time / max(self.iterations, 1)


def run_one(task: RunTask) -> RunResult:
    in_dim = task.train_inputs.shape[1]
    out_dim = task.train_targets.shape[1]
    transform = mirror_inputs if task.mirrored else None
    model = init_model(2 * in_dim if task.mirrored else in_dim, task.hidden_dims, out_dim,
                       seed=task.seed, activation=task.activation, weight_sign=task.weight_sign)
    after = None
    if task.mirrored:
        resplit_passthrough(model)
        after = resplit_passthrough
    cfg = dataclasses.replace(task.cfg, seed=task.seed)
    try:
        trained, rep = train(model, (task.train_inputs, task.train_targets), cfg,
                             after_step=after, input_transform=transform,
                             record_timing=task.record_timing)
    except TrainingDiverged as exc:
        rep = exc.report
        return RunResult(task.network, task.label, task.seed, "diverged", rep.loss_history,
                         rep.wall_ms, rep.negative_weight_events, n_params=model.n_parameters())
    mape = evaluate_mape(trained, task.test, input_transform=transform)
    try:
        dev = evaluate_mape(trained, task.test, basis="deviation", input_transform=transform).mean
    except ValueError:
        dev = float("nan")
    X = task.test.inputs if transform is None else transform(task.test.inputs)
    y_hat, _ = forward(trained, X)
    mismatch = np.abs((1.0 - y_hat) - task.test.voltages).mean(axis=0)
    return RunResult(
        task.network, task.label, task.seed, "ok", rep.loss_history, rep.wall_ms,
        rep.negative_weight_events, rep.final_loss, rep.final_sse, mape.mean, mape.max, dev,
        mape.per_bus, mismatch, rep.wall_time if task.record_timing else float("nan"),
        trained.n_parameters(), is_convex_admissible(trained),
    )


def run_tasks(tasks: list[RunTask], workers: int) -> list[RunResult]:
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(run_one, tasks))
    return [run_one(t) for t in tasks]


# ---------------------------------------------------------------------------
# tables


@dataclass
class TableRow:
    network: str
    label: str
    hidden_dims: list[int]
    n_params: int
    n_runs: int
    n_diverged: int
    mean_final_loss: float
    std_final_loss: float
    mean_final_sse: float
    mean_mape: float
    std_mape: float
    max_mape: float  # max over buses of the seed-averaged per-bus MAPE
    mean_wall_time: float
    std_wall_time: float
    mean_iter_ms: float
    std_iter_ms: float
    mean_iterations: float


@dataclass
class ComparisonTable:
    rows: list[TableRow]

    def row(self, label: str, network: Optional[str] = None) -> TableRow:
        for r in self.rows:
            if r.label == label and (network is None or r.network == network):
                return r
        raise KeyError(label)


def _stats(values) -> tuple[float, float]:
    a = np.asarray(values, dtype=float)
    if a.size == 0:
        return float("nan"), float("nan")
    return float(a.mean()), float(a.std())


def aggregate(results: list[RunResult], dims: dict) -> ComparisonTable:
    rows = []
    keys = list(dict.fromkeys((r.network, r.label) for r in results))
    for network, label in keys:
        group = [r for r in results if (r.network, r.label) == (network, label)]
        ok = [r for r in group if r.status == "ok"]
        for r in group:
            if r.status != "ok":
                log.warning("%s/%s seed %d diverged; excluded from statistics", network, label, r.seed)
        per_bus = np.mean([r.per_bus_mape for r in ok], axis=0) if ok else np.array([np.nan])
        rows.append(TableRow(
            network, label, list(dims[(network, label)]),
            ok[0].n_params if ok else group[0].n_params, len(ok), len(group) - len(ok),
            *_stats([r.final_loss for r in ok]), _stats([r.final_sse for r in ok])[0],
            *_stats([r.mape_mean for r in ok]), float(np.max(per_bus)),
            *_stats([r.wall_time for r in ok]), *_stats([r.iter_ms for r in ok]),
            _stats([r.iterations for r in ok])[0],
        ))
    return ComparisonTable(rows)


def _fmt(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + " ".join(str(v) for v in value) + "]"
    return str(value)


def write_table(table: ComparisonTable, path: Path) -> None:
    names = [f.name for f in dataclasses.fields(TableRow)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in table.rows:
            w.writerow([_fmt(getattr(row, n)) for n in names])


def read_runs(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_runs(results: list[RunResult], hashes: dict, path: Path) -> None:
    """Seed ledger and per-run scalars; every table cell derives from this file."""
    cols = ["network", "label", "seed", "dataset_hash", "status", "iterations", "final_loss",
            "final_sse", "mape_mean", "mape_max", "mape_dev_mean", "wall_time", "iter_ms",
            "n_params", "convex", "per_bus_mape"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in results:
            w.writerow([
                r.network, r.label, r.seed, hashes[r.network], r.status, r.iterations,
                _fmt(r.final_loss), _fmt(r.final_sse), _fmt(r.mape_mean), _fmt(r.mape_max),
                _fmt(r.mape_dev_mean), _fmt(r.wall_time),
                _fmt(r.iter_ms if not math.isnan(r.wall_time) else float("nan")),
                r.n_params, int(r.convex),
                "" if r.per_bus_mape is None else " ".join(repr(float(v)) for v in r.per_bus_mape),
            ])


def write_train_report(loss, wall_ms, events, path, record_timing: bool = True) -> None:
    """Per-iteration CSV: iteration, loss, wall_ms, negative_weight_events."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss", "wall_ms", "negative_weight_events"])
        for i, (l_, t, e) in enumerate(zip(loss, wall_ms, events), 1):
            w.writerow([i, repr(float(l_)), repr(float(t)) if record_timing else "", e])


def emit_loglog_curves(histories: dict[str, list[Sequence[float]]], path) -> int:
    """Mean and std of the loss across runs, per label, one row per iteration.

    All runs are truncated to the shortest history. Values are linear; use
    log axes when plotting. Returns the number of rows written.
    """
    if not histories or not any(histories.values()):
        raise ValueError("no loss histories to write")
    length = min(len(h) for runs in histories.values() for h in runs)
    cols, data = ["iteration"], []
    for label, runs in histories.items():
        arr = np.array([np.asarray(h[:length], dtype=float) for h in runs])
        cols += [f"{label}_mean", f"{label}_std"]
        data += [arr.mean(axis=0), arr.std(axis=0)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(length):
            w.writerow([i + 1] + [repr(float(c[i])) for c in data])
    return length


def _write_run_curves(results: list[RunResult], out: Path, record_timing: bool) -> None:
    for r in results:
        d = out / "runs" / r.network / r.label
        d.mkdir(parents=True, exist_ok=True)
        write_train_report(r.loss_history, r.wall_ms, r.negative_weight_events,
                           d / f"seed_{r.seed}.csv", record_timing)


def _summary_lines(table: ComparisonTable, timing: bool) -> list[str]:
    out = []
    for r in table.rows:
        t = (f"  time {r.mean_wall_time:.2f}s  per-iter {r.mean_iter_ms:.4f}ms" if timing else "")
        out.append(
            f"{r.network:10s} {r.label:26s} size {str(r.hidden_dims):14s} params {r.n_params:6d}"
            f"  loss {r.mean_final_loss:.4e} +- {r.std_final_loss:.2e}"
            f"  MAPE {r.mean_mape:.4f}% (max bus {r.max_mape:.4f}%)"
            f"  runs {r.n_runs}/{r.n_runs + r.n_diverged}{t}"
        )
    return out


# ---------------------------------------------------------------------------
# studies


@dataclass
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass
class StudyResult:
    table: ComparisonTable
    results: list[RunResult]
    checks: list[Check]
    out_dir: Path


def variant_dims(spec: ExperimentSpec, in_dim: int, out_dim: int) -> dict[str, list[int]]:
    eq = spec.equal_params_dims or match_param_count(in_dim, spec.hidden_dims, out_dim)
    return {"basic": list(spec.hidden_dims), "dup_trick_equal_params": list(eq),
            "dup_trick_equal_neurons": list(spec.hidden_dims)}


def duplication_checks(table: ComparisonTable, timing: bool) -> list[Check]:
    checks = []
    rows = {r.label: r for r in table.rows}
    basic = rows.get("basic")
    eqp = rows.get("dup_trick_equal_params")
    eqn = rows.get("dup_trick_equal_neurons")
    if basic and eqp:
        std = max(basic.std_final_loss, eqp.std_final_loss)
        margin = basic.mean_final_loss - eqp.mean_final_loss
        checks.append(Check(
            "equal-params trick not better than basic by more than one std",
            margin <= std,
            f"basic {basic.mean_final_loss:.4e}, trick {eqp.mean_final_loss:.4e}, "
            f"advantage {margin:.3e} vs std {std:.3e}"))
    if basic and eqn:
        checks.append(Check(
            "equal-neurons trick reaches lower mean final loss than basic",
            eqn.mean_final_loss < basic.mean_final_loss,
            f"trick {eqn.mean_final_loss:.4e} vs basic {basic.mean_final_loss:.4e}"))
        if timing:
            ratio = eqn.mean_iter_ms / basic.mean_iter_ms
            checks.append(Check(
                "equal-neurons trick costs >= 10% more time per iteration",
                ratio >= 1.10, f"ratio {ratio:.3f}"))
    return checks


def run_duplication_study(spec: ExperimentSpec) -> StudyResult:
    """Basic ICNN against mirrored-input variants at equal parameters and equal widths."""
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    network = spec.networks[0]
    net = _spec_network(network)
    ds, train_set, test_set = _make_data(spec, net)
    dims = variant_dims(spec, train_set.inputs.shape[1], train_set.targets.shape[1])
    act = Activation.parse(spec.activation)
    tasks = [
        RunTask(net.name, v, seed, train_set.inputs, train_set.targets, test_set, dims[v],
                spec.train, act, mirrored=v != "basic", record_timing=spec.record_timing)
        # seed-major order spreads machine-load drift evenly over the variants
        for seed in spec.seeds for v in spec.variants
    ]
    results = run_tasks(tasks, spec.n_workers())
    results.sort(key=lambda r: (spec.variants.index(r.label), r.seed))
    table = aggregate(results, {(net.name, v): dims[v] for v in spec.variants})
    checks = duplication_checks(table, spec.record_timing)
    _write_outputs(spec, out, results, table, checks, {net.name: dataset_hash(ds)},
                   {net.name: {v: [r.loss_history for r in results if r.label == v and r.status == "ok"]
                               for v in spec.variants}})
    return StudyResult(table, results, checks, out)


def strategy_checks(table: ComparisonTable) -> list[Check]:
    checks = []
    for network in dict.fromkeys(r.network for r in table.rows):
        try:
            post = table.row("post_check", network)
            smooth = table.row("smooth_gate", network)
        except KeyError:
            continue
        checks.append(Check(
            f"{network}: smooth_gate mean MAPE below post_check",
            smooth.mean_mape < post.mean_mape,
            f"smooth {smooth.mean_mape:.4f}% vs post-check {post.mean_mape:.4f}%"))
        checks.append(Check(
            f"{network}: smooth_gate final-loss std no larger than post_check",
            smooth.std_final_loss <= post.std_final_loss,
            f"smooth {smooth.std_final_loss:.3e} vs post-check {post.std_final_loss:.3e}"))
    return checks


def run_strategy_study(spec: ExperimentSpec) -> StudyResult:
    """Post-check, clamp-gate and smooth-gate training on the same data and initialisations."""
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    act = Activation.parse(spec.activation)
    tasks, hashes, dims = [], {}, {}
    for name in spec.networks:
        net = _spec_network(name)
        ds, train_set, test_set = _make_data(spec, net)
        hashes[net.name] = dataset_hash(ds)
        for s in spec.strategies:
            dims[(net.name, TrainStrategy.parse(s).kind)] = spec.hidden_dims
        for seed in spec.seeds:
            for s in spec.strategies:
                strategy = TrainStrategy.parse(s, spec.train.strategy.slope)
                cfg = dataclasses.replace(spec.train, strategy=strategy)
                tasks.append(RunTask(net.name, strategy.kind, seed, train_set.inputs,
                                     train_set.targets, test_set, spec.hidden_dims, cfg, act,
                                     record_timing=spec.record_timing))
    results = run_tasks(tasks, spec.n_workers())
    order = [TrainStrategy.parse(s).kind for s in spec.strategies]
    nets = list(hashes)
    results.sort(key=lambda r: (nets.index(r.network), order.index(r.label), r.seed))
    table = aggregate(results, dims)
    checks = strategy_checks(table)
    curves = {n: {k: [r.loss_history for r in results
                      if r.network == n and r.label == k and r.status == "ok"] for k in order}
              for n in nets}
    _write_outputs(spec, out, results, table, checks, hashes, curves)
    _write_mismatch(results, out / "mismatch.csv")
    return StudyResult(table, results, checks, out)


def _write_mismatch(results: list[RunResult], path: Path) -> None:
    """Seed-averaged |V_hat - V| per bus (non-slack buses numbered from 1)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["network", "strategy", "bus", "mean_abs_mismatch", "mean_mape"])
        keys = list(dict.fromkeys((r.network, r.label) for r in results))
        for network, label in keys:
            ok = [r for r in results if (r.network, r.label) == (network, label) and r.status == "ok"]
            if not ok:
                continue
            mm = np.mean([r.per_bus_mismatch for r in ok], axis=0)
            mp = np.mean([r.per_bus_mape for r in ok], axis=0)
            for bus, (a, b) in enumerate(zip(mm, mp), 1):
                w.writerow([network, label, bus, repr(float(a)), repr(float(b))])


def _write_outputs(spec, out: Path, results, table, checks, hashes, curves) -> None:
    write_runs(results, hashes, out / "runs.csv")
    write_table(table, out / "table.csv")
    _write_run_curves(results, out, spec.record_timing)
    for network, by_label in curves.items():
        usable = {k: v for k, v in by_label.items() if v}
        if usable:
            emit_loglog_curves(usable, out / f"curves_{network}.csv")
    lines = _summary_lines(table, spec.record_timing) + [""] + [c.line() for c in checks]
    (out / "summary.txt").write_text("\n".join(lines) + "\n")
    (out / "spec.json").write_text(json.dumps(spec.to_dict(), indent=1, sort_keys=True,
                                              default=str) + "\n")


# ---------------------------------------------------------------------------
# regulation demo


@dataclass
class ScenarioOutcome:
    index: int
    predicted_q0: float
    predicted_star: float
    true_q0: float
    true_star: float
    iterations: int
    converged: bool


@dataclass
class EndToEndReport:
    outcomes: list[ScenarioOutcome]
    checks: list[Check]

    @property
    def improved_fraction(self) -> float:
        if not self.outcomes:
            return float("nan")
        return float(np.mean([o.true_star <= o.true_q0 for o in self.outcomes]))


def true_objective(net: RadialNetwork, p, q, a, v_ref: float = 1.0) -> float:
    sol = solve_distflow(net, p, q)
    V = voltage_magnitudes(sol)[1:]
    return float(np.asarray(a) @ np.abs(V - v_ref))


def end_to_end(spec: ExperimentSpec, model: Optional[IcnnModel] = None) -> EndToEndReport:
    """Train (or load) a smooth-gate model, then regulate held-out scenarios.

    Each scenario keeps its sampled ``p``; ``q`` may move within
    ``[(1 - margin) q_obs, (1 + margin) q_obs]`` so the start point is the
    observed ``q``. Predicted and true (DistFlow) objectives are reported at
    the start point and at the optimum.
    """
    from .icnn import load_model

    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    net = _spec_network(spec.networks[0])
    _, train_set, test_set = _make_data(spec, net)
    v_ref = spec.dataset.v_ref
    if model is None and spec.model_path:
        model = load_model(spec.model_path)
    if model is None:
        cfg = dataclasses.replace(spec.train, strategy=TrainStrategy("smooth_gate", spec.train.strategy.slope),
                                  seed=spec.first_seed)
        init = init_model(train_set.inputs.shape[1], spec.hidden_dims, train_set.targets.shape[1],
                          seed=spec.first_seed, activation=Activation.parse(spec.activation))
        model, _ = train(init, train_set, cfg, record_timing=False)
    a = np.ones(model.out_dim)
    outcomes = []
    for idx in range(min(spec.n_scenarios, len(test_set))):
        s = test_set.samples[idx]
        lo = s.q * (1 - spec.q_margin)
        hi = s.q * (1 + spec.q_margin)
        problem = RegulationProblem(model, s.p, np.minimum(lo, hi), np.maximum(lo, hi), a, v_ref)
        res = solve(problem)
        q0 = problem.midpoint
        outcomes.append(ScenarioOutcome(
            idx, float(objective_batch(problem, q0)[0]), res.objective,
            true_objective(net, s.p, q0, a, v_ref), true_objective(net, s.p, res.q_star, a, v_ref),
            res.iterations, res.converged))
    report = EndToEndReport(outcomes, [])
    report.checks = [
        Check("predicted objective at q* <= at q0",
              all(o.predicted_star <= o.predicted_q0 + 1e-12 for o in outcomes),
              f"{len(outcomes)} scenarios"),
        Check("true objective improves in >= 80% of scenarios",
              report.improved_fraction >= 0.8, f"improved fraction {report.improved_fraction:.3f}"),
    ]
    with open(out / "end_to_end.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "predicted_q0", "predicted_star", "true_q0", "true_star",
                    "iterations", "converged"])
        for o in outcomes:
            w.writerow([o.index, repr(o.predicted_q0), repr(o.predicted_star), repr(o.true_q0),
                        repr(o.true_star), o.iterations, int(o.converged)])
    (out / "end_to_end_summary.txt").write_text("\n".join(c.line() for c in report.checks) + "\n")
    return report
