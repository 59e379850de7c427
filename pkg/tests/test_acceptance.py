"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are
repeated in the "acceptance criteria" section of the terminal summary.
"""

import dataclasses
import time
from pathlib import Path

import numpy as np
import pytest

from convexvolt import fixtures
from convexvolt.cli import main
from convexvolt.datagen import ScenarioConfig, generate_dataset, split_dataset
from convexvolt.experiments import ExperimentSpec, run_duplication_study, run_strategy_study
from convexvolt.grid import load_network, solve_distflow, verify_solution
from convexvolt.icnn import (
    Activation, GateMode, IcnnModel, build_duplicated, check_convexity, forward, init_model,
    is_convex_admissible, mirror_inputs,
)
from convexvolt.regulate import RegulationProblem, solve, validate_against_grid
from convexvolt.train import TrainConfig, TrainStrategy, loss_and_gradients, train

from gradcheck import gradient_check
from oracles import newton_distflow, two_bus_closed_form

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_criterion_1_gradient_oracle(report_criterion):
    start = time.perf_counter()
    results = {k: gradient_check(TrainStrategy(k)) for k in ("post_check", "clamp_gate", "smooth_gate")}
    elapsed = time.perf_counter() - start
    passed = all(w < 1e-4 and n >= 50 for w, n in results.values()) and elapsed < 10
    detail = ", ".join(f"{k} worst {w:.2e} over {n}" for k, (w, n) in results.items())
    report_criterion(1, "gradient oracle", passed, f"{detail}; {elapsed:.1f}s")
    assert passed


def test_criterion_2_convexity_suite(report_criterion):
    start = time.perf_counter()
    worst, n_models = -np.inf, 0
    for act in ("relu", "leaky_relu:0.05", "elu:1"):
        for gate in (GateMode.smooth(), GateMode.hard_clamp()):
            for seed in range(3):
                m = init_model(6, [16, 16], 3, seed=seed, activation=Activation.parse(act), gate=gate)
                assert is_convex_admissible(m)
                rep = check_convexity(m, seed=seed, n_pairs=200, n_lambdas=9, tol=1e-9)
                worst = max(worst, rep.worst_violation)
                n_models += 1
    neg = IcnnModel(W=[[[-1.0]]], U=[[[1.0]], [[0.0]]], b=[[0.0], [0.0]])
    counter = check_convexity(neg, seed=0, n_pairs=200, n_lambdas=9, tol=1e-9)
    w = counter.witness
    straddles = w is not None and min(w["x"][0], w["y"][0]) < 0 < max(w["x"][0], w["y"][0])
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-9 and not counter.passed and straddles and elapsed < 5
    report_criterion(2, "convexity suite", passed,
                     f"{n_models} admissible models, worst violation {worst:.2e}; -ReLU counterexample "
                     f"violation {counter.worst_violation:.3f} at lambda {w['lam'] if w else None}; {elapsed:.2f}s")
    assert passed


def test_criterion_3_duplication_equivalence(report_criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(100):
        n = int(rng.integers(1, 20))
        dims = [int(d) for d in rng.integers(1, 33, size=int(rng.integers(1, 4)))]
        act = Activation.parse(["relu", "leaky_relu:0.1", "elu:1"][trial % 3])
        m = init_model(n, dims, int(rng.integers(1, 10)), seed=trial, activation=act,
                       gate=GateMode.smooth())
        x = rng.normal(size=n)
        y0, _ = forward(m, x)
        y1, _ = forward(build_duplicated(m), mirror_inputs(x))
        worst = max(worst, float(np.max(np.abs(y0 - y1))))
    elapsed = time.perf_counter() - start
    passed = worst <= 1e-12 and elapsed < 5
    report_criterion(3, "duplication equivalence", passed,
                     f"max |difference| {worst:.2e} over 100 (model, x); {elapsed:.2f}s")
    assert passed


@pytest.mark.slow
def test_criterion_4_duplication_study(report_criterion, tmp_path):
    spec = dataclasses.replace(ExperimentSpec.load(CONFIGS / "duplication.json"), out_dir=str(tmp_path))
    assert spec.n_seeds >= 10 and spec.networks == ["feeder10"]
    start = time.perf_counter()
    result = run_duplication_study(spec)
    elapsed = time.perf_counter() - start
    rows = {r.label: r for r in result.table.rows}
    passed = all(c.passed for c in result.checks) and len(result.checks) == 3 and elapsed < 600
    detail = "; ".join(
        f"{k} loss {r.mean_final_loss:.3e}+-{r.std_final_loss:.2e} iter {r.mean_iter_ms:.3f}ms"
        for k, r in rows.items())
    for c in result.checks:
        print(c.line())
    report_criterion(4, "duplication-study ordering", passed,
                     f"{spec.n_seeds} seeds: {detail}; "
                     + ", ".join(f"{'ok' if c.passed else 'FAILED'}: {c.name}" for c in result.checks)
                     + f"; {elapsed:.0f}s")
    assert passed


@pytest.mark.slow
def test_criterion_5_strategy_study(report_criterion, tmp_path):
    spec = dataclasses.replace(ExperimentSpec.load(CONFIGS / "strategies.json"), out_dir=str(tmp_path))
    assert spec.n_seeds == 20 and len(spec.networks) == 2
    start = time.perf_counter()
    result = run_strategy_study(spec)
    elapsed = time.perf_counter() - start
    passed = all(c.passed for c in result.checks) and len(result.checks) == 4 and elapsed < 900
    for c in result.checks:
        print(c.line())
    detail = "; ".join(c.line() for c in result.checks)
    report_criterion(5, "strategy-study ordering", passed, f"{spec.n_seeds} seeds: {detail}; {elapsed:.0f}s")
    assert passed


def test_criterion_6_vanishing_gradient(report_criterion):
    start = time.perf_counter()
    model = init_model(18, [16, 32, 16], 9, seed=0, weight_sign="negative")
    rng = np.random.default_rng(0)
    X, T = rng.uniform(0, 1, size=(32, 18)), rng.uniform(0, 0.05, size=(32, 9))
    _, g_clamp = loss_and_gradients(model, X, T, TrainStrategy("clamp_gate"))
    s = -0.01
    smooth = model.with_gate(GateMode.smooth(s))
    _, g_smooth = loss_and_gradients(smooth, X, T)
    plain = smooth.with_gate(GateMode.none())
    plain.W = smooth.effective_W()
    _, g_none = loss_and_gradients(plain, X, T)
    zero = all(np.all(gw == 0) for gw in g_clamp.W)
    nonzero = all(np.any(gw != 0) for gw in g_smooth.W)
    rel = max(float(np.max(np.abs(a - s * b)) / max(np.max(np.abs(s * b)), 1e-300))
              for a, b in zip(g_smooth.W, g_none.W))
    elapsed = time.perf_counter() - start
    passed = zero and nonzero and rel < 1e-12 and elapsed < 1
    report_criterion(6, "vanishing-gradient witness", passed,
                     f"clamp W gradients all zero: {zero}; smooth nonzero: {nonzero}; "
                     f"max rel. deviation from s x none-mode gradient {rel:.1e}; {elapsed:.2f}s")
    assert passed


def test_criterion_7_power_flow_oracle(report_criterion):
    from convexvolt.grid import Bus, Line, RadialNetwork
    start = time.perf_counter()
    net2 = RadialNetwork([Bus(0, None), Bus(1, 0, 0.1, 0.05)], [Line(0, 1, 0.01, 0.02)])
    v1 = two_bus_closed_form(0.01, 0.02, 0.1, 0.05)[0]
    err2 = abs(solve_distflow(net2, [0.1], [0.05]).v[1] - v1)
    parents, r, x = [None, 0, 1], [0, 0.02, 0.03], [0, 0.015, 0.04]
    p, q = [0, 0.4, 0.3], [0, 0.2, 0.1]
    net3 = RadialNetwork([Bus(0, None), Bus(1, 0, p[1], q[1]), Bus(2, 1, p[2], q[2])],
                         [Line(0, 1, r[1], x[1]), Line(1, 2, r[2], x[2])])
    v_ref = newton_distflow(parents, r, x, p, q)[0]
    err3 = float(np.max(np.abs(solve_distflow(net3, p[1:], q[1:]).v - v_ref)))
    resid, slack = 0.0, 0.0
    for name in fixtures.FEEDERS:
        net = load_network(fixtures.path(name))
        for scale in (0.5, 1.0, 1.5):
            sol = solve_distflow(net, scale * net.base_p, scale * net.base_q)
            assert sol.converged
            rep = verify_solution(net, scale * net.base_p, scale * net.base_q, sol)
            resid = max(resid, rep.max_residual)
            slack = max(slack, float(np.max(np.abs(rep.relaxation_slack))))
    elapsed = time.perf_counter() - start
    passed = err2 < 1e-8 and err3 < 1e-8 and resid < 1e-8 and slack < 1e-8 and elapsed < 5
    report_criterion(7, "power-flow oracle", passed,
                     f"2-bus |dv| {err2:.1e}, 3-bus |dv| {err3:.1e}, max fixture residual {resid:.1e}, "
                     f"max relaxation slack {slack:.1e}; {elapsed:.2f}s")
    assert passed


def test_criterion_8_regulation_optimality(report_criterion):
    start = time.perf_counter()
    net = load_network(fixtures.path("feeder4"))
    ds = generate_dataset(net, ScenarioConfig(n_samples=400, seed=0))
    tr, te = split_dataset(ds, 0.8, seed=0)
    init = init_model(6, [16, 16], 3, seed=0, activation=Activation("elu", 1.0))
    model, _ = train(init, tr, TrainConfig(epochs=100, learning_rate=1e-2), record_timing=False)
    gaps, feasible = [], True
    for s in te.samples[:5]:
        pr = RegulationProblem(model, s.p, -np.ones(3), np.ones(3), np.ones(3))
        res = solve(pr)
        gaps.append(validate_against_grid(pr, res, 51).gap)
        feasible &= bool(np.all(res.q_star >= pr.q_min) and np.all(res.q_star <= pr.q_max))
    elapsed = time.perf_counter() - start
    passed = max(gaps) <= 1e-6 and feasible and elapsed < 60
    report_criterion(8, "regulation optimality", passed,
                     f"feeder4, dim(q)=3, ELU model, 5 scenarios: max gap to polished 51^3 grid oracle "
                     f"{max(gaps):.1e}; feasible {feasible}; {elapsed:.1f}s")
    assert passed


def test_criterion_9_determinism(report_criterion, tmp_path, monkeypatch):
    # identical arguments in two fresh working directories; spec.json records out_dir
    start = time.perf_counter()
    cfg = ('{"networks": ["feeder10"], "dataset": {"n_samples": 200, "seed": 5}, "n_seeds": 2, '
           '"hidden_dims": [8, 8], "train": {"epochs": 5, "learning_rate": 0.01, '
           '"strategy": "post_check"}, "variants": ["basic", "dup_trick_equal_params", '
           '"dup_trick_equal_neurons"], "strategies": ["post_check", "smooth_gate"]}')
    for k in range(2):
        root = tmp_path / f"run{k}"
        root.mkdir()
        monkeypatch.chdir(root)
        Path("c.json").write_text(cfg)
        assert main(["gen-data", "--network", "feeder10", "--samples", "200", "--seed", "5",
                     "--out", "data.csv"]) == 0
        assert main(["train", "--dataset", "data.csv", "--epochs", "5", "--seed", "3",
                     "--out-model", "model.json", "--out-report", "report.csv",
                     "--no-timing"]) == 0
        assert main(["compare-duplication", "--config", "c.json", "--out-dir", "dup",
                     "--no-timing"]) == 0
        assert main(["compare-strategies", "--config", "c.json", "--out-dir", "str",
                     "--no-timing"]) == 0
    a, b = tmp_path / "run0", tmp_path / "run1"
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    same = [(a / f).read_bytes() == (b / f).read_bytes() for f in files]
    elapsed = time.perf_counter() - start
    passed = all(same) and len(files) > 20 and elapsed < 60
    report_criterion(9, "determinism", passed,
                     f"{sum(same)}/{len(files)} output files byte-identical across repeats; {elapsed:.1f}s")
    assert passed
