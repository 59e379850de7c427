import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from convexvolt import fixtures
from convexvolt.grid import (
    Bus, CycleError, Line, NetworkError, NetworkFormatError, PowerFlowDivergence,
    RadialNetwork, load_network, save_network, solve_distflow, verify_solution,
    voltage_magnitudes,
)

from oracles import newton_distflow, two_bus_closed_form

TWO_BUS = """\
convexvolt-network 1
buses 2
slack_voltage_sq 1.0
bus 0 - 0 0
bus 1 0 0.1 0.05
line 0 1 0.01 0.02
"""


def chain(parents, r, x, loads_p, loads_q, v0=1.0):
    buses = [Bus(0, None)] + [Bus(j, parents[j], loads_p[j], loads_q[j])
                              for j in range(1, len(parents))]
    lines = [Line(parents[j], j, r[j], x[j]) for j in range(1, len(parents))]
    return RadialNetwork(buses, lines, v0)


class TestLoadNetwork:
    def test_two_bus(self, write):
        net = load_network(write("two.txt", TWO_BUS))
        assert net.n_buses == 2
        assert len(net.lines) == 1
        assert net.buses[0].parent is None and net.buses[0].id == 0
        assert net.lines[0] == Line(0, 1, 0.01, 0.02)

    def test_cycle_rejected(self, write):
        text = TWO_BUS.replace("buses 2", "buses 3") + "bus 2 1 0.1 0.0\nline 1 2 0.01 0.01\nline 2 0 0.01 0.01\n"
        with pytest.raises(CycleError):
            load_network(write("cyc.txt", text))

    def test_parent_loop_rejected(self, write):
        text = """\
buses 3
bus 0 - 0 0
bus 1 2 0 0
bus 2 1 0 0
line 2 1 0.01 0.01
line 1 2 0.01 0.01
"""
        with pytest.raises(CycleError):
            load_network(write("loop.txt", text))

    @pytest.mark.parametrize("bad, err", [
        ("bus 1 - 0.1 0.05", NetworkError),  # two slack buses
        ("bus 0 0.1 0.05", NetworkFormatError),  # missing field
        ("bus 1 0 abc 0.05", NetworkFormatError),
    ])
    def test_malformed(self, write, bad, err):
        with pytest.raises(err):
            load_network(write("bad.txt", TWO_BUS.replace("bus 1 0 0.1 0.05", bad)))

    def test_duplicate_ids(self, write):
        text = TWO_BUS.replace("buses 2", "buses 3") + "bus 1 0 0.2 0.1\n"
        with pytest.raises(NetworkError, match="duplicate"):
            load_network(write("dup.txt", text))

    def test_no_slack(self, write):
        with pytest.raises(NetworkError, match="slack"):
            load_network(write("ns.txt", TWO_BUS.replace("bus 0 - 0 0", "bus 0 1 0 0")))

    def test_bus_count_header_checked(self, write):
        with pytest.raises(NetworkFormatError):
            load_network(write("n.txt", TWO_BUS.replace("buses 2", "buses 5")))

    def test_negative_impedance(self, write):
        with pytest.raises(NetworkError):
            load_network(write("neg.txt", TWO_BUS.replace("0.01 0.02", "-0.01 0.02")))

    def test_ten_bus_fixture(self, feeder10):
        assert feeder10.n_buses == 10
        assert len(feeder10.lines) == 9

    @pytest.mark.parametrize("name", fixtures.FEEDERS)
    @pytest.mark.parametrize("fmt", ["text", "json"])
    def test_round_trip(self, tmp_path, name, fmt):
        net = load_network(fixtures.path(name))
        out = tmp_path / f"net.{'json' if fmt == 'json' else 'txt'}"
        save_network(net, out)
        back = load_network(out)
        assert back.buses == net.buses and back.lines == net.lines
        assert back.slack_voltage_sq == net.slack_voltage_sq


class TestSolveDistflow:
    def test_no_load(self, feeder10):
        m = feeder10.n_loads
        sol = solve_distflow(feeder10, np.zeros(m), np.zeros(m))
        assert sol.converged
        np.testing.assert_array_equal(sol.v, feeder10.slack_voltage_sq)
        assert not sol.flow_p.any() and not sol.flow_q.any() and not sol.l.any()

    def test_two_bus_matches_newton(self, write):
        net = load_network(write("two.txt", TWO_BUS))
        sol = solve_distflow(net, [0.1], [0.05])
        v1, P, Q, l_ = two_bus_closed_form(0.01, 0.02, 0.1, 0.05)
        assert sol.converged
        assert abs(sol.v[1] - v1) < 1e-8
        assert abs(sol.flow_p[0] - P) < 1e-8 and abs(sol.l[0] - l_) < 1e-8

    def test_three_bus_matches_newton(self):
        parents = [None, 0, 1]
        r, x = [0, 0.02, 0.03], [0, 0.015, 0.04]
        p, q = [0, 0.4, 0.3], [0, 0.2, 0.1]
        net = chain(parents, r, x, p, q)
        sol = solve_distflow(net, p[1:], q[1:])
        v, P, Q, l_ = newton_distflow(parents, r, x, p, q)
        np.testing.assert_allclose(sol.v, v, atol=1e-8, rtol=0)
        np.testing.assert_allclose(sol.flow_p, P[1:], atol=1e-8, rtol=0)

    @pytest.mark.parametrize("name", fixtures.FEEDERS)
    def test_fixture_residuals(self, name):
        net = load_network(fixtures.path(name))
        sol = solve_distflow(net, net.base_p, net.base_q)
        rep = verify_solution(net, net.base_p, net.base_q, sol)
        assert sol.converged
        assert rep.max_residual < 1e-8
        assert np.all(np.abs(rep.relaxation_slack) < 1e-8)

    def test_conservation(self, feeder33):
        sol = solve_distflow(feeder33, feeder33.base_p, feeder33.base_q)
        frm, _, r, x = feeder33.line_arrays()
        head = frm == 0
        assert abs(sol.flow_p[head].sum() - feeder33.base_p.sum() - (r * sol.l).sum()) < 1e-8
        assert abs(sol.flow_q[head].sum() - feeder33.base_q.sum() - (x * sol.l).sum()) < 1e-8

    @pytest.mark.parametrize("name", fixtures.FEEDERS)
    def test_monotone_loading(self, name):
        net = load_network(fixtures.path(name))
        vs = [solve_distflow(net, s * net.base_p, s * net.base_q).v for s in (1.0, 1.2, 1.5)]
        assert np.all(np.diff(np.stack(vs), axis=0) <= 0)

    def test_nonconvergence_flagged(self, feeder10):
        sol = solve_distflow(feeder10, feeder10.base_p, feeder10.base_q, max_iter=2)
        assert not sol.converged and sol.iterations == 2

    def test_divergence_raises(self, feeder10):
        with pytest.raises(PowerFlowDivergence):
            solve_distflow(feeder10, 200 * feeder10.base_p, 200 * feeder10.base_q)

    def test_shape_check(self, feeder10):
        with pytest.raises(ValueError):
            solve_distflow(feeder10, np.zeros(3), np.zeros(3))

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.floats(0.001, 0.05), st.floats(0.001, 0.05),
                              st.floats(0.0, 0.5), st.floats(0.0, 0.3)), min_size=1, max_size=2),
           st.floats(0.9, 1.1))
    def test_oracle_equivalence_small(self, specs, v0):
        parents = [None] + list(range(len(specs)))
        r = [0.0] + [s[0] for s in specs]
        x = [0.0] + [s[1] for s in specs]
        p = [0.0] + [s[2] for s in specs]
        q = [0.0] + [s[3] for s in specs]
        net = chain(parents, r, x, p, q, v0=v0 * v0)
        sol = solve_distflow(net, p[1:], q[1:])
        v, *_ = newton_distflow(parents, r, x, p, q, v0=v0 * v0)
        assert sol.converged
        np.testing.assert_allclose(sol.v, v, atol=1e-8, rtol=0)
        assert verify_solution(net, p[1:], q[1:], sol).max_residual < 1e-8


class TestVerifySolution:
    def test_zero_injection_exact(self, feeder10):
        m = feeder10.n_loads
        sol = solve_distflow(feeder10, np.zeros(m), np.zeros(m))
        rep = verify_solution(feeder10, np.zeros(m), np.zeros(m), sol)
        assert rep.max_residual == 0.0
        assert not rep.relaxation_slack.any()

    def test_corrupted_voltage_detected(self, feeder10):
        sol = solve_distflow(feeder10, feeder10.base_p, feeder10.base_q)
        bad = dataclasses.replace(sol, v=sol.v.copy())
        leaf = 7  # bus 7 feeds nothing, so only its incoming line equation moves
        bad.v[leaf] += 0.1
        rep = verify_solution(feeder10, feeder10.base_p, feeder10.base_q, bad)
        assert rep.voltage == pytest.approx(0.1, abs=1e-8)
        assert rep.voltage > 1e-3

    def test_dimension_mismatch(self, feeder10, feeder4):
        sol = solve_distflow(feeder4, feeder4.base_p, feeder4.base_q)
        with pytest.raises(ValueError):
            verify_solution(feeder10, feeder10.base_p, feeder10.base_q, sol)


class TestVoltageMagnitudes:
    @pytest.mark.parametrize("v, expected", [(1.0, 1.0), (1.0201, 1.01), (0.9604, 0.98)])
    def test_perfect_squares(self, v, expected):
        assert voltage_magnitudes(np.array([v]))[0] == pytest.approx(expected, abs=1e-15)

    def test_negative(self):
        with pytest.raises(ValueError):
            voltage_magnitudes(np.array([-0.1]))
