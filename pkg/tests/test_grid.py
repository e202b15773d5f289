import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import feeders, light_loads
from tclgrid.errors import ConfigError, DivergenceError, FeederError, InfeasibleLinearizationError, NotConvergedError
from tclgrid.grid import (DEFAULT_TOL, FeederModel, NodalInjection, VoltageSolution, distflow_batch,
                          distflow_residuals, feeder_from_dict, feeder_to_dict, generate_feeder, load_feeder,
                          min_voltage_safe, save_feeder, scale_to_min_voltage, solve_distflow, solve_lindistflow)


def line(n=1, r=0.01, x=0.01):
    return FeederModel(tuple(range(n)), np.full(n, r), np.full(n, x))


def scalar_fixed_point(p, q, r, x, v0=1.0, iters=200):
    """Hand iteration of the three branch-flow equations on a single line."""
    ell = 0.0
    for _ in range(iters):
        P = p + r * ell
        Q = q + x * ell
        v2 = v0 * v0 - 2 * (r * P + x * Q) + (r * r + x * x) * ell
        ell = (P * P + Q * Q) / (v0 * v0)
    return math.sqrt(v2)


# -- examples ---------------------------------------------------------------


def test_zero_injection_is_flat_after_one_iteration():
    f = generate_feeder(node_count=6, seed=2)
    sol = solve_distflow(f, NodalInjection.zeros(6))
    assert np.all(sol.voltage == f.substation_voltage)
    assert sol.converged and sol.iterations == 1
    lin = solve_lindistflow(f, NodalInjection.zeros(6))
    assert np.all(lin.voltage == f.substation_voltage)


def test_two_node_line_matches_hand_iteration():
    sol = solve_distflow(line(), NodalInjection([0.1], [0.05]))
    oracle = scalar_fixed_point(0.1, 0.05, 0.01, 0.01)
    assert sol.voltage[0] == pytest.approx(oracle, abs=1e-12)
    lin = solve_lindistflow(line(), NodalInjection([0.1], [0.05]))
    assert 0.99 < sol.voltage[0] < lin.voltage[0]


def test_two_node_linearized_closed_form():
    lin = solve_lindistflow(line(), NodalInjection([0.1], [0.05]))
    assert lin.voltage[0] ** 2 == pytest.approx(0.997, abs=1e-15)
    assert lin.voltage[0] == pytest.approx(0.998498873, abs=1e-9)


def test_net_generation_raises_voltage():
    sol = solve_distflow(line(), NodalInjection([-0.1], [0.0]))
    assert sol.voltage[0] > 1.0
    assert sol.voltage[0] == pytest.approx(scalar_fixed_point(-0.1, 0.0, 0.01, 0.01), abs=1e-12)


def test_three_node_chain_leaf_load():
    f = line(3, r=0.02, x=0.01)
    lin = solve_lindistflow(f, NodalInjection([0, 0, 1.0], [0, 0, 1.0]))
    # every branch carries the full leaf flow
    assert np.allclose(lin.branch_real, 1.0)
    drop = 2 * (0.02 * 1.0 + 0.01 * 1.0)
    assert lin.voltage[0] ** 2 == pytest.approx(1.0 - drop, abs=1e-15)
    assert lin.voltage[2] ** 2 == pytest.approx(1.0 - 3 * drop, abs=1e-15)


def test_safety_indicator_is_inclusive():
    def sol(v):
        v = np.asarray(v, dtype=float)
        return VoltageSolution(v, np.zeros_like(v), np.zeros_like(v), True, 1)
    assert min_voltage_safe(sol([1.0, 1.0]), 0.95)
    assert not min_voltage_safe(sol([1.0, 0.949]), 0.95)
    assert min_voltage_safe(sol([0.97, 0.95]), 0.95)
    with pytest.raises(NotConvergedError):
        min_voltage_safe(VoltageSolution(np.ones(2), np.zeros(2), np.zeros(2), False, 50), 0.95)


# -- errors --------------------------------------------------------------------


def test_structural_errors():
    with pytest.raises(FeederError):
        FeederModel((2, 1), np.ones(2) * 0.01, np.ones(2) * 0.01)  # cycle
    with pytest.raises(FeederError):
        FeederModel((0,), [0.0], [0.01])
    with pytest.raises(FeederError):
        feeder_from_dict({"nodes": 2, "branches": [{"from": 0, "to": 1, "r": 0.01, "x": 0.01},
                                                   {"from": 1, "to": 0, "r": 0.01, "x": 0.01}]})


def test_collapse_names_the_node():
    f = line(3, r=0.2, x=0.2)
    with pytest.raises(DivergenceError) as info:
        solve_distflow(f, NodalInjection([0, 0, 5.0], [0, 0, 5.0]))
    assert info.value.node in (1, 2, 3)
    with pytest.raises(InfeasibleLinearizationError):
        solve_lindistflow(f, NodalInjection([0, 0, 5.0], [0, 0, 5.0]))


def test_iteration_cap_reports_not_converged():
    f = generate_feeder(node_count=5, seed=1)
    sol = solve_distflow(f, NodalInjection(f.nominal_real, f.nominal_reactive), max_iter=1)
    assert not sol.converged


# -- properties ------------------------------------------------------------------


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_linearized_dominates_exact(data):
    f = data.draw(feeders())
    p, q = light_loads(data.draw, f.node_count)
    exact = solve_distflow(f, NodalInjection(p, q))
    lin = solve_lindistflow(f, NodalInjection(p, q))
    assert exact.converged
    assert np.all(lin.voltage >= exact.voltage - 1e-13)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_linearized_is_monotone_in_injections(data):
    f = data.draw(feeders())
    p, q = light_loads(data.draw, f.node_count, scale=0.1)
    dp, dq = light_loads(data.draw, f.node_count, scale=0.1)
    lo = solve_lindistflow(f, NodalInjection(p, q))
    hi = solve_lindistflow(f, NodalInjection(p + dp, q + dq))
    assert np.all(hi.voltage <= lo.voltage + 1e-15)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_sweep_residuals_small(data):
    f = data.draw(feeders())
    p, q = light_loads(data.draw, f.node_count)
    sol = solve_distflow(f, NodalInjection(p, q))
    assert np.max(np.abs(distflow_residuals(f, NodalInjection(p, q), sol))) < 10 * DEFAULT_TOL


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_linearized_root_flow_is_total_injection(data):
    f = data.draw(feeders())
    p, q = light_loads(data.draw, f.node_count)
    lin = solve_lindistflow(f, NodalInjection(p, q))
    roots = [j - 1 for j in f.children[0]]
    assert lin.branch_real[roots].sum() == pytest.approx(p.sum(), abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_ancestor_descendant_consistency(data):
    f = data.draw(feeders())
    for j in range(1, f.node_count + 1):
        for k in range(1, f.node_count + 1):
            assert (k in f.ancestors(j)) == (j in f.descendants(k))


def test_compiled_and_matrix_sweeps_agree():
    f = generate_feeder(node_count=10, seed=4)
    rng = np.random.default_rng(0)
    p = rng.uniform(0, 1, (200, 10)) * f.nominal_real
    q = rng.uniform(0, 1, (200, 10)) * f.nominal_reactive
    # tight tolerance so the gap measures the routes, not where each stopped
    a = distflow_batch(f, p, q, tol=1e-14, max_iter=500, method="sweep")
    b = distflow_batch(f, p, q, tol=1e-14, max_iter=500, method="matrix")
    assert np.all(a[3]) and np.all(b[3])
    assert np.max(np.abs(a[0] - b[0])) < 1e-12
    assert np.max(np.abs(a[1] - b[1])) < 1e-12


# -- files and generation -----------------------------------------------------------


def test_feeder_round_trip(tmp_path):
    f = generate_feeder("binary", 7, seed=5)
    save_feeder(f, tmp_path / "f.json")
    g = load_feeder(tmp_path / "f.json")
    assert g.parent == f.parent
    assert np.array_equal(g.resistance, f.resistance) and np.array_equal(g.nominal_real, f.nominal_real)
    assert json.loads((tmp_path / "f.json").read_text())["nodes"] == 7
    assert feeder_to_dict(g) == feeder_to_dict(f)


@pytest.mark.parametrize("shape", ["chain", "star", "binary", "branched"])
def test_generated_shapes_are_trees(shape):
    f = generate_feeder(shape, 9, seed=1)
    assert f.node_count == 9 and len(f.order) == 9
    assert generate_feeder(shape, 9, seed=1).parent == f.parent


def test_unknown_shape_is_config_error():
    with pytest.raises(ConfigError):
        generate_feeder("mesh", 4)


def test_scaling_hits_target():
    f = scale_to_min_voltage(generate_feeder(seed=3), 0.675, 0.964)
    sol = solve_distflow(f, NodalInjection(0.675 * f.nominal_real, 0.675 * f.nominal_reactive))
    assert sol.min_voltage == pytest.approx(0.964, abs=1e-7)
