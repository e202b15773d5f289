import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tclgrid.errors import ConfigError
from tclgrid.tcl import (TclParams, TclPopulation, TclRanges, TclState, advance_temperature, apportion,
                         duty_cycle_estimate, load_population, nodal_tcl_power, sample_population,
                         save_population, step_population)


def device(theta, mode, node=1, setpoint=22.0, width=2.0, ambient=30.0, r=2.0, c=2.0, p_tr=-16.0, cop=2.5):
    return TclParams(ambient, r, c, p_tr, cop, setpoint, width, 0.2, node), TclState(theta, mode)


def fleet(devices, node_count=3):
    params, states = zip(*devices)
    return TclPopulation.from_devices(list(params), list(states), node_count)


# -- examples ---------------------------------------------------------------


def test_thermal_update_hand_value():
    # R*C chosen so a = exp(-dt/RC) = 1/2 with dt = 60 s; R*p_tr = -20
    rc_hours = (60 / 3600) / math.log(2)
    pop = fleet([device(22.0, 1, r=2.0, c=rc_hours / 2.0, p_tr=-10.0)])
    assert pop.a_th[0] == pytest.approx(0.5, abs=1e-15)
    advance_temperature(pop)
    assert pop.temperature[0] == pytest.approx(0.5 * 22 + 0.5 * (30 - 20), abs=1e-12)


def test_zero_command_leaves_in_band_devices_alone():
    pop = fleet([device(21.5 + 0.1 * i, i % 2) for i in range(10)])
    before = pop.mode.copy()
    counts = step_population(pop, 0.0, np.random.default_rng(1))
    assert np.array_equal(pop.mode, before)
    assert counts.switched_on_command.sum() == counts.switched_off_command.sum() == 0


def test_full_on_command_switches_every_off_device():
    # a slow thermal constant keeps everything inside the band for one step
    pop = fleet([device(22.0, 0, node=1 + i % 3, c=200.0) for i in range(12)])
    counts = step_population(pop, 1.0, np.random.default_rng(0))
    assert pop.mode.all()
    assert np.array_equal(counts.switched_on_command, counts.off_before)


def test_full_off_command_switches_every_on_device():
    pop = fleet([device(22.0, 1, node=1 + i % 3, c=200.0) for i in range(12)])
    counts = step_population(pop, -1.0, np.random.default_rng(0))
    assert not pop.mode.any()
    assert np.array_equal(counts.switched_off_command, counts.on_before)


def test_thermostat_overrides_command():
    hot = device(23.5, 0, c=200.0)   # above the band while OFF
    cold = device(20.5, 1, c=200.0)  # below the band while ON
    pop = fleet([hot, cold])
    counts = step_population(pop, 0.0, np.random.default_rng(0))
    assert list(pop.mode) == [1, 0]
    assert counts.switched_on_internal.sum() == 1 and counts.switched_off_internal.sum() == 1


def test_command_out_of_range_rejected():
    pop = fleet([device(22.0, 0)])
    with pytest.raises(ValueError):
        step_population(pop, 1.5, np.random.default_rng(0))


def test_empty_population_rejected():
    with pytest.raises(ConfigError):
        sample_population(0, [1.0, 1.0])


def test_invalid_params_rejected():
    with pytest.raises(ConfigError):
        TclParams(30, 2, 2, 16.0, 2.5, 22, 2, 0.2, 1)  # heating transfer rate
    with pytest.raises(ConfigError):
        TclRanges(cop=(3.0, 2.0))


def test_default_sample_within_ranges():
    ranges = TclRanges()
    pop = sample_population(1000, np.ones(8), ranges, np.random.default_rng(3))
    for name in ("ambient_temp", "thermal_capacitance", "thermal_resistance", "transfer_rate", "cop",
                 "setpoint", "deadband_width"):
        lo, hi = getattr(ranges, name)
        values = getattr(pop, name)
        assert values.min() >= lo and values.max() <= hi
    assert np.all((pop.a_th > 0) & (pop.a_th < 1))
    assert np.all((pop.temperature >= pop.lower) & (pop.temperature <= pop.upper))
    assert pop.node_counts.sum() == 1000 and np.all(pop.node_counts == 125)


def test_degenerate_ranges_give_homogeneous_fleet():
    ranges = TclRanges(**{name: (v, v) for name, v in [
        ("ambient_temp", 30.0), ("thermal_capacitance", 2.0), ("thermal_resistance", 2.0),
        ("transfer_rate", -16.0), ("cop", 2.5), ("setpoint", 22.0), ("deadband_width", 2.0),
        ("power_factor", 0.97)]})
    pop = sample_population(50, [1.0], ranges, np.random.default_rng(0))
    assert np.all(pop.rated_real == 16.0 / 2.5)
    assert np.ptp(pop.a_th) == 0.0
    assert pop.aggregate_power == pytest.approx(50 * 6.4 * pop.mode.mean())


def test_nodal_power_examples():
    pop = fleet([device(22.0, 0, node=3) for _ in range(10)])
    assert np.all(nodal_tcl_power(pop).real_power == 0)
    pop.mode[:] = 1
    inj = nodal_tcl_power(pop)
    assert inj.real_power[2] == pytest.approx(10 * 16.0 / 2.5, abs=1e-12)
    assert inj.real_power[:2].sum() == 0
    assert inj.reactive_power == pytest.approx(0.2 * inj.real_power)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_nodal_power_close_to_average_times_on_count(seed):
    pop = sample_population(300, [1, 2, 3, 0.5], rng=np.random.default_rng(seed))
    inj = nodal_tcl_power(pop)
    for j in range(1, 5):
        at = pop.node == j
        spread = np.abs(pop.rated_real[at] - pop.avg_real[j - 1]).max()
        gap = abs(inj.real_power[j - 1] - pop.avg_real[j - 1] * pop.on_counts[j - 1])
        assert gap <= spread * pop.on_counts[j - 1] + 1e-9


def test_apportion_largest_remainder():
    assert list(apportion(10, [1, 1, 1])) == [4, 3, 3]
    assert apportion(797, np.arange(1, 9)).sum() == 797
    with pytest.raises(ConfigError):
        apportion(5, [0, 0])


def test_duty_cycle_matches_simulated_fraction():
    pop = fleet([device(22.0, 0, c=0.5)], node_count=1)
    rng = np.random.default_rng(0)
    on = 0
    steps = 20000
    for _ in range(steps):
        step_population(pop, 0.0, rng)
        on += int(pop.mode[0])
    arrays = {k: getattr(pop, k) for k in ("ambient_temp", "setpoint", "deadband_width", "thermal_resistance",
                                          "transfer_rate")}
    # discrete stepping overshoots the band slightly, so compare loosely
    assert on / steps == pytest.approx(duty_cycle_estimate(arrays)[0], abs=0.03)


def test_population_round_trip(tmp_path):
    pop = sample_population(20, [1, 1], rng=np.random.default_rng(2))
    save_population(pop, tmp_path / "p.json")
    back = load_population(tmp_path / "p.json")
    for name in ("temperature", "mode", "node", "cop", "reactive_ratio"):
        assert np.array_equal(getattr(back, name), getattr(pop, name))


# -- properties ---------------------------------------------------------------------


def test_temperature_contained_without_command():
    pop = sample_population(200, [1, 1], rng=np.random.default_rng(7))
    rng = np.random.default_rng(8)
    theta_on = pop.ambient_temp + pop.thermal_resistance * pop.transfer_rate
    delta = (1 - pop.a_th) * np.abs(theta_on - pop.upper)
    for _ in range(10_000):
        step_population(pop, 0.0, rng)
        assert np.all(pop.temperature >= pop.lower - delta)
        assert np.all(pop.temperature <= pop.upper + delta)


def test_temperature_contained_under_varying_command():
    pop = sample_population(200, [1, 1], rng=np.random.default_rng(7))
    rng = np.random.default_rng(8)
    theta_on = pop.ambient_temp + pop.thermal_resistance * pop.transfer_rate
    # one step of drift beyond an edge toward the farther of the two asymptotes
    delta = (1 - pop.a_th) * np.maximum(np.abs(theta_on - pop.lower), np.abs(pop.ambient_temp - pop.upper))
    for k in range(10_000):
        step_population(pop, float(np.sin(k / 50.0)), rng)
        assert np.all(pop.temperature >= pop.lower - delta - 1e-12)
        assert np.all(pop.temperature <= pop.upper + delta + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.integers(0, 2**32 - 1))
def test_count_identity_is_exact(u, seed):
    pop = sample_population(60, [1, 2, 1], rng=np.random.default_rng(seed))
    counts = step_population(pop, u, np.random.default_rng(seed + 1))
    assert np.array_equal(counts.on_after, pop.on_counts)
    assert np.array_equal(counts.on_before + counts.off_before, pop.node_counts)
    assert counts.aggregate_power == pytest.approx(pop.aggregate_power)
    if u >= 0:
        assert counts.switched_off_command.sum() == 0
    if u <= 0:
        assert counts.switched_on_command.sum() == 0


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.95), st.integers(0, 2**32 - 1))
def test_commanded_fraction_matches_probability(u, seed):
    # 2000 in-band OFF devices; a slow thermal constant keeps them in the band
    n = 2000
    pop = fleet([device(22.0, 0, c=500.0)] * n, node_count=1)
    counts = step_population(pop, u, np.random.default_rng(seed))
    se = math.sqrt(u * (1 - u) / n)
    assert abs(counts.switched_on_command[0] / n - u) <= 4 * se


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.integers(0, 2**32 - 1))
def test_reactive_ratio_is_exact(count, seed):
    pop = sample_population(count, [1.0], rng=np.random.default_rng(seed))
    assert np.array_equal(pop.rated_reactive, pop.reactive_ratio * pop.rated_real)
