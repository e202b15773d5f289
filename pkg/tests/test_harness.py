import json
import math
from dataclasses import replace

import numpy as np
import pytest

from tclgrid import harness
from tclgrid import streams as tags
from tclgrid.aggregator import ConstraintSet, FleetStatistics, build_bin_model, choose_command, estimate_w_fractions
from tclgrid.errors import ConfigError
from tclgrid.grid import NodalInjection, solve_distflow
from tclgrid.harness import (ComparisonRow, FeederSpec, PopulationSpec, ReferenceSpec, ScenarioConfig,
                             build_scenario, check_ordering, compute_metrics, render_comparison, run_scenario)
from tclgrid.streams import Streams
from tclgrid.tcl import TclRanges, step_population


@pytest.fixture(scope="module")
def stressed():
    return build_scenario(ScenarioConfig())


def test_metrics_examples():
    recs = [{"p_agg": 5.0, "p_ref": 5.0, "safe_flag": True}] * 3
    assert compute_metrics(recs)["rmse_kW"] == 0.0
    recs = [{"p_agg": 0.0, "p_ref": 0.0, "safe_flag": k != 7} for k in range(100)]
    m = compute_metrics(recs)
    assert m["empirical_safety_probability"] == 0.99 and m["violation_count"] == 1
    with pytest.raises(ValueError):
        compute_metrics([])


def test_default_feeder_calibration(stressed):
    f = stressed.feeder
    assert f.node_count == 8
    sol = solve_distflow(f, NodalInjection(0.675 * f.nominal_real, 0.675 * f.nominal_reactive))
    assert sol.min_voltage == pytest.approx(0.964, abs=1e-6)


def test_fleet_sized_by_average_consumption(stressed):
    total_kw = stressed.feeder.pu_to_kw(stressed.feeder.nominal_real.sum())
    expected = 0.25 * total_kw / harness.typical_device_power(TclRanges())
    assert stressed.population.size == round(expected)


def test_typical_device_power_matches_fine_step_simulation():
    r = TclRanges()
    mid = {name: 0.5 * sum(getattr(r, name)) for name in ("ambient_temp", "thermal_resistance",
                                                          "thermal_capacitance", "transfer_rate", "cop",
                                                          "setpoint", "deadband_width")}
    # scalar thermostat loop with a 1 s step
    a = math.exp(-(1 / 3600) / (mid["thermal_resistance"] * mid["thermal_capacitance"]))
    lo = mid["setpoint"] - mid["deadband_width"] / 2
    hi = mid["setpoint"] + mid["deadband_width"] / 2
    theta, mode, on, steps = mid["setpoint"], 0, 0, 400_000
    for _ in range(steps):
        theta = a * theta + (1 - a) * (mid["ambient_temp"] + mid["thermal_resistance"] * mid["transfer_rate"] * mode)
        mode = 1 if theta >= hi else 0 if theta <= lo else mode
        on += mode
    rated = -mid["transfer_rate"] / mid["cop"]
    assert harness.typical_device_power(r) == pytest.approx(rated * on / steps, rel=0.01)


def test_peak_hour_is_plateau_midpoint(stressed):
    assert harness.peak_hour(stressed.load) == pytest.approx(14.0)


def test_zero_tcl_scenario():
    cfg = ScenarioConfig(steps=10, population=PopulationSpec(count=0),
                         reference=ReferenceSpec(offset_kw=50.0, scale_kw=10.0))
    sc = build_scenario(cfg)
    res = run_scenario(cfg, sc)
    assert all(r["p_agg"] == 0.0 for r in res.records)
    assert res.summary["rmse_kW"] == pytest.approx(math.sqrt(np.mean(sc.p_ref[:10] ** 2)))
    seeds = Streams(cfg.seed)
    for r in res.records:
        lp, lq = sc.load.sample(sc.hours[r["t"] + 1], 1, seeds.generator(tags.LOAD_TRUTH, r["t"] + 1))
        v = solve_distflow(sc.feeder, NodalInjection(lp[0], lq[0])).min_voltage
        assert r["min_voltage"] == pytest.approx(v, abs=1e-9)
        assert r["safe_flag"] == (v >= 0.95)


def test_runs_are_deterministic(stressed):
    cfg = replace(ScenarioConfig(controller="tracking", steps=15))
    a = run_scenario(cfg)
    b = run_scenario(cfg)
    assert harness.render_results(a) == harness.render_results(b)
    assert harness.render_summary([harness.summary_row(a, cfg)]) == harness.render_summary(
        [harness.summary_row(b, cfg)])


def test_tracking_matches_proposed_when_bounds_never_bind():
    cfg = ScenarioConfig(steps=4, feeder=FeederSpec(target_min_voltage=0.995))
    sc = build_scenario(cfg)
    prop = run_scenario(cfg, sc)
    track = run_scenario(replace(cfg, controller="tracking"), sc)
    assert all(r["upper"] == 1.0 for r in prop.records)
    assert [r["u"] for r in prop.records] == [r["u"] for r in track.records]
    assert [r["p_agg"] for r in prop.records] == [r["p_agg"] for r in track.records]


def test_tracking_violates_and_opf_never_does(stressed):
    track = run_scenario(replace(stressed.config, controller="tracking"), stressed)
    opf = run_scenario(replace(stressed.config, controller="opf"), stressed)
    assert track.summary["violation_count"] >= 1
    assert opf.summary["violation_count"] == 0
    assert opf.summary["rmse_kW"] > track.summary["rmse_kW"]
    assert all(r["u"] is None for r in opf.records)


def test_proposed_commands_stay_inside_certified_bounds(stressed):
    cfg = replace(stressed.config, steps=3)
    res = run_scenario(cfg, stressed)
    assert len(res.constraints) == 3
    for r, c in zip(res.records, res.constraints):
        assert c["lower"] <= r["u"] <= c["upper"]
        assert r["samples_used"] == c["samples_used"] > 0


def test_bin_forecast_tracks_realized_switch_fractions(stressed):
    pop = stressed.population.copy()
    model = build_bin_model(FleetStatistics.from_population(pop), 20)
    model.observe(pop)
    rng = np.random.default_rng(0)
    errors = []
    for k in range(120):
        w_on, _ = estimate_w_fractions(model)
        u = choose_command(model, float(stressed.p_ref[k]), ConstraintSet(), 0.01)
        counts = step_population(pop, u, rng)
        off = counts.off_before.sum()
        errors.append(abs(w_on - counts.switched_on_internal.sum() / off))
        model.observe(pop)
    assert np.mean(errors) <= 0.1


def test_config_errors():
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError):
        ScenarioConfig(controller="magic")
    with pytest.raises(ConfigError):
        harness.load_config("/nonexistent/config.json")
    with pytest.raises(ConfigError):
        build_scenario(ScenarioConfig(reference=ReferenceSpec(file="missing.csv")))


def test_config_round_trip(tmp_path):
    cfg = ScenarioConfig(seed=4, steps=7, feeder=FeederSpec(node_count=5))
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = harness.load_config(path)
    assert json.dumps(back.to_dict()) == json.dumps(cfg.to_dict())
    assert build_scenario(back).population.size == build_scenario(cfg).population.size


def test_snapshot_needs_devices():
    sc = build_scenario(ScenarioConfig(population=PopulationSpec(count=0),
                                       reference=ReferenceSpec(offset_kw=1.0)))
    with pytest.raises(ConfigError):
        harness.snapshot_observation(sc)


def _row(controller, eps, rmse, safety, violations=20):
    return ComparisonRow(controller, eps, rmse, safety, violations, 600, 10)


def test_ordering_check():
    good = [_row("tracking", None, 50, 0.9), _row("opf", None, 400, 1.0, 0),
            _row("proposed", 0.05, 300, 0.99, 6), _row("proposed", 0.02, 320, 0.995, 3)]
    assert check_ordering(good) == []
    bad = [_row("tracking", None, 500, 0.9), *good[1:]]
    assert any("RMSE" in p for p in check_ordering(bad))
    assert check_ordering(good[:3])
    text = render_comparison(good)
    assert len(text.splitlines()) == 5 and text.startswith("controller,epsilon,rmse_kW")
