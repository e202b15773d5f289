"""Closed-loop scenario engine, benchmarks, metrics and result files.

One step of the loop (index ``k``, wall-clock hour ``h_k``):

1. the utility certifies a command interval for the coming step from the
   current nodal measurements and the aggregator's switch forecasts
   (proposed controller only; the tracking benchmark uses ``[-1, 1]``);
2. the aggregator picks the command that best tracks ``p_ref[k]``;
3. the fleet steps; fresh uncontrollable loads are drawn for ``h_{k+1}``;
4. full DistFlow on exact device powers plus loads decides ground-truth
   safety, and those totals become the next measurements.

The OPF benchmark replaces 1-3 by direct mode assignment.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import streams as tags
from .aggregator import (ConstraintSet, FleetStatistics, build_bin_model, choose_command, estimate_w_fractions,
                         load_reference_csv, synthetic_regulation_signal)
from .errors import ConfigError
from .grid import (FeederModel, NodalInjection, distflow_batch, generate_feeder, load_feeder,
                   scale_to_min_voltage)
from .loads import DEFAULT_PROFILE, LoadModel
from .opf import VoltageBudget, opf_step
from .streams import Streams
from .tcl import (TclPopulation, TclRanges, duty_cycle_estimate, nodal_tcl_power, sample_population,
                  step_population)
from .utility import SafetyConfig, UtilityObservation, construct_constraint_set, constraint_record

log = logging.getLogger(__name__)

CONTROLLERS = ("proposed", "tracking", "opf")


# -- configuration -------------------------------------------------------------


def _section(cls, data, name):
    data = dict(data or {})
    unknown = set(data) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"unknown keys in '{name}': {sorted(unknown)}")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"bad '{name}' section: {exc}") from None


@dataclass(frozen=True)
class FeederSpec:
    """Feeder source: a JSON file, or a generated feeder rescaled to a target stress."""

    file: str | None = None
    shape: str = "branched"
    node_count: int = 8
    seed: int = 0
    r_range: tuple = (0.004, 0.012)
    x_ratio_range: tuple = (0.6, 1.2)
    load_range: tuple = (0.3, 0.9)
    power_factor: float = 0.95
    base_mva: float = 1.0
    # impedances are scaled so that with no TCLs and every load at
    # calibration_multiplier x nominal the lowest voltage is target_min_voltage
    # 0.964 rather than v_floor + 0.01: any tighter and the OPF benchmark's
    # worst-case check turns infeasible around the load peak
    target_min_voltage: float | None = 0.964
    calibration_multiplier: float = 0.675


@dataclass(frozen=True)
class PopulationSpec:
    # default count: the fleet's free-running consumption is nominal_fraction
    # of the total nominal load
    count: int | None = None
    nominal_fraction: float = 0.25
    ranges: dict = field(default_factory=dict)


@dataclass(frozen=True)
class LoadSpec:
    profile: tuple = DEFAULT_PROFILE
    sigma_fraction: float = 0.15
    truncation: tuple = (-0.25, 0.675)
    correlation: float = 0.8


@dataclass(frozen=True)
class ReferenceSpec:
    file: str | None = None
    time_constant: float = 300.0  # s, synthetic signal only
    scale_kw: float | None = None  # default: scale_fraction x offset
    scale_fraction: float = 0.7
    offset_kw: float | None = None  # default: offset_fraction x the fleet's free-running baseline
    offset_fraction: float = 1.2


@dataclass(frozen=True)
class AggregatorSpec:
    bin_count: int = 20
    grid_step: float = 0.01
    observe_bins: bool = True


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    controller: str = "proposed"
    dt: float = 60.0
    start_hour: float = 13.0
    steps: int = 120
    feeder: FeederSpec = field(default_factory=FeederSpec)
    population: PopulationSpec = field(default_factory=PopulationSpec)
    loads: LoadSpec = field(default_factory=LoadSpec)
    reference: ReferenceSpec = field(default_factory=ReferenceSpec)
    safety: SafetyConfig = field(default_factory=SafetyConfig)
    aggregator: AggregatorSpec = field(default_factory=AggregatorSpec)
    base_dir: str = "."  # relative file paths resolve against this

    def __post_init__(self):
        if self.controller not in CONTROLLERS:
            raise ConfigError(f"controller must be one of {CONTROLLERS}")
        if not self.dt > 0 or self.steps < 1:
            raise ConfigError("dt must be positive and steps >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path = ".") -> "ScenarioConfig":
        if not isinstance(data, dict):
            raise ConfigError("scenario config must be a JSON object")
        data = dict(data)
        sub = {"feeder": FeederSpec, "population": PopulationSpec, "loads": LoadSpec,
               "reference": ReferenceSpec, "aggregator": AggregatorSpec}
        kwargs = {}
        for name, kind in sub.items():
            if name in data:
                kwargs[name] = _section(kind, data.pop(name), name)
        if "safety" in data:
            kwargs["safety"] = SafetyConfig.from_dict(data.pop("safety"))
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
        kwargs.setdefault("base_dir", str(base_dir))
        return cls(**data, **kwargs)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("base_dir")
        return out

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else Path(self.base_dir) / p


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return ScenarioConfig.from_dict(data, base_dir=path.parent)


# -- scenario assembly ---------------------------------------------------------


@dataclass
class Scenario:
    """Everything a run needs, built (and validated) before step 0."""

    config: ScenarioConfig
    feeder: FeederModel
    load: LoadModel
    population: TclPopulation
    p_ref: np.ndarray
    hours: np.ndarray


def build_feeder(spec: FeederSpec, cfg: ScenarioConfig) -> FeederModel:
    if spec.file:
        feeder = load_feeder(cfg.resolve(spec.file))
        if feeder.nominal_real is None:
            raise ConfigError("feeder file needs nominal loads ('loads' entries)")
    else:
        feeder = generate_feeder(spec.shape, spec.node_count, spec.seed, tuple(spec.r_range),
                                 tuple(spec.x_ratio_range), tuple(spec.load_range), spec.power_factor,
                                 base_mva=spec.base_mva)
    if spec.target_min_voltage is not None:
        feeder = scale_to_min_voltage(feeder, spec.calibration_multiplier, spec.target_min_voltage)
    return feeder


def build_scenario(cfg: ScenarioConfig) -> Scenario:
    feeder = build_feeder(cfg.feeder, cfg)
    ls = cfg.loads
    load = LoadModel(feeder.nominal_real, feeder.nominal_reactive, tuple(map(tuple, ls.profile)),
                     ls.sigma_fraction, tuple(ls.truncation), ls.correlation)
    for hour in (cfg.start_hour, max(h for h, _ in load.profile)):
        if load.normalization_error(hour) > 1e-6:
            raise ConfigError("load density normalization check failed")

    weights = np.asarray(feeder.nominal_real)
    ps = cfg.population
    ranges = TclRanges.from_dict(ps.ranges)
    count = ps.count
    if count is None:
        count = int(round(ps.nominal_fraction * feeder.pu_to_kw(weights.sum()) / typical_device_power(ranges)))
    if count < 0:
        raise ConfigError("population count must be >= 0")
    seeds = Streams(cfg.seed)
    if count:
        pop = sample_population(count, weights, ranges, seeds.generator(tags.POPULATION), cfg.dt)
    else:
        pop = _empty_population(feeder.node_count, cfg.dt)

    hours = cfg.start_hour + cfg.dt / 3600.0 * np.arange(cfg.steps + 1)
    p_ref = build_reference(cfg, pop, seeds)
    return Scenario(cfg, feeder, load, pop, p_ref, hours)


def typical_device_power(ranges: TclRanges) -> float:
    """Free-running average consumption (kW) of a device with mid-range parameters."""
    mid = {f.name: np.array([0.5 * sum(getattr(ranges, f.name))]) for f in fields(ranges)}
    rated = -mid["transfer_rate"][0] / mid["cop"][0]
    return float(rated * duty_cycle_estimate(mid)[0])


def _empty_population(node_count: int, dt: float) -> TclPopulation:
    e = np.zeros(0)
    return TclPopulation(e, e, e, e, e, e, e, e, np.zeros(0, dtype=np.int64), e, np.zeros(0, dtype=np.int8),
                         node_count, dt)


def baseline_power(pop: TclPopulation, bin_count: int = 20) -> float:
    if pop.size == 0:
        return 0.0
    model = build_bin_model(FleetStatistics.from_population(pop), bin_count)
    return model.rated_power_total * model.on_mass()


def build_reference(cfg: ScenarioConfig, pop: TclPopulation, seeds: Streams) -> np.ndarray:
    rs = cfg.reference
    if rs.file:
        signal = load_reference_csv(cfg.resolve(rs.file), cfg.dt, cfg.steps)
        offset = 0.0 if rs.offset_kw is None else rs.offset_kw
        scale = 1.0 if rs.scale_kw is None else rs.scale_kw
        return offset + scale * signal
    signal = synthetic_regulation_signal(cfg.steps, cfg.dt, seeds.generator(tags.REFERENCE), rs.time_constant)
    base = baseline_power(pop, cfg.aggregator.bin_count)
    offset = rs.offset_fraction * base if rs.offset_kw is None else rs.offset_kw
    scale = rs.scale_fraction * base if rs.scale_kw is None else rs.scale_kw
    return offset + scale * signal


# -- results --------------------------------------------------------------------


@dataclass
class ScenarioResult:
    controller: str
    records: list
    summary: dict
    constraints: list = field(default_factory=list)


def compute_metrics(records) -> dict:
    """RMSE (kW), empirical safety probability and violation count."""
    if not records:
        raise ValueError("no records to summarize")
    err = np.array([r["p_agg"] - r["p_ref"] for r in records], dtype=float)
    safe = np.array([bool(r["safe_flag"]) for r in records])
    return {
        "rmse_kW": float(math.sqrt(np.mean(err * err))),
        "empirical_safety_probability": float(safe.sum() / safe.size),
        "violation_count": int((~safe).sum()),
        "steps": int(safe.size),
    }


def _truth(feeder: FeederModel, pop: TclPopulation, load_p, load_q, v_floor: float):
    tcl = nodal_tcl_power(pop)
    p = load_p + feeder.kw_to_pu(tcl.real_power)
    q = load_q + feeder.kw_to_pu(tcl.reactive_power)
    v, _, _, conv, div, _ = distflow_batch(feeder, p[None, :], q[None, :], method="matrix")
    if div[0] or not conv[0]:
        log.warning("ground-truth power flow failed; step counted unsafe")
        return NodalInjection(p, q), float("nan"), False
    vmin = float(v[0].min())
    return NodalInjection(p, q), vmin, vmin >= v_floor


def peak_hour(load: LoadModel) -> float:
    """Midpoint of the highest-multiplier stretch of the load profile."""
    top = max(m for _, m in load.profile)
    hours = [h for h, m in load.profile if m == top]
    return 0.5 * (hours[0] + hours[-1])


def snapshot_observation(sc: Scenario, hour: float | None = None) -> UtilityObservation:
    """What the utility would see at ``hour`` (default: the load peak) with the
    fleet in its initial state: one realized load draw plus the exact TCL
    power, and switching estimates from the stationary bin model."""
    hour = peak_hour(sc.load) if hour is None else float(hour)
    pop, feeder = sc.population, sc.feeder
    if pop.size == 0:
        raise ConfigError("a safety curve needs a non-empty TCL population")
    seeds = Streams(sc.config.seed)
    lp, lq = sc.load.sample(hour, 1, seeds.generator(tags.CURVE))
    measured, _, _ = _truth(feeder, pop, lp[0], lq[0], sc.config.safety.v_floor)
    model = build_bin_model(FleetStatistics.from_population(pop), sc.config.aggregator.bin_count)
    w_on, w_off = estimate_w_fractions(model)
    return UtilityObservation(measured, w_on, w_off, pop.node_counts, feeder.kw_to_pu(pop.avg_real),
                              feeder.kw_to_pu(pop.avg_reactive), hour, hour + sc.config.dt / 3600.0)


def run_scenario(cfg: ScenarioConfig, scenario: Scenario | None = None) -> ScenarioResult:
    """Run the closed loop for ``cfg.controller``; deterministic given the seed."""
    sc = scenario or build_scenario(cfg)
    started = time.perf_counter()
    feeder, load = sc.feeder, sc.load
    pop = sc.population.copy()
    seeds = Streams(cfg.seed)
    safety = cfg.safety
    agg = cfg.aggregator
    n = feeder.node_count

    model = build_bin_model(FleetStatistics.from_population(pop), agg.bin_count) if pop.size else None
    avg_real = feeder.kw_to_pu(pop.avg_real)
    avg_reactive = feeder.kw_to_pu(pop.avg_reactive)
    budget = VoltageBudget(feeder, load.upper_real, load.upper_reactive, safety.v_floor)

    lp, lq = load.sample(sc.hours[0], 1, seeds.generator(tags.LOAD_TRUTH, 0))
    measured, _, _ = _truth(feeder, pop, lp[0], lq[0], safety.v_floor)
    if model is not None and agg.observe_bins:
        model.observe(pop)

    records, constraints = [], []
    for k in range(cfg.steps):
        p_ref = float(sc.p_ref[k])
        bounds = ConstraintSet()
        opf_infeasible = False
        if cfg.controller == "opf":
            assignment = opf_step(pop, budget, p_ref)
            u = float("nan")
            opf_infeasible = not assignment.feasible
            if opf_infeasible:
                log.warning("step %d: voltage limits infeasible even with all TCLs OFF", k)
        else:
            if cfg.controller == "proposed" and pop.size:
                w_on, w_off = estimate_w_fractions(model)
                obs = UtilityObservation(measured, w_on, w_off, pop.node_counts, avg_real, avg_reactive,
                                         float(sc.hours[k]), float(sc.hours[k + 1]))
                bounds = construct_constraint_set(obs, load, safety, feeder, seeds.child(tags.UTILITY, k))
                constraints.append(constraint_record(k, bounds))
            u = choose_command(model, p_ref, bounds, agg.grid_step) if model is not None else 0.0
            step_population(pop, u, seeds.generator(tags.TCL_STEP, k))
            if model is not None:
                if agg.observe_bins:
                    model.observe(pop)
                else:
                    model.step(u)
        lp, lq = load.sample(sc.hours[k + 1], 1, seeds.generator(tags.LOAD_TRUTH, k + 1))
        measured, vmin, safe = _truth(feeder, pop, lp[0], lq[0], safety.v_floor)
        records.append({
            "t": k, "hour": float(sc.hours[k + 1]), "p_ref": p_ref, "p_agg": pop.aggregate_power,
            "u": None if math.isnan(u) else u, "lower": bounds.lower, "upper": bounds.upper,
            "min_voltage": None if math.isnan(vmin) else vmin, "safe_flag": bool(safe),
            "samples_used": bounds.samples_used, "infeasible_flag": bool(bounds.infeasible or opf_infeasible),
        })
    summary = compute_metrics(records)
    summary["wall_time"] = time.perf_counter() - started
    return ScenarioResult(cfg.controller, records, summary, constraints)


def run_tracking_benchmark(cfg: ScenarioConfig, scenario: Scenario | None = None) -> ScenarioResult:
    return run_scenario(replace(cfg, controller="tracking"), scenario)


def run_opf_benchmark(cfg: ScenarioConfig, scenario: Scenario | None = None) -> ScenarioResult:
    return run_scenario(replace(cfg, controller="opf"), scenario)


# -- persistence ------------------------------------------------------------------
# wall_time is deliberately left out of files so reruns are byte-identical.

SUMMARY_FIELDS = ("controller", "epsilon", "seed", "rmse_kW", "empirical_safety_probability", "violation_count",
                  "steps")


def render_results(result: ScenarioResult) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.records)


def render_summary(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def render_trace(result: ScenarioResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "hour", "p_ref_kW", "p_agg_kW", "u", "lower", "upper", "min_voltage", "safe"])
    for r in result.records:
        w.writerow([r["t"], repr(r["hour"]), repr(r["p_ref"]), repr(r["p_agg"]),
                    "" if r["u"] is None else repr(r["u"]), repr(r["lower"]), repr(r["upper"]),
                    "" if r["min_voltage"] is None else repr(r["min_voltage"]), int(r["safe_flag"])])
    return buf.getvalue()


def summary_row(result: ScenarioResult, cfg: ScenarioConfig) -> dict:
    label = result.controller
    eps = cfg.safety.epsilon if label == "proposed" else ""
    return {"controller": label, "epsilon": eps, "seed": cfg.seed, **result.summary}


def write_scenario_outputs(result: ScenarioResult, cfg: ScenarioConfig, outdir) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "results.jsonl").write_text(render_results(result), encoding="utf-8")
    (outdir / "summary.csv").write_text(render_summary([summary_row(result, cfg)]), encoding="utf-8")
    (outdir / "trace.csv").write_text(render_trace(result), encoding="utf-8")
    if result.constraints:
        (outdir / "constraints.jsonl").write_text(
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in result.constraints), encoding="utf-8")


# -- controller comparison ----------------------------------------------------------

COMPARISON = (("tracking", None), ("opf", None), ("proposed", 0.05), ("proposed", 0.02))


@dataclass(frozen=True)
class ComparisonRow:
    controller: str
    epsilon: float | None
    rmse_kW: float
    empirical_safety_probability: float
    violation_count: int
    steps: int
    seeds: int

    @property
    def label(self) -> str:
        return self.controller if self.epsilon is None else f"{self.controller} eps={self.epsilon}"


def compare_controllers(cfg: ScenarioConfig, seeds, variants=COMPARISON, per_seed=None):
    """Run every controller variant on each seed; metrics pooled over all steps.

    ``per_seed`` (optional list) receives one summary row per run.
    """
    seeds = list(seeds)
    if not seeds:
        raise ConfigError("seed list is empty")
    pooled = {v: [] for v in variants}
    for seed in seeds:
        base = replace(cfg, seed=int(seed))
        scenario = build_scenario(base)
        for controller, eps in variants:
            run_cfg = replace(base, controller=controller)
            if eps is not None:
                run_cfg = replace(run_cfg, safety=replace(run_cfg.safety, epsilon=eps))
            res = run_scenario(run_cfg, scenario)
            log.info("seed %d %s eps=%s: %s", seed, controller, eps, res.summary)
            pooled[(controller, eps)].extend(res.records)
            if per_seed is not None:
                per_seed.append(summary_row(res, run_cfg))
    rows = []
    for (controller, eps), records in pooled.items():
        m = compute_metrics(records)
        rows.append(ComparisonRow(controller, eps, m["rmse_kW"], m["empirical_safety_probability"],
                                  m["violation_count"], m["steps"], len(seeds)))
    return rows


def check_ordering(rows) -> list[str]:
    """Violated ordering claims among the comparison rows (empty when all hold)."""
    by = {(r.controller, r.epsilon): r for r in rows}
    need = [("tracking", None), ("opf", None), ("proposed", 0.05), ("proposed", 0.02)]
    if any(k not in by for k in need):
        return ["comparison lacks one of tracking, opf, proposed eps=0.05, proposed eps=0.02"]
    tr, opf, p5, p2 = (by[k] for k in need)
    problems = []
    if not tr.rmse_kW <= p5.rmse_kW <= p2.rmse_kW <= opf.rmse_kW:
        problems.append("RMSE ordering tracking <= proposed(0.05) <= proposed(0.02) <= opf violated")
    for p in (p5, p2):
        if not tr.empirical_safety_probability < p.empirical_safety_probability <= opf.empirical_safety_probability:
            problems.append(f"safety ordering tracking < {p.label} <= opf violated")
    if tr.violation_count < 10:
        problems.append("tracking benchmark has fewer than 10 violations")
    if p5.empirical_safety_probability < 1 - 0.05 - 0.02:
        problems.append("proposed eps=0.05 safety below 0.93")
    return problems


def render_comparison(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["controller", "epsilon", "rmse_kW", "empirical_safety_probability", "violation_count", "steps",
                "seeds"])
    for r in rows:
        w.writerow([r.controller, "" if r.epsilon is None else repr(r.epsilon), repr(r.rmse_kW),
                    repr(r.empirical_safety_probability), r.violation_count, r.steps, r.seeds])
    return buf.getvalue()
