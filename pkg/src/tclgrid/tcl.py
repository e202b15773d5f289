"""Cooling TCL fleet: thermal dynamics, thermostat, and command response.

The population is stored as a struct of numpy arrays.  Electrical
consumption is kept positive: a device draws ``|p_tr| / cop`` kW when ON.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grid import NodalInjection

DEFAULT_DT = 60.0


@dataclass(frozen=True)
class TclParams:
    ambient_temp: float           # degC
    thermal_resistance: float     # degC/kW
    thermal_capacitance: float    # kWh/degC
    transfer_rate: float          # kW, negative (cooling)
    cop: float
    setpoint: float               # degC
    deadband_width: float         # degC
    reactive_ratio: float         # tan(arccos(pf))
    node: int

    def __post_init__(self):
        if not self.transfer_rate < 0:
            raise ConfigError("only cooling TCLs (negative transfer rate) are supported")
        for name in ("cop", "thermal_resistance", "thermal_capacitance", "deadband_width", "reactive_ratio"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.node < 1:
            raise ConfigError("TCL node labels start at 1")


@dataclass(frozen=True)
class TclState:
    temperature: float
    mode: int


@dataclass(frozen=True)
class TclRanges:
    """Uniform sampling intervals for device parameters."""

    ambient_temp: tuple[float, float] = (29.0, 31.0)
    thermal_capacitance: tuple[float, float] = (1.5, 2.5)
    thermal_resistance: tuple[float, float] = (1.2, 2.5)
    transfer_rate: tuple[float, float] = (-18.0, -14.0)
    cop: tuple[float, float] = (2.3, 2.7)
    setpoint: tuple[float, float] = (20.0, 25.0)
    deadband_width: tuple[float, float] = (1.5, 2.0)
    power_factor: tuple[float, float] = (0.95, 0.99)

    def __post_init__(self):
        for f in fields(self):
            lo, hi = getattr(self, f.name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ConfigError(f"invalid range for {f.name}: [{lo}, {hi}]")
            object.__setattr__(self, f.name, (float(lo), float(hi)))
        if self.transfer_rate[1] >= 0:
            raise ConfigError("transfer_rate range must be strictly negative")
        pf_lo, pf_hi = self.power_factor
        if not 0 < pf_lo <= pf_hi < 1:
            raise ConfigError("power factor range must lie in (0, 1)")
        for name in ("cop", "thermal_resistance", "thermal_capacitance", "deadband_width"):
            if getattr(self, name)[0] <= 0:
                raise ConfigError(f"{name} range must be positive")

    @classmethod
    def from_dict(cls, data: dict | None) -> "TclRanges":
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown TCL range keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) for k, v in data.items()})


@dataclass
class StepCounts:
    """Per-node bookkeeping for one population step (arrays of length n)."""

    on_before: np.ndarray
    off_before: np.ndarray
    switched_on_internal: np.ndarray
    switched_off_internal: np.ndarray
    switched_on_command: np.ndarray
    switched_off_command: np.ndarray
    aggregate_power: float  # kW

    @property
    def on_after(self) -> np.ndarray:
        return (self.on_before + self.switched_on_internal - self.switched_off_internal
                + self.switched_on_command - self.switched_off_command)


@dataclass
class TclPopulation:
    """Fleet parameters (per-device arrays), mutable state, and node map."""

    ambient_temp: np.ndarray
    thermal_resistance: np.ndarray
    thermal_capacitance: np.ndarray
    transfer_rate: np.ndarray
    cop: np.ndarray
    setpoint: np.ndarray
    deadband_width: np.ndarray
    reactive_ratio: np.ndarray
    node: np.ndarray
    temperature: np.ndarray
    mode: np.ndarray
    node_count: int
    dt: float = DEFAULT_DT
    _derived: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for name in ("ambient_temp", "thermal_resistance", "thermal_capacitance", "transfer_rate", "cop",
                     "setpoint", "deadband_width", "reactive_ratio", "temperature"):
            setattr(self, name, np.array(getattr(self, name), dtype=float))
        self.node = np.array(self.node, dtype=np.int64)
        self.mode = np.array(self.mode, dtype=np.int8)
        size = self.node.shape[0]
        for name in ("ambient_temp", "thermal_resistance", "thermal_capacitance", "transfer_rate", "cop",
                     "setpoint", "deadband_width", "reactive_ratio", "temperature", "mode"):
            if getattr(self, name).shape != (size,):
                raise ConfigError(f"population array {name} has the wrong length")
        if size and (self.node.min() < 1 or self.node.max() > self.node_count):
            raise ConfigError("TCL node labels must lie in 1..node_count")
        if np.any(self.transfer_rate >= 0):
            raise ConfigError("only cooling TCLs are supported")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if not np.all(np.isin(self.mode, (0, 1))):
            raise ConfigError("modes must be 0 or 1")

    # -- derived parameters (fixed once sampled) --------------------------
    @property
    def size(self) -> int:
        return int(self.node.shape[0])

    def _cached(self, key, fn):
        if key not in self._derived:
            self._derived[key] = fn()
        return self._derived[key]

    @property
    def a_th(self) -> np.ndarray:
        return self._cached("a_th", lambda: np.exp(-(self.dt / 3600.0) / (self.thermal_resistance * self.thermal_capacitance)))

    @property
    def rated_real(self) -> np.ndarray:
        """ON-mode electrical consumption per device, kW (positive)."""
        return self._cached("p", lambda: np.abs(self.transfer_rate) / self.cop)

    @property
    def rated_reactive(self) -> np.ndarray:
        return self._cached("q", lambda: self.reactive_ratio * self.rated_real)

    @property
    def lower(self) -> np.ndarray:
        return self._cached("lo", lambda: self.setpoint - 0.5 * self.deadband_width)

    @property
    def upper(self) -> np.ndarray:
        return self._cached("hi", lambda: self.setpoint + 0.5 * self.deadband_width)

    @property
    def node_index(self) -> np.ndarray:
        return self._cached("idx", lambda: self.node - 1)

    @property
    def node_counts(self) -> np.ndarray:
        return self._cached("n", lambda: np.bincount(self.node_index, minlength=self.node_count))

    @property
    def avg_real(self) -> np.ndarray:
        return self._cached("pbar", lambda: _node_mean(self.rated_real, self.node_index, self.node_counts))

    @property
    def avg_reactive(self) -> np.ndarray:
        return self._cached("qbar", lambda: _node_mean(self.rated_reactive, self.node_index, self.node_counts))

    @property
    def on_counts(self) -> np.ndarray:
        return np.bincount(self.node_index, weights=self.mode, minlength=self.node_count).astype(np.int64)

    @property
    def aggregate_power(self) -> float:
        return float(np.dot(self.rated_real, self.mode))

    @property
    def rated_total(self) -> float:
        return float(self.rated_real.sum())

    def device(self, i: int) -> tuple[TclParams, TclState]:
        params = TclParams(
            float(self.ambient_temp[i]), float(self.thermal_resistance[i]), float(self.thermal_capacitance[i]),
            float(self.transfer_rate[i]), float(self.cop[i]), float(self.setpoint[i]),
            float(self.deadband_width[i]), float(self.reactive_ratio[i]), int(self.node[i]),
        )
        return params, TclState(float(self.temperature[i]), int(self.mode[i]))

    @classmethod
    def from_devices(cls, params: list[TclParams], states: list[TclState], node_count: int,
                     dt: float = DEFAULT_DT) -> "TclPopulation":
        if len(params) != len(states):
            raise ConfigError("params and states must have equal length")
        cols = {f.name: [getattr(p, f.name) for p in params] for f in fields(TclParams)}
        return cls(**cols, temperature=[s.temperature for s in states], mode=[s.mode for s in states],
                   node_count=node_count, dt=dt)

    def copy(self) -> "TclPopulation":
        return TclPopulation(
            self.ambient_temp.copy(), self.thermal_resistance.copy(), self.thermal_capacitance.copy(),
            self.transfer_rate.copy(), self.cop.copy(), self.setpoint.copy(), self.deadband_width.copy(),
            self.reactive_ratio.copy(), self.node.copy(), self.temperature.copy(), self.mode.copy(),
            self.node_count, self.dt,
        )


def _node_mean(values, index, counts):
    sums = np.bincount(index, weights=values, minlength=counts.shape[0]).astype(float)
    return np.divide(sums, counts, out=np.zeros_like(sums), where=counts > 0)


def advance_temperature(pop: TclPopulation) -> None:
    """Affine thermal update using the mode held over the last step."""
    a = pop.a_th
    pop.temperature = a * pop.temperature + (1.0 - a) * (
        pop.ambient_temp + pop.thermal_resistance * pop.transfer_rate * pop.mode)


def step_population(pop: TclPopulation, command: float, rng: np.random.Generator) -> StepCounts:
    """Advance every device one step under the broadcast ``command``.

    Temperature moves first with the previous mode, then the thermostat
    forces devices that left the dead-band, then in-band devices respond to
    the command with a uniform draw ``z`` in ``[0, 1)``.
    """
    u = float(command)
    if not -1.0 <= u <= 1.0:
        raise ValueError(f"command {u} outside [-1, 1]")
    n = pop.node_count
    idx = pop.node_index
    prev = pop.mode.astype(bool)
    on_before = np.bincount(idx, weights=prev, minlength=n).astype(np.int64)
    off_before = pop.node_counts - on_before

    advance_temperature(pop)
    # one draw per device per step keeps the stream layout independent of u
    z = rng.random(pop.size)

    too_hot = pop.temperature >= pop.upper
    too_cold = pop.temperature <= pop.lower
    in_band = ~(too_hot | too_cold)

    s_on = too_hot & ~prev
    s_off = too_cold & prev
    c_on = in_band & ~prev & (u > 0.0) & (z <= u)
    c_off = in_band & prev & (u < 0.0) & (z <= -u)

    new = (prev | s_on | c_on) & ~(s_off | c_off)
    pop.mode = new.astype(np.int8)

    def per_node(mask):
        return np.bincount(idx, weights=mask, minlength=n).astype(np.int64)

    return StepCounts(on_before, off_before, per_node(s_on), per_node(s_off), per_node(c_on), per_node(c_off),
                      float(np.dot(pop.rated_real, new)))


def duty_cycle_estimate(pop_arrays: dict) -> np.ndarray:
    """Fraction of time ON for a free-running device (continuous-time cycle)."""
    theta_a = pop_arrays["ambient_temp"]
    lo = pop_arrays["setpoint"] - 0.5 * pop_arrays["deadband_width"]
    hi = pop_arrays["setpoint"] + 0.5 * pop_arrays["deadband_width"]
    theta_on = theta_a + pop_arrays["thermal_resistance"] * pop_arrays["transfer_rate"]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_on = np.log((hi - theta_on) / (lo - theta_on))
        t_off = np.log((theta_a - lo) / (theta_a - hi))
        duty = t_on / (t_on + t_off)
    # devices that can never reach the band from one side sit at a limit
    duty = np.where(theta_on >= lo, 1.0, duty)
    duty = np.where(theta_a <= hi, 0.0, duty)
    return np.clip(np.nan_to_num(duty, nan=0.5), 0.0, 1.0)


def apportion(count: int, weights) -> np.ndarray:
    """Largest-remainder split of ``count`` items proportional to ``weights``."""
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
        raise ConfigError("node weights must be non-negative and not all zero")
    quota = count * w / w.sum()
    base = np.floor(quota).astype(np.int64)
    remainder = count - int(base.sum())
    if remainder:
        # stable order: larger fractional part first, then lower node index
        order = np.lexsort((np.arange(w.size), -(quota - base)))
        base[order[:remainder]] += 1
    return base


def sample_population(count: int, node_weights, ranges: TclRanges | None = None,
                      rng: np.random.Generator | None = None, dt: float = DEFAULT_DT) -> TclPopulation:
    """Draw a fleet with independent uniform parameters.

    Devices are spread over nodes proportionally to ``node_weights``; initial
    temperatures are uniform in each dead-band and initial modes are drawn
    with the device's free-running duty cycle as ON probability.
    """
    if count < 1:
        raise ConfigError("population count must be >= 1")
    ranges = ranges or TclRanges()
    rng = rng if rng is not None else np.random.default_rng()
    weights = np.asarray(node_weights, dtype=float)
    per_node = apportion(count, weights)
    nodes = np.repeat(np.arange(1, weights.size + 1), per_node)

    def draw(name):
        lo, hi = getattr(ranges, name)
        return rng.uniform(lo, hi, size=count)

    arrays = {name: draw(name) for name in ("ambient_temp", "thermal_capacitance", "thermal_resistance",
                                            "transfer_rate", "cop", "setpoint", "deadband_width")}
    pf = draw("power_factor")
    arrays["reactive_ratio"] = np.tan(np.arccos(pf))
    half = 0.5 * arrays["deadband_width"]
    temperature = rng.uniform(arrays["setpoint"] - half, arrays["setpoint"] + half)
    mode = (rng.random(count) < duty_cycle_estimate(arrays)).astype(np.int8)
    return TclPopulation(**arrays, node=nodes, temperature=temperature, mode=mode,
                         node_count=int(weights.size), dt=dt)


def nodal_tcl_power(pop: TclPopulation) -> NodalInjection:
    """Exact per-node TCL consumption in kW (sum over ON devices)."""
    idx = pop.node_index
    m = pop.mode.astype(float)
    p = np.bincount(idx, weights=pop.rated_real * m, minlength=pop.node_count)
    q = np.bincount(idx, weights=pop.rated_reactive * m, minlength=pop.node_count)
    return NodalInjection(p, q)


# -- snapshots ---------------------------------------------------------------

_ARRAY_FIELDS = ("ambient_temp", "thermal_resistance", "thermal_capacitance", "transfer_rate", "cop",
                 "setpoint", "deadband_width", "reactive_ratio", "node", "temperature", "mode")


def population_to_dict(pop: TclPopulation) -> dict:
    devices = []
    for i in range(pop.size):
        params, state = pop.device(i)
        devices.append({**asdict(params), **asdict(state)})
    return {"node_count": pop.node_count, "dt": pop.dt, "devices": devices}


def population_from_dict(data: dict) -> TclPopulation:
    try:
        devices = data["devices"]
        cols = {name: [d[name] for d in devices] for name in _ARRAY_FIELDS}
        return TclPopulation(**cols, node_count=int(data["node_count"]), dt=float(data.get("dt", DEFAULT_DT)))
    except KeyError as exc:
        raise ConfigError(f"population snapshot missing field {exc}") from None


def save_population(pop: TclPopulation, path) -> None:
    Path(path).write_text(json.dumps(population_to_dict(pop)) + "\n", encoding="utf-8")


def load_population(path) -> TclPopulation:
    return population_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
