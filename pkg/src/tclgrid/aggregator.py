"""Aggregator side: temperature-bin model of the fleet and command choice.

The bin model tracks probability mass over (mode, normalized temperature bin)
with normalized temperature ``x = (theta - theta_lo) / width`` in ``[0, 1]``.
One step of the mean device's affine dynamics maps each bin (mass assumed
uniform inside it) onto an interval; the overlap of that interval with the
bins gives the transition probabilities.  Mass pushed past the dead-band edge
is switched by the thermostat and lands in the edge bin of the other mode.

State layout is ``[OFF bins 0..B-1, ON bins 0..B-1]`` with bin 0 the coldest.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .tcl import TclPopulation

_MASS_FLOOR = 1e-12


@dataclass(frozen=True)
class ConstraintSet:
    """Admissible command interval ``[lower, upper]`` sent by the utility."""

    lower: float = -1.0
    upper: float = 1.0
    infeasible: bool = False
    samples_used: int = 0
    accepted_m: float | None = None
    probes: int = 0

    def __post_init__(self):
        if not -1.0 <= self.lower <= self.upper <= 1.0:
            raise ValueError(f"invalid constraint set [{self.lower}, {self.upper}]")

    def __contains__(self, u: float) -> bool:
        return self.lower <= u <= self.upper


@dataclass(frozen=True)
class FleetStatistics:
    """Population-level parameter means the aggregator is allowed to know."""

    ambient_temp: float
    thermal_resistance: float
    thermal_capacitance: float
    transfer_rate: float
    setpoint: float
    deadband_width: float
    dt: float
    rated_total: float

    @classmethod
    def from_population(cls, pop: TclPopulation) -> "FleetStatistics":
        return cls(
            float(pop.ambient_temp.mean()), float(pop.thermal_resistance.mean()),
            float(pop.thermal_capacitance.mean()), float(pop.transfer_rate.mean()),
            float(pop.setpoint.mean()), float(pop.deadband_width.mean()), float(pop.dt), pop.rated_total,
        )


def _overlaps(lo: float, hi: float, bins: int) -> tuple[np.ndarray, float, float]:
    """Fractions of the uniform interval [lo, hi] below 0, in each bin, and above 1."""
    width = hi - lo
    edges = np.linspace(0.0, 1.0, bins + 1)
    left = np.clip(edges[:-1], lo, hi)
    right = np.clip(edges[1:], lo, hi)
    inside = np.maximum(right - left, 0.0) / width
    below = max(min(hi, 0.0) - lo, 0.0) / width
    above = max(hi - max(lo, 1.0), 0.0) / width
    return inside, below, above


@dataclass
class BinModel:
    """Two-column Markov bin model with command-dependent transitions.

    ``A(u) = cross + keep(u) * stay + switch(u) * mirror(stay)`` where ``cross``
    holds thermostat-forced moves and ``stay`` the in-band moves that the
    command can redirect into the other mode's mirrored bin.
    """

    bin_count: int
    state: np.ndarray
    cross: np.ndarray
    stay: np.ndarray
    rated_power_total: float

    @property
    def transition_base(self) -> np.ndarray:
        return self.transition(0.0)

    def transition(self, u: float) -> np.ndarray:
        B = self.bin_count
        up, um = max(u, 0.0), max(-u, 0.0)
        keep = np.concatenate([np.full(B, 1.0 - up), np.full(B, 1.0 - um)])
        switch = np.concatenate([np.full(B, up), np.full(B, um)])
        mirror = np.roll(self.stay, B, axis=1)
        return self.cross + keep[:, None] * self.stay + switch[:, None] * mirror

    # -- pieces used by the fast closed-form predictions --------------------
    def _split(self):
        B = self.bin_count
        moved_cross = self.state @ self.cross
        stay_mass = self.state[:, None] * self.stay
        stay_off = float(stay_mass[:B].sum())
        stay_on = float(stay_mass[B:].sum())
        return float(moved_cross[B:].sum()), stay_off, stay_on

    def on_mass(self) -> float:
        return float(self.state[self.bin_count:].sum())

    def predicted_on_mass(self, u) -> np.ndarray | float:
        """ON mass after one step under ``u`` (scalar or array)."""
        cross_on, stay_off, stay_on = self._split()
        u = np.asarray(u, dtype=float)
        out = cross_on + stay_on * (1.0 - np.maximum(-u, 0.0)) + stay_off * np.maximum(u, 0.0)
        return float(out) if out.ndim == 0 else out

    def step(self, u: float) -> None:
        self.state = self.state @ self.transition(u)

    def observe(self, pop: TclPopulation) -> None:
        """Replace the state with the fleet's (mode, bin) occupancy histogram."""
        self.state = occupancy_histogram(pop, self.bin_count)

    def stationary(self) -> np.ndarray:
        A = self.transition(0.0)
        n = A.shape[0]
        M = np.vstack([A.T - np.eye(n), np.ones((1, n))])
        rhs = np.zeros(n + 1)
        rhs[-1] = 1.0
        pi, *_ = np.linalg.lstsq(M, rhs, rcond=None)
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum()


def occupancy_histogram(pop: TclPopulation, bins: int) -> np.ndarray:
    x = (pop.temperature - pop.lower) / pop.deadband_width
    k = np.clip(np.floor(x * bins), 0, bins - 1).astype(np.int64)
    k = k + bins * pop.mode.astype(np.int64)
    return np.bincount(k, minlength=2 * bins) / pop.size


def build_bin_model(stats: FleetStatistics, bin_count: int = 20) -> BinModel:
    """Bin model for the mean device, started at its stationary distribution."""
    if bin_count < 4 or bin_count % 2:
        raise ConfigError("bin_count must be an even integer >= 4")
    B = bin_count
    a = math.exp(-(stats.dt / 3600.0) / (stats.thermal_resistance * stats.thermal_capacitance))
    lo = stats.setpoint - 0.5 * stats.deadband_width
    width = stats.deadband_width
    drift_off = (1.0 - a) * (stats.ambient_temp - lo) / width
    drift_on = (1.0 - a) * (stats.ambient_temp + stats.thermal_resistance * stats.transfer_rate - lo) / width
    if drift_off <= (1.0 - a) or drift_on >= 0.0:
        raise ConfigError("mean device cannot cycle: ambient must sit above and the ON equilibrium below the dead-band")

    cross = np.zeros((2 * B, 2 * B))
    stay = np.zeros((2 * B, 2 * B))
    edges = np.linspace(0.0, 1.0, B + 1)
    for k in range(B):
        # OFF row: warming
        inside, below, above = _overlaps(a * edges[k] + drift_off, a * edges[k + 1] + drift_off, B)
        stay[k, :B] = inside
        cross[k, 0] += below
        cross[k, 2 * B - 1] += above
        # ON row: cooling
        inside, below, above = _overlaps(a * edges[k] + drift_on, a * edges[k + 1] + drift_on, B)
        stay[B + k, B:] = inside
        cross[B + k, 0] += below
        cross[B + k, 2 * B - 1] += above
    model = BinModel(B, np.zeros(2 * B), cross, stay, stats.rated_total)
    model.state = model.stationary()
    return model


def estimate_w_fractions(model: BinModel) -> tuple[float, float]:
    """One-step-ahead fractions of OFF (ON) mass switched by the thermostat."""
    B = model.bin_count
    off = model.state[:B]
    on = model.state[B:]
    to_on = float(off @ model.cross[:B, B:].sum(axis=1))
    to_off = float(on @ model.cross[B:, :B].sum(axis=1))
    off_mass, on_mass = float(off.sum()), float(on.sum())
    w_on = to_on / off_mass if off_mass >= _MASS_FLOOR else 0.0
    w_off = to_off / on_mass if on_mass >= _MASS_FLOOR else 0.0
    return min(max(w_on, 0.0), 1.0), min(max(w_off, 0.0), 1.0)


def expected_aggregate_power(model: BinModel, u) -> float | np.ndarray:
    """Predicted fleet power (kW) one step ahead under command ``u``."""
    u_arr = np.asarray(u, dtype=float)
    if np.any(np.abs(u_arr) > 1.0):
        raise ValueError("command outside [-1, 1]")
    return model.rated_power_total * model.predicted_on_mass(u)


def command_grid(bounds: ConstraintSet, grid_step: float) -> np.ndarray:
    if not grid_step > 0:
        raise ValueError("grid_step must be positive")
    count = int(math.floor((bounds.upper - bounds.lower) / grid_step + 1e-9))
    grid = bounds.lower + grid_step * np.arange(count + 1)
    grid = np.round(grid, 12)
    extra = [bounds.upper]
    if bounds.lower <= 0.0 <= bounds.upper:
        extra.append(0.0)
    return np.unique(np.clip(np.concatenate([grid, extra]), bounds.lower, bounds.upper))


def choose_command(model: BinModel, p_ref: float, bounds: ConstraintSet, grid_step: float = 0.01) -> float:
    """Grid minimizer of ``|E[P_agg](u) - p_ref|`` over the admissible set.

    Ties (within 1e-9 relative) go to the command of smallest magnitude.
    """
    grid = command_grid(bounds, grid_step)
    err = np.abs(expected_aggregate_power(model, grid) - p_ref)
    best = err.min()
    near = grid[err <= best + 1e-9 * max(1.0, abs(p_ref))]
    return float(near[np.argmin(np.abs(near))])


# -- reference signal --------------------------------------------------------


def load_reference_csv(path, dt: float, steps: int) -> np.ndarray:
    """Read a two-column (time_s, p_ref_kW) CSV and zero-order-hold it onto
    ``t_k = k * dt`` for ``k < steps``."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"reference signal file not found: {path}")
    times, values = [], []
    with path.open(newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                t, val = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if times:
                    raise ConfigError(f"malformed reference row {row!r}") from None
                continue  # header
            times.append(t)
            values.append(val)
    if not times:
        raise ConfigError("reference signal file has no data rows")
    times = np.asarray(times)
    values = np.asarray(values)
    if np.any(np.diff(times) <= 0):
        raise ConfigError("reference time stamps must be strictly increasing")
    grid = dt * np.arange(steps)
    if times[0] > 0 or grid[-1] > times[-1]:
        raise ConfigError(f"reference covers [{times[0]}, {times[-1]}] s but the horizon needs [0, {grid[-1]}] s")
    idx = np.searchsorted(times, grid, side="right") - 1
    return values[idx]


def synthetic_regulation_signal(steps: int, dt: float, rng: np.random.Generator,
                                time_constant: float = 300.0) -> np.ndarray:
    """Band-limited random signal in [-1, 1] standing in for a RegD segment.

    A unit-variance AR(1) process with the given correlation time, squashed
    through ``tanh`` so it spends time near both rails the way RegD does.
    """
    phi = math.exp(-dt / time_constant)
    noise = rng.standard_normal(steps)
    out = np.empty(steps)
    level = noise[0]
    for k in range(steps):
        if k:
            level = phi * level + math.sqrt(1.0 - phi * phi) * noise[k]
        out[k] = level
    return np.tanh(1.2 * out)
