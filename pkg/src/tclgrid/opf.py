"""Safety-first benchmark: direct per-device mode assignment each step.

The operator chooses every device's next mode to track the reference while a
linearized voltage check at worst-case loads holds.  The voltage check uses
LinDistFlow squared voltages, so each ON device lowers every nodal squared
voltage by a fixed amount and feasibility is monotone: switching more devices
ON never helps.  Small problems are solved exactly by depth-first enumeration
with pruning; larger ones greedily.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import FeederModel
from .tcl import TclPopulation, advance_temperature

EXACT_LIMIT = 20
_TOL = 1e-12


@dataclass(frozen=True)
class Assignment:
    modes: np.ndarray
    power: float
    feasible: bool
    exact: bool


class VoltageBudget:
    """Squared-voltage headroom at worst-case loads, consumed by ON devices."""

    def __init__(self, feeder: FeederModel, load_real_max, load_reactive_max, v_floor: float):
        R, X = feeder.sensitivities
        self._R, self._X = R, X
        base = feeder.substation_voltage ** 2 - 2.0 * (np.asarray(load_real_max) @ R + np.asarray(load_reactive_max) @ X)
        self.headroom = base - v_floor ** 2
        self._feeder = feeder

    def device_drops(self, pop: TclPopulation) -> np.ndarray:
        """Per-device drop in nodal squared voltage when ON, shape ``(devices, n)``."""
        p = self._feeder.kw_to_pu(pop.rated_real)
        q = self._feeder.kw_to_pu(pop.rated_reactive)
        rows = pop.node_index
        return 2.0 * (p[:, None] * self._R[rows] + q[:, None] * self._X[rows])


def mode_bounds(pop: TclPopulation) -> tuple[np.ndarray, np.ndarray]:
    """Which devices must be ON / must be OFF for the next step.

    Thermostat limits force devices outside the dead-band; in-band devices are
    also forced when the other mode would carry them out of the band by the
    next step.
    """
    a = pop.a_th
    hot = pop.temperature >= pop.upper
    cold = pop.temperature <= pop.lower
    stay_off = a * pop.temperature + (1 - a) * pop.ambient_temp
    stay_on = a * pop.temperature + (1 - a) * (pop.ambient_temp + pop.thermal_resistance * pop.transfer_rate)
    must_on = hot | (~cold & (stay_off > pop.upper))
    must_off = (cold | (~hot & (stay_on < pop.lower))) & ~must_on
    return must_on, must_off


def assign_modes(power: np.ndarray, drops: np.ndarray, headroom: np.ndarray, must_on: np.ndarray,
                 free_order: np.ndarray, p_ref: float, exact_limit: int = EXACT_LIMIT) -> Assignment:
    """Pick ON devices among ``free_order`` minimizing ``|sum(power*on) - p_ref|``.

    ``free_order`` lists the switchable devices in greedy priority order.
    """
    modes = must_on.copy()
    used = drops[must_on].sum(axis=0)
    if np.any(used > headroom + _TOL):
        return Assignment(np.zeros_like(modes), 0.0, False, True)
    base = float(power[must_on].sum())
    if free_order.size <= exact_limit:
        chosen = _enumerate(power[free_order], drops[free_order], headroom - used, p_ref - base)
        modes[free_order[chosen]] = True
        return Assignment(modes, float(power[modes].sum()), True, True)
    total = base
    for i in free_order:
        if abs(total + power[i] - p_ref) < abs(total - p_ref) and np.all(used + drops[i] <= headroom + _TOL):
            modes[i] = True
            total += power[i]
            used = used + drops[i]
    return Assignment(modes, float(power[modes].sum()), True, False)


def _enumerate(power, drops, headroom, target) -> np.ndarray:
    """Exact subset choice by depth-first search.

    Devices are visited largest first; a branch is cut when it breaks the
    voltage budget or when its power already overshoots the target by more
    than the best error found (adding devices only adds power).
    """
    k = power.size
    order = np.argsort(-power, kind="stable")
    pw = power[order]
    dr = drops[order]
    rest = np.concatenate([np.cumsum(pw[::-1])[::-1], [0.0]])
    same_as_prev = np.zeros(k, dtype=bool)
    same_as_prev[1:] = (pw[1:] == pw[:-1]) & np.all(dr[1:] == dr[:-1], axis=1)
    best_err = abs(target)
    best_set: list[int] = []
    current: list[int] = []

    def visit(idx, total, used, skipped_prev):
        nonlocal best_err, best_set
        err = abs(total - target)
        if err < best_err - _TOL:
            best_err, best_set = err, list(current)
        if (idx == k or best_err <= _TOL or total - target >= best_err
                or total + rest[idx] <= target - best_err):
            return
        # an identical device was just left out: taking this one instead
        # would only repeat an explored branch
        if not (skipped_prev and same_as_prev[idx]):
            new_used = used + dr[idx]
            if np.all(new_used <= headroom + _TOL):
                current.append(idx)
                visit(idx + 1, total + pw[idx], new_used, False)
                current.pop()
        visit(idx + 1, total, used, True)

    visit(0, 0.0, np.zeros(drops.shape[1]), False)
    mask = np.zeros(k, dtype=bool)
    mask[order[best_set]] = True
    return mask


def opf_step(pop: TclPopulation, budget: VoltageBudget, p_ref: float,
             exact_limit: int = EXACT_LIMIT) -> Assignment:
    """Advance temperatures and set the benchmark's modes in place."""
    advance_temperature(pop)
    must_on, must_off = mode_bounds(pop)
    free = np.flatnonzero(~must_on & ~must_off)
    # closest to the upper limit first
    free = free[np.argsort((pop.upper - pop.temperature)[free], kind="stable")]
    drops = budget.device_drops(pop)
    result = assign_modes(pop.rated_real, drops, budget.headroom, must_on, free, p_ref, exact_limit)
    pop.mode = result.modes.astype(np.int8)
    return result
