"""Radial feeder model and DistFlow / LinDistFlow voltage solvers.

Nodes are labelled ``1..n``; node ``0`` is the substation.  Branch ``j`` is the
branch whose receiving end is node ``j``, so branch quantities share the node
indexing.  Internally everything is stored 0-based (label ``j`` -> row
``j - 1``).

Both solvers have a batched form working on ``(samples, n)`` arrays, which the
Monte-Carlo certification relies on.  The batched DistFlow sweep is written in
matrix form: with ``D[j, k] = 1`` when ``k`` is in the subtree of ``j``
(including ``j``), the backward pass is ``P = (p + r*l) @ D.T`` and the
forward pass is ``v^2 = v0^2 - (2(rP + xQ) - |z|^2 l) @ D``.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

from ._kernels import sweep
from .errors import ConfigError, DivergenceError, FeederError, InfeasibleLinearizationError, NotConvergedError

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 50


def _readonly(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class FeederModel:
    """Radial distribution feeder in per-unit.

    ``parent[j-1]`` is the parent label of node ``j`` (0 for the substation).
    ``nominal_real`` / ``nominal_reactive`` are optional nominal uncontrollable
    loads per node (pu) carried along with synthetic or loaded feeders.
    """

    parent: tuple[int, ...]
    resistance: np.ndarray
    reactance: np.ndarray
    substation_voltage: float = 1.0
    base_mva: float = 1.0
    base_kv: float = 12.35
    nominal_real: np.ndarray | None = field(default=None)
    nominal_reactive: np.ndarray | None = field(default=None)

    def __post_init__(self):
        parent = tuple(int(k) for k in self.parent)
        n = len(parent)
        if n == 0:
            raise FeederError("feeder needs at least one node")
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "resistance", _readonly(self.resistance))
        object.__setattr__(self, "reactance", _readonly(self.reactance))
        if self.resistance.shape != (n,) or self.reactance.shape != (n,):
            raise FeederError("resistance/reactance must have one entry per node")
        if not (np.all(self.resistance > 0) and np.all(self.reactance > 0)):
            raise FeederError("branch resistance and reactance must be strictly positive")
        if not self.substation_voltage > 0:
            raise FeederError("substation voltage must be positive")
        for name in ("nominal_real", "nominal_reactive"):
            val = getattr(self, name)
            if val is not None:
                arr = _readonly(val)
                if arr.shape != (n,):
                    raise FeederError(f"{name} must have one entry per node")
                object.__setattr__(self, name, arr)
        # tree check: every node walks to the root without revisiting
        for j in range(1, n + 1):
            seen = set()
            k = j
            while k != 0:
                if not 0 <= parent[k - 1] <= n or parent[k - 1] == k:
                    raise FeederError(f"node {k} has invalid parent {parent[k - 1]}")
                if k in seen:
                    raise FeederError(f"cycle through node {k}")
                seen.add(k)
                k = parent[k - 1]

    @property
    def node_count(self) -> int:
        return len(self.parent)

    @cached_property
    def children(self) -> dict[int, tuple[int, ...]]:
        out: dict[int, list[int]] = {j: [] for j in range(self.node_count + 1)}
        for j, par in enumerate(self.parent, start=1):
            out[par].append(j)
        return {j: tuple(c) for j, c in out.items()}

    @cached_property
    def order(self) -> tuple[int, ...]:
        """Node labels in breadth-first order from the substation."""
        seq = []
        queue = deque(self.children[0])
        while queue:
            j = queue.popleft()
            seq.append(j)
            queue.extend(self.children[j])
        return tuple(seq)

    @cached_property
    def parent_index(self) -> np.ndarray:
        idx = np.array(self.parent, dtype=np.intp) - 1
        idx.setflags(write=False)
        return idx

    @cached_property
    def descendant_matrix(self) -> np.ndarray:
        """``D[j-1, k-1] = 1`` iff ``k`` is in the subtree rooted at ``j``."""
        n = self.node_count
        D = np.zeros((n, n))
        for k in range(1, n + 1):
            j = k
            while j != 0:
                D[j - 1, k - 1] = 1.0
                j = self.parent[j - 1]
        D.setflags(write=False)
        return D

    def ancestors(self, j: int) -> frozenset[int]:
        """Branches on the path from the substation to ``j`` (including ``j``)."""
        return frozenset(int(k) + 1 for k in np.flatnonzero(self.descendant_matrix[:, j - 1]))

    def descendants(self, j: int) -> frozenset[int]:
        """Nodes in the subtree of ``j`` (including ``j``)."""
        return frozenset(int(k) + 1 for k in np.flatnonzero(self.descendant_matrix[j - 1]))

    @cached_property
    def sensitivities(self) -> tuple[np.ndarray, np.ndarray]:
        """LinDistFlow squared-voltage sensitivities ``(R, X)``.

        ``v^2 = v0^2 - 2 (p @ R + q @ X)`` with ``R[l, j]`` the summed resistance
        of the branches shared by the paths to ``l`` and ``j``.
        """
        D = self.descendant_matrix
        R = D.T @ (self.resistance[:, None] * D)
        X = D.T @ (self.reactance[:, None] * D)
        R.setflags(write=False)
        X.setflags(write=False)
        return R, X

    def kw_to_pu(self, value):
        return np.asarray(value, dtype=float) / (self.base_mva * 1000.0)

    def pu_to_kw(self, value):
        return np.asarray(value, dtype=float) * (self.base_mva * 1000.0)

    def with_impedance_scale(self, scale: float) -> "FeederModel":
        return FeederModel(
            self.parent,
            self.resistance * scale,
            self.reactance * scale,
            self.substation_voltage,
            self.base_mva,
            self.base_kv,
            self.nominal_real,
            self.nominal_reactive,
        )


@dataclass(frozen=True)
class NodalInjection:
    """Per-node real / reactive consumption (positive = load)."""

    real_power: np.ndarray
    reactive_power: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.real_power, dtype=float)
        q = np.asarray(self.reactive_power, dtype=float)
        if p.ndim != 1 or p.shape != q.shape:
            raise ValueError("real and reactive power must be 1-d vectors of equal length")
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
            raise ValueError("injections must be finite")
        object.__setattr__(self, "real_power", p)
        object.__setattr__(self, "reactive_power", q)

    @classmethod
    def zeros(cls, n: int) -> "NodalInjection":
        return cls(np.zeros(n), np.zeros(n))


@dataclass(frozen=True)
class VoltageSolution:
    voltage: np.ndarray
    branch_real: np.ndarray
    branch_reactive: np.ndarray
    converged: bool
    iterations: int

    @property
    def min_voltage(self) -> float:
        return float(np.min(self.voltage))


def _check_injection(feeder: FeederModel, inj: NodalInjection):
    if inj.real_power.shape != (feeder.node_count,):
        raise ValueError(f"injection length {inj.real_power.shape[0]} != node count {feeder.node_count}")


def distflow_batch(feeder: FeederModel, p, q, tol: float = DEFAULT_TOL, max_iter: int = DEFAULT_MAX_ITER,
                   method: str = "sweep"):
    """Backward-forward sweep for a batch of injections.

    ``p`` and ``q`` are ``(samples, n)`` in pu.  Returns ``(v, P, Q, converged,
    diverged, iterations)``; rows flagged ``diverged`` hit a non-positive
    squared voltage and their values are meaningless.  ``method="sweep"``
    runs the compiled node-by-node kernel, ``"matrix"`` the numpy matrix form.
    """
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol must be > 0 and max_iter >= 1")
    if method == "sweep":
        p = np.ascontiguousarray(np.array(p, dtype=float, ndmin=2))
        q = np.ascontiguousarray(np.array(q, dtype=float, ndmin=2))
        order = np.array(feeder.order, dtype=np.intp) - 1
        return sweep(p, q, np.asarray(feeder.resistance), np.asarray(feeder.reactance),
                     np.asarray(feeder.parent_index), order, float(feeder.substation_voltage), tol, max_iter)
    if method != "matrix":
        raise ValueError(f"unknown method {method!r}")
    p = np.array(p, dtype=float, ndmin=2)
    q = np.array(q, dtype=float, ndmin=2)
    S, n = p.shape
    D = feeder.descendant_matrix
    DT = D.T
    r, x = feeder.resistance, feeder.reactance
    z2 = r * r + x * x
    v02 = feeder.substation_voltage ** 2
    par = feeder.parent_index
    at_root = par < 0
    par_safe = np.where(at_root, 0, par)

    ell = np.zeros((S, n))
    v = np.full((S, n), feeder.substation_voltage)
    diverged = np.zeros(S, dtype=bool)
    converged = np.zeros(S, dtype=bool)
    P = Q = np.zeros((S, n))
    iterations = 0
    for it in range(1, max_iter + 1):
        iterations = it
        P = (p + r * ell) @ DT
        Q = (q + x * ell) @ DT
        v2 = v02 - (2.0 * (r * P + x * Q) - z2 * ell) @ D
        bad = np.any(v2 <= 0.0, axis=1)
        if bad.any():
            diverged |= bad
            # park diverged rows on a benign no-load state
            p[bad] = 0.0
            q[bad] = 0.0
            ell[bad] = 0.0
            v2[bad] = v02
        v_new = np.sqrt(v2)
        delta = np.max(np.abs(v_new - v), axis=1)
        v = v_new
        vpar2 = np.where(at_root, v02, v2[:, par_safe])
        ell = (P * P + Q * Q) / vpar2
        converged = (delta < tol) & ~diverged
        if np.all(converged | diverged):
            break
    return v, P, Q, converged, diverged, iterations


def solve_distflow(feeder: FeederModel, inj: NodalInjection, tol: float = DEFAULT_TOL,
                   max_iter: int = DEFAULT_MAX_ITER) -> VoltageSolution:
    """Exact DistFlow solution by backward-forward sweep.

    Branch losses use the squared current ``l_j = (P_j^2 + Q_j^2) / v_{e(j)}^2``
    where ``P_j`` is the sending-end flow on branch ``j``.
    Raises :class:`DivergenceError` naming the first node whose squared voltage
    turned non-positive.
    """
    _check_injection(feeder, inj)
    p = inj.real_power[None, :]
    q = inj.reactive_power[None, :]
    v, P, Q, conv, div, its = distflow_batch(feeder, p, q, tol, max_iter)
    if div[0]:
        # re-run unbatched to name the collapsing node
        node = _first_collapse(feeder, inj, tol, max_iter)
        raise DivergenceError(f"voltage collapse at node {node}", node=node)
    return VoltageSolution(v[0], P[0], Q[0], bool(conv[0]), its)


def _first_collapse(feeder, inj, tol, max_iter) -> int:
    r, x = feeder.resistance, feeder.reactance
    D = feeder.descendant_matrix
    z2 = r * r + x * x
    v02 = feeder.substation_voltage ** 2
    par = feeder.parent_index
    ell = np.zeros(feeder.node_count)
    for _ in range(max_iter):
        P = D @ (inj.real_power + r * ell)
        Q = D @ (inj.reactive_power + x * ell)
        v2 = v02 - D.T @ (2.0 * (r * P + x * Q) - z2 * ell)
        bad = np.flatnonzero(v2 <= 0.0)
        if bad.size:
            # report the collapsing node closest to the substation
            order = {j: i for i, j in enumerate(feeder.order)}
            return min((int(k) + 1 for k in bad), key=order.__getitem__)
        vpar2 = np.where(par < 0, v02, v2[np.where(par < 0, 0, par)])
        ell = (P * P + Q * Q) / vpar2
    return -1


def lindistflow_squared(feeder: FeederModel, p, q) -> np.ndarray:
    """Closed-form LinDistFlow squared voltages for a batch ``(samples, n)``."""
    R, X = feeder.sensitivities
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    return feeder.substation_voltage ** 2 - 2.0 * (p @ R + q @ X)


def solve_lindistflow(feeder: FeederModel, inj: NodalInjection) -> VoltageSolution:
    """LinDistFlow: descendant-sum branch flows, ancestor-sum voltage drops."""
    _check_injection(feeder, inj)
    D = feeder.descendant_matrix
    P = D @ inj.real_power
    Q = D @ inj.reactive_power
    v2 = feeder.substation_voltage ** 2 - D.T @ (2.0 * (feeder.resistance * P + feeder.reactance * Q))
    bad = np.flatnonzero(v2 <= 0.0)
    if bad.size:
        raise InfeasibleLinearizationError(f"non-positive squared voltage at node {bad[0] + 1}", node=int(bad[0]) + 1)
    return VoltageSolution(np.sqrt(v2), P, Q, True, 1)


def min_voltage_safe(sol: VoltageSolution, v_floor: float) -> bool:
    """Under-voltage safety indicator: ``min_j v_j >= v_floor`` (inclusive)."""
    if not sol.converged:
        raise NotConvergedError("safety indicator needs a converged power-flow solution")
    return bool(np.min(sol.voltage) >= v_floor)


def distflow_residuals(feeder: FeederModel, inj: NodalInjection, sol: VoltageSolution) -> np.ndarray:
    """Residuals of the three DistFlow equations at ``sol`` (stacked)."""
    r, x = feeder.resistance, feeder.reactance
    v02 = feeder.substation_voltage ** 2
    par = feeder.parent_index
    P, Q, v = sol.branch_real, sol.branch_reactive, sol.voltage
    vpar2 = np.where(par < 0, v02, (v ** 2)[np.where(par < 0, 0, par)])
    ell = (P * P + Q * Q) / vpar2
    child_P = np.zeros_like(P)
    child_Q = np.zeros_like(Q)
    for j, k in enumerate(par):
        if k >= 0:
            child_P[k] += P[j]
            child_Q[k] += Q[j]
    res_p = P - child_P - inj.real_power - r * ell
    res_q = Q - child_Q - inj.reactive_power - x * ell
    res_v = v ** 2 - (vpar2 - 2.0 * (r * P + x * Q) + (r * r + x * x) * ell)
    return np.concatenate([res_p, res_q, res_v])


# ---------------------------------------------------------------------------
# feeder files


def feeder_from_dict(data: dict) -> FeederModel:
    """Build a feeder from ``{nodes, branches: [{from, to, r, x}], v0, bases}``.

    Branch orientation in the file is irrelevant; the tree is oriented from the
    substation by breadth-first search.  Optional ``loads: [{node, p, q}]`` gives
    nominal uncontrollable loads in pu.
    """
    try:
        nodes = data["nodes"]
        n = int(nodes) if not isinstance(nodes, list) else len(nodes)
        if isinstance(nodes, list) and sorted(int(k) for k in nodes) != list(range(1, n + 1)):
            raise FeederError("node labels must be 1..n")
        branches = data["branches"]
    except (KeyError, TypeError) as exc:
        raise FeederError(f"feeder file missing field: {exc}") from None
    if len(branches) != n:
        raise FeederError(f"radial feeder with {n} nodes needs exactly {n} branches, got {len(branches)}")
    adj: dict[int, list[tuple[int, float, float]]] = {j: [] for j in range(n + 1)}
    for b in branches:
        a, c = int(b["from"]), int(b["to"])
        if not (0 <= a <= n and 0 <= c <= n) or a == c:
            raise FeederError(f"branch {a}->{c} references an unknown node")
        adj[a].append((c, float(b["r"]), float(b["x"])))
        adj[c].append((a, float(b["r"]), float(b["x"])))
    parent = [-1] * n
    r = np.zeros(n)
    x = np.zeros(n)
    seen = {0}
    queue = deque([0])
    while queue:
        j = queue.popleft()
        for k, rk, xk in adj[j]:
            if k in seen:
                continue
            seen.add(k)
            parent[k - 1] = j
            r[k - 1], x[k - 1] = rk, xk
            queue.append(k)
    # n + 1 vertices and n edges: connected <=> acyclic
    if len(seen) != n + 1:
        raise FeederError("feeder graph has a cycle or is not connected to the substation")
    bases = data.get("bases", {}) or {}
    p_nom = q_nom = None
    if data.get("loads"):
        p_nom = np.zeros(n)
        q_nom = np.zeros(n)
        for rec in data["loads"]:
            p_nom[int(rec["node"]) - 1] = float(rec["p"])
            q_nom[int(rec["node"]) - 1] = float(rec["q"])
    return FeederModel(
        tuple(parent), r, x,
        substation_voltage=float(data.get("v0", 1.0)),
        base_mva=float(bases.get("mva", 1.0)),
        base_kv=float(bases.get("kv", 12.35)),
        nominal_real=p_nom,
        nominal_reactive=q_nom,
    )


def feeder_to_dict(feeder: FeederModel) -> dict:
    out = {
        "nodes": feeder.node_count,
        "branches": [
            {"from": int(feeder.parent[j]), "to": j + 1, "r": float(feeder.resistance[j]), "x": float(feeder.reactance[j])}
            for j in range(feeder.node_count)
        ],
        "v0": float(feeder.substation_voltage),
        "bases": {"mva": float(feeder.base_mva), "kv": float(feeder.base_kv)},
    }
    if feeder.nominal_real is not None:
        out["loads"] = [
            {"node": j + 1, "p": float(feeder.nominal_real[j]), "q": float(feeder.nominal_reactive[j])}
            for j in range(feeder.node_count)
        ]
    return out


def load_feeder(path) -> FeederModel:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"feeder file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"feeder file is not valid JSON: {exc}") from None
    return feeder_from_dict(data)


def save_feeder(feeder: FeederModel, path) -> None:
    Path(path).write_text(json.dumps(feeder_to_dict(feeder), indent=2) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic feeders

SHAPES = ("chain", "star", "binary", "branched")


def _tree_parents(shape: str, n: int, rng: np.random.Generator) -> list[int]:
    if shape == "chain":
        return list(range(n))
    if shape == "star":
        return [0] * n
    if shape == "binary":
        return [j // 2 for j in range(1, n + 1)]
    if shape == "branched":
        trunk = max(1, (n + 1) // 2)
        parents = list(range(trunk))
        for j in range(trunk + 1, n + 1):
            # laterals hang off the trunk or off earlier laterals
            parents.append(int(rng.integers(1, j)))
        return parents
    raise ConfigError(f"unknown feeder shape {shape!r}; expected one of {SHAPES}")


def generate_feeder(
    shape: str = "branched",
    node_count: int = 8,
    seed: int = 0,
    r_range: tuple[float, float] = (0.004, 0.012),
    x_ratio_range: tuple[float, float] = (0.6, 1.2),
    load_range: tuple[float, float] = (0.3, 0.9),
    power_factor: float = 0.95,
    v0: float = 1.0,
    base_mva: float = 1.0,
    base_kv: float = 12.35,
) -> FeederModel:
    """Random radial feeder with nominal loads.

    Branch resistance is uniform on ``r_range`` (pu), reactance is the
    resistance times a ratio uniform on ``x_ratio_range``; nominal real load
    per node is uniform on ``load_range`` (pu) with reactive load from the
    given power factor.
    """
    if node_count < 1:
        raise ConfigError("node_count must be >= 1")
    for lo, hi in (r_range, x_ratio_range, load_range):
        if not 0 < lo <= hi:
            raise ConfigError("ranges must satisfy 0 < low <= high")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(7,)))
    parents = _tree_parents(shape, node_count, rng)
    r = rng.uniform(*r_range, size=node_count)
    x = r * rng.uniform(*x_ratio_range, size=node_count)
    p_nom = rng.uniform(*load_range, size=node_count)
    q_nom = p_nom * math.tan(math.acos(power_factor))
    return FeederModel(tuple(parents), r, x, v0, base_mva, base_kv, p_nom, q_nom)


def scale_to_min_voltage(feeder: FeederModel, load_multiplier: float, target: float,
                         extra_real=None, extra_reactive=None, tol: float = 1e-9) -> FeederModel:
    """Rescale all branch impedances so the DistFlow minimum voltage under
    ``load_multiplier * nominal (+ extra)`` equals ``target``.

    Minimum voltage decreases monotonically in the impedance scale for
    non-negative loading, so plain bisection on the scale is enough.
    """
    if feeder.nominal_real is None:
        raise ConfigError("feeder has no nominal loads to scale against")
    if not 0 < target < feeder.substation_voltage:
        raise ConfigError("target voltage must lie in (0, v0)")
    p = load_multiplier * feeder.nominal_real
    q = load_multiplier * feeder.nominal_reactive
    if extra_real is not None:
        p = p + np.asarray(extra_real)
        q = q + np.asarray(extra_reactive)

    def vmin(scale: float) -> float:
        v, _, _, conv, div, _ = distflow_batch(feeder.with_impedance_scale(scale), p, q)
        return 0.0 if div[0] else float(v[0].min())

    lo, hi = 0.0, 1.0
    while vmin(hi) > target:
        hi *= 2.0
        if hi > 1e6:
            raise ConfigError("cannot reach the target voltage: loads are too small")
    while hi - lo > tol * max(hi, 1.0):
        mid = 0.5 * (lo + hi)
        if vmin(mid) > target:
            lo = mid
        else:
            hi = mid
    return feeder.with_impedance_scale(0.5 * (lo + hi))
