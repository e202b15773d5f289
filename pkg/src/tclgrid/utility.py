"""Utility side: certify which broadcast commands keep under-voltage risk low.

Given nodal smart-meter totals and the aggregator's switch-fraction forecasts,
the utility builds a posterior over how many TCLs are ON at each node, draws
Monte-Carlo realizations of next-step network safety for a candidate command,
and accepts the command once a Chernoff-type confidence test certifies that
the safety probability exceeds ``1 - epsilon`` with confidence ``1 - beta``.
Bisection over the command axis then yields the admissible interval.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import special, stats

from .aggregator import ConstraintSet
from .errors import ConfigError, InferenceError
from ._kernels import realizations
from .grid import DEFAULT_MAX_ITER, DEFAULT_TOL, FeederModel, NodalInjection, distflow_batch, lindistflow_squared
from .loads import LoadModel
from .streams import Streams, as_streams

log = logging.getLogger(__name__)


# -- confidence test ----------------------------------------------------------


def chernoff_rate(m_tilde: float, epsilon: float) -> float:
    """``(m+eps) ln(m+eps) - (m+eps-1)``; zero when ``m + eps <= 1``.

    Written as ``(1+x) log1p(x) - x`` with ``x = m + eps - 1`` so it stays
    accurate when ``x`` is small.
    """
    x = m_tilde + epsilon - 1.0
    if x <= 0.0:
        return 0.0
    return (1.0 + x) * math.log1p(x) - x


def required_samples(m_tilde: float, epsilon: float, beta: float) -> float:
    """Sample count the estimate ``m_tilde`` must strictly exceed (``inf`` if none suffices)."""
    rate = chernoff_rate(m_tilde, epsilon)
    if rate <= 0.0:
        return math.inf
    return math.log(1.0 / beta) / rate


def minimal_samples(epsilon: float, beta: float) -> int:
    """Smallest sample count that can ever pass the test (all realizations safe)."""
    return math.floor(required_samples(1.0, epsilon, beta)) + 1


def confidence_test(successes: int, samples: int, epsilon: float, beta: float) -> bool:
    if samples <= 0:
        return False
    m = successes / samples
    return m > 1.0 - epsilon and samples > required_samples(m, epsilon, beta)


def binomial_cdf(k, n, p):
    """``P(Binomial(n, p) <= k)`` via the regularized incomplete beta function."""
    k = np.floor(np.asarray(k, dtype=float))
    n = np.asarray(n, dtype=float)
    p = np.asarray(p, dtype=float)
    with np.errstate(invalid="ignore"):
        inner = special.betainc(np.maximum(n - k, 1e-300), k + 1.0, 1.0 - p)
    out = np.where(k < 0, 0.0, np.where(k >= n, 1.0, inner))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class CertificationResult:
    accepted: bool
    samples_used: int
    m_tilde: float


def certify(draw: Callable[[int, int], int], epsilon: float, beta: float, max_samples: int,
            batch_size: int, workers: int = 1) -> CertificationResult:
    """Sequential batch test.

    ``draw(batch_index, size)`` must return the number of safe realizations
    in that batch and depend only on its arguments.  Batches are consumed in
    index order, so the decision does not depend on ``workers``; extra workers
    only compute upcoming batches speculatively.  A run that could no longer
    pass by ``max_samples`` even with only safe draws is rejected early.
    """
    if batch_size < 1 or max_samples < 1:
        raise ValueError("batch_size and max_samples must be positive")
    sizes = []
    remaining = max_samples
    while remaining > 0:
        sizes.append(min(batch_size, remaining))
        remaining -= sizes[-1]

    successes = used = 0
    hopeless = False

    def consume(count, size):
        nonlocal successes, used, hopeless
        successes += int(count)
        used += size
        if confidence_test(successes, used, epsilon, beta):
            return True
        hopeless = not _can_still_pass(used - successes, max_samples, epsilon, beta)
        return False

    if workers <= 1:
        for b, size in enumerate(sizes):
            if consume(draw(b, size), size):
                return CertificationResult(True, used, successes / used)
            if hopeless:
                break
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for start in range(0, len(sizes), workers):
                window = range(start, min(start + workers, len(sizes)))
                futures = [pool.submit(draw, b, sizes[b]) for b in window]
                for b, fut in zip(window, futures):
                    if consume(fut.result(), sizes[b]):
                        for other in futures:
                            other.cancel()
                        return CertificationResult(True, used, successes / used)
                    if hopeless:
                        for other in futures:
                            other.cancel()
                        return CertificationResult(False, used, successes / used)
    return CertificationResult(False, used, successes / used)


def _can_still_pass(failures: int, max_samples: int, epsilon: float, beta: float) -> bool:
    """Whether the test could still pass by ``max_samples`` if every further draw is safe.

    Passing at ``n`` implies passing at any larger ``n`` with the same failure
    count, so the last boundary decides.  Stopping once this is false never
    changes the decision, only the work.
    """
    return confidence_test(max_samples - failures, max_samples, epsilon, beta)


def bernoulli_stream(nu: float, streams: Streams) -> Callable[[int, int], int]:
    """Synthetic realization source with known safety probability ``nu``."""
    def draw(batch_index, size):
        return int(streams.generator(batch_index).binomial(size, nu))
    return draw


@dataclass(frozen=True)
class AcceptanceStudy:
    epsilon: float
    beta: float
    nu_true: float
    trials: int
    accepted: int
    mean_samples: float
    max_samples: int
    minimal_samples: int

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.trials


def acceptance_study(epsilon: float, beta: float, nu_true: float, trials: int, seed: int = 0,
                   max_samples: int = 100_000, batch_size: int = 2000) -> AcceptanceStudy:
    """Acceptance rate of the test against independent Bernoulli(``nu_true``) streams."""
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    if not 0.0 <= nu_true <= 1.0:
        raise ConfigError("nu_true must lie in [0, 1]")
    from .streams import ACCEPTANCE_STUDY

    base = Streams(seed, (ACCEPTANCE_STUDY,))
    accepted = 0
    samples = 0
    for trial in range(trials):
        res = certify(bernoulli_stream(nu_true, base.child(trial)), epsilon, beta, max_samples, batch_size)
        accepted += res.accepted
        samples += res.samples_used
    return AcceptanceStudy(epsilon, beta, nu_true, trials, accepted, samples / trials, max_samples,
                         minimal_samples(epsilon, beta))


# -- configuration and observation --------------------------------------------


@dataclass(frozen=True)
class SafetyConfig:
    epsilon: float = 0.05
    beta: float = 0.001
    v_floor: float = 0.95
    max_samples: int = 100_000
    batch_size: int = 2000
    bisection_tol: float = 1.0 / 64.0
    use_lindistflow_in_mc: bool = False
    v_ceiling: float | None = None
    workers: int | None = None  # threads for speculative batches; None: all cores

    def __post_init__(self):
        if not 0 < self.epsilon < 1 or not 0 < self.beta < 1:
            raise ConfigError("epsilon and beta must lie in (0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_samples < minimal_samples(self.epsilon, self.beta):
            raise ConfigError(f"max_samples={self.max_samples} cannot certify anything; "
                              f"need at least {minimal_samples(self.epsilon, self.beta)}")
        if not self.bisection_tol > 0:
            raise ConfigError("bisection_tol must be positive")
        if not self.v_floor > 0:
            raise ConfigError("v_floor must be positive")
        if self.v_ceiling is not None and not self.v_ceiling > self.v_floor:
            raise ConfigError("v_ceiling must exceed v_floor")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @classmethod
    def from_dict(cls, data: dict | None) -> "SafetyConfig":
        data = dict(data or {})
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown safety keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def worker_count(self) -> int:
        return self.workers if self.workers is not None else (os.cpu_count() or 1)


@dataclass(frozen=True, eq=False)
class UtilityObservation:
    """What the utility knows at time ``hour`` when certifying the next step.

    Powers are in pu.  ``next_hour`` is the time stamp of the step being
    certified (used for the load forecast).
    """

    measured: NodalInjection
    w_on_hat: np.ndarray
    w_off_hat: np.ndarray
    tcl_counts: np.ndarray
    avg_real: np.ndarray
    avg_reactive: np.ndarray
    hour: float
    next_hour: float

    def __post_init__(self):
        n = self.measured.real_power.shape[0]
        for name in ("w_on_hat", "w_off_hat", "avg_real", "avg_reactive"):
            arr = np.broadcast_to(np.asarray(getattr(self, name), dtype=float), (n,)).copy()
            object.__setattr__(self, name, arr)
        counts = np.asarray(self.tcl_counts, dtype=np.int64)
        if counts.shape != (n,) or np.any(counts < 0):
            raise ConfigError("tcl_counts must be a non-negative vector of length n")
        object.__setattr__(self, "tcl_counts", counts)
        for name in ("w_on_hat", "w_off_hat"):
            w = getattr(self, name)
            if np.any(w < 0) or np.any(w > 1):
                raise ConfigError(f"{name} entries must lie in [0, 1]")


# -- posterior over ON counts -------------------------------------------------


@dataclass(frozen=True, eq=False)
class OnCountPosterior:
    pmf: tuple  # per node, length n_j + 1
    fallback: np.ndarray  # per node: measurement was impossible under the load model

    def cdf_matrix(self) -> np.ndarray:
        """Padded cumulative pmf, shape ``(nodes, max_count + 1)``, rows end at 1."""
        width = max(len(p) for p in self.pmf)
        out = np.ones((len(self.pmf), width))
        for j, p in enumerate(self.pmf):
            c = np.cumsum(p)
            out[j, :len(p)] = c / c[-1]
            out[j, len(p) - 1:] = 1.0
        return out


def posterior_on_counts(obs: UtilityObservation, load, hour: float | None = None) -> OnCountPosterior:
    """Per-node posterior of the ON count given the measured nodal totals.

    Candidate counts ``n = 0..n_j`` are weighted by the load density at the
    residual ``measured - avg * n``.  When no candidate has positive density
    the node collapses onto the candidate nearest the load mean.
    """
    hour = obs.hour if hour is None else hour
    counts = obs.tcl_counts
    n_nodes = counts.shape[0]
    width = int(counts.max(initial=0)) + 1
    cand = np.arange(width)[:, None]
    valid = cand <= counts[None, :]
    res_p = obs.measured.real_power[None, :] - obs.avg_real[None, :] * cand
    res_q = obs.measured.reactive_power[None, :] - obs.avg_reactive[None, :] * cand
    logl = np.where(valid, load.log_density(res_p, res_q, hour), -np.inf)

    pmfs = []
    fallback = np.zeros(n_nodes, dtype=bool)
    for j in range(n_nodes):
        col = logl[: counts[j] + 1, j]
        top = col.max()
        if np.isfinite(top):
            w = np.exp(col - top)
            pmfs.append(w / w.sum())
            continue
        dist = np.asarray(load.mahalanobis(res_p[: counts[j] + 1], res_q[: counts[j] + 1], hour))[:, j]
        if not np.isfinite(dist).any():
            raise InferenceError(f"node {j + 1}: measurement is incompatible with every ON count")
        point = np.zeros(counts[j] + 1)
        point[int(np.nanargmin(dist))] = 1.0
        pmfs.append(point)
        fallback[j] = True
        if counts[j] > 0:
            log.warning("node %d: measurement has zero likelihood; using nearest ON count", j + 1)
    return OnCountPosterior(tuple(pmfs), fallback)


# -- Monte-Carlo realizations -------------------------------------------------


class RealizationSampler:
    """Draws next-step realizations of network safety for a given command."""

    def __init__(self, obs: UtilityObservation, load, config: SafetyConfig, feeder: FeederModel,
                 engine: str = "auto"):
        if feeder.node_count != obs.measured.real_power.shape[0]:
            raise ConfigError("observation and feeder have different node counts")
        if engine == "auto":
            engine = "compiled" if isinstance(load, LoadModel) else "numpy"
        if engine not in ("compiled", "numpy") or (engine == "compiled" and not isinstance(load, LoadModel)):
            raise ConfigError(f"unsupported sampler engine {engine!r} for {type(load).__name__}")
        self.engine = engine
        self.obs = obs
        self.load = load
        self.config = config
        self.feeder = feeder
        self.posterior = posterior_on_counts(obs, load)
        self._cdf = self.posterior.cdf_matrix()
        self._table_key = None
        if engine == "compiled":
            self._kernel_args = self._pack()

    def _pack(self):
        obs, load, feeder = self.obs, self.load, self.feeder
        mp, mq = load.mean(obs.next_hour)
        if load.sigma_fraction > 0:
            lo, hi = load.standard_box(obs.next_hour)
        else:
            lo, hi = -np.inf, np.inf
        sd = load.sigma_fraction
        c = np.ascontiguousarray
        return (
            c(self._cdf), c(obs.tcl_counts), c(obs.w_on_hat), c(obs.w_off_hat), c(obs.avg_real),
            c(obs.avg_reactive), c(mp), c(mq), c(sd * load.nominal_real), c(sd * load.nominal_reactive),
            float(load.correlation), float(lo), float(hi), c(feeder.resistance), c(feeder.reactance),
            c(feeder.parent_index), np.array(feeder.order, dtype=np.intp) - 1, float(feeder.substation_voltage),
        )

    def _switch_table(self, prob: float) -> np.ndarray:
        """``T[k, c] = P(Binomial(k, prob) <= c)`` for every possible eligible count ``k``."""
        if self._table_key != prob:
            top = int(self.obs.tcl_counts.max(initial=0))
            k = np.arange(top + 1)
            table = stats.binom.cdf(k[None, :], k[:, None], prob)
            table[k[:, None] <= k[None, :]] = 1.0
            self._table, self._table_key = np.ascontiguousarray(table), prob
        return self._table

    def voltages(self, u: float, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Min and max nodal voltage per realization; NaN marks a failed power flow."""
        if not -1.0 <= u <= 1.0:
            raise ValueError(f"command {u} outside [-1, 1]")
        if self.engine == "compiled":
            a = self._kernel_args
            max_iter = 1 if self.config.use_lindistflow_in_mc else DEFAULT_MAX_ITER
            direction = int(np.sign(u))
            return realizations(rng, size, *a[:6], direction, self._switch_table(abs(u)), *a[6:], DEFAULT_TOL,
                                max_iter)
        obs = self.obs
        counts = obs.tcl_counts
        # step 1: ON counts now, loads next step
        r = rng.random((size, counts.shape[0]))
        n_on = np.empty((size, counts.shape[0]), dtype=np.int64)
        for j, row in enumerate(self._cdf):
            n_on[:, j] = np.searchsorted(row, r[:, j], side="right")
        n_on = np.minimum(n_on, counts)
        n_off = counts - n_on
        load_p, load_q = self.load.sample(obs.next_hour, size, rng)
        # step 2: forecast thermostat switches, rounded half up
        s_on = np.clip(np.floor(obs.w_on_hat * n_off + 0.5), 0, n_off).astype(np.int64)
        s_off = np.clip(np.floor(obs.w_off_hat * n_on + 0.5), 0, n_on).astype(np.int64)
        # step 3: command response
        zero = np.zeros_like(n_on)
        c_on = rng.binomial(n_off - s_on, u) if u > 0 else zero
        c_off = rng.binomial(n_on - s_off, -u) if u < 0 else zero
        # step 4: ON counts next step and the resulting power flow
        n_next = n_on + s_on - s_off + c_on - c_off
        bad = (n_next < 0) | (n_next > counts)
        if bad.any():
            log.warning("%d sampled ON counts fell outside [0, n_tcl]; switch forecasts are inconsistent",
                        int(bad.sum()))
        p = load_p + obs.avg_real * n_next
        q = load_q + obs.avg_reactive * n_next
        if self.config.use_lindistflow_in_mc:
            v2 = lindistflow_squared(self.feeder, p, q)
            failed = np.any(v2 <= 0, axis=1)
            v = np.sqrt(np.maximum(v2, 0.0))
        else:
            v, _, _, converged, diverged, _ = distflow_batch(self.feeder, p, q)
            failed = diverged | ~converged
        if failed.any():
            log.debug("%d realizations without a power-flow solution counted unsafe", int(failed.sum()))
        vmin = np.where(failed, np.nan, v.min(axis=1))
        vmax = np.where(failed, np.nan, v.max(axis=1))
        return vmin, vmax

    def draw(self, u: float, size: int, rng: np.random.Generator) -> np.ndarray:
        """Under-voltage safety indicators (failed power flows count as unsafe)."""
        vmin, _ = self.voltages(u, size, rng)
        return vmin >= self.config.v_floor  # NaN compares False

    def draw_over(self, u: float, size: int, rng: np.random.Generator) -> np.ndarray:
        _, vmax = self.voltages(u, size, rng)
        return vmax <= self.config.v_ceiling


def sample_x_realization(obs, load, config: SafetyConfig, u: float, feeder: FeederModel,
                         rng: np.random.Generator) -> bool:
    """A single realization of the next-step safety indicator."""
    return bool(RealizationSampler(obs, load, config, feeder).draw(u, 1, rng)[0])


def _probe(sampler: RealizationSampler, u: float, streams: Streams, over: bool = False) -> CertificationResult:
    cfg = sampler.config
    fn = sampler.draw_over if over else sampler.draw

    def draw(batch_index, size):
        return int(np.count_nonzero(fn(u, size, streams.generator(batch_index))))

    return certify(draw, cfg.epsilon, cfg.beta, cfg.max_samples, cfg.batch_size, cfg.worker_count)


def test_command(obs, load, config: SafetyConfig, u: float, feeder: FeederModel, streams,
                 sampler: RealizationSampler | None = None) -> CertificationResult:
    """Certify a single command; ``streams`` supplies one generator per batch."""
    sampler = sampler or RealizationSampler(obs, load, config, feeder)
    return _probe(sampler, u, as_streams(streams))


test_command.__test__ = False  # keep pytest from collecting it


def construct_constraint_set(obs, load, config: SafetyConfig, feeder: FeederModel, streams,
                             sampler: RealizationSampler | None = None) -> ConstraintSet:
    """Largest certified upper bound (and, with ``v_ceiling``, smallest lower bound).

    Every probe draws from its own stream family, so no samples are shared
    between probes.
    """
    sampler = sampler or RealizationSampler(obs, load, config, feeder)
    streams = as_streams(streams)
    probe_id = 0
    total = 0

    def probe(u, over=False):
        nonlocal probe_id, total
        res = _probe(sampler, u, streams.child(probe_id), over)
        probe_id += 1
        total += res.samples_used
        return res

    first = probe(1.0)
    if first.accepted:
        upper, upper_m = 1.0, first.m_tilde
    else:
        bottom = probe(-1.0)
        if not bottom.accepted:
            return ConstraintSet(-1.0, -1.0, infeasible=True, samples_used=total, accepted_m=None,
                                 probes=probe_id)
        lo, hi, upper_m = -1.0, 1.0, bottom.m_tilde
        while hi - lo > config.bisection_tol:
            mid = 0.5 * (lo + hi)
            res = probe(mid)
            if res.accepted:
                lo, upper_m = mid, res.m_tilde
            else:
                hi = mid
        upper = lo

    lower = -1.0
    infeasible = False
    if config.v_ceiling is not None and not probe(-1.0, over=True).accepted:
        # over-voltage risk falls as u grows; find the smallest certified command
        if not probe(upper, over=True).accepted:
            infeasible = True
            lower = upper
        else:
            lo, hi = -1.0, upper
            while hi - lo > config.bisection_tol:
                mid = 0.5 * (lo + hi)
                if probe(mid, over=True).accepted:
                    hi = mid
                else:
                    lo = mid
            lower = hi
    return ConstraintSet(lower, upper, infeasible=infeasible, samples_used=total, accepted_m=upper_m,
                         probes=probe_id)


# -- diagnostics --------------------------------------------------------------


@dataclass(frozen=True)
class CurvePoint:
    u: float
    nu_hat: float
    stderr: float
    n_s: int


def estimate_safety_curve(obs, load, config: SafetyConfig, feeder: FeederModel, u_grid, n_s: int,
                          streams, sampler: RealizationSampler | None = None) -> list[CurvePoint]:
    """Plain Monte-Carlo estimate of the safety probability at each grid point."""
    u_grid = np.asarray(u_grid, dtype=float)
    if n_s < 1:
        raise ConfigError("n_s must be >= 1")
    if u_grid.ndim != 1 or u_grid.size == 0 or np.any(np.diff(u_grid) < 0) or np.any(np.abs(u_grid) > 1):
        raise ConfigError("u_grid must be a sorted, non-empty vector within [-1, 1]")
    sampler = sampler or RealizationSampler(obs, load, config, feeder)
    streams = as_streams(streams)
    out = []
    for k, u in enumerate(u_grid):
        point = streams.child(k)
        safe = 0
        for b, start in enumerate(range(0, n_s, config.batch_size)):
            size = min(config.batch_size, n_s - start)
            safe += int(np.count_nonzero(sampler.draw(float(u), size, point.generator(b))))
        nu = safe / n_s
        out.append(CurvePoint(float(u), nu, math.sqrt(nu * (1.0 - nu) / n_s), n_s))
    return out


def render_curve_csv(points: list[CurvePoint]) -> str:
    lines = ["u,nu_hat,stderr,n_s\n"]
    lines += [f"{p.u!r},{p.nu_hat!r},{p.stderr!r},{p.n_s}\n" for p in points]
    return "".join(lines)


def write_curve_csv(points: list[CurvePoint], path) -> None:
    Path(path).write_text(render_curve_csv(points), encoding="utf-8")


def constraint_record(t: int, cs: ConstraintSet) -> dict:
    return {"t": t, "lower": cs.lower, "upper": cs.upper, "samples_used": cs.samples_used,
            "accepted_m": cs.accepted_m, "infeasible_flag": cs.infeasible}


def write_constraint_log(records, path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
