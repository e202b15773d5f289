"""Uncontrollable (non-TCL) nodal load models.

Two interchangeable models expose the same interface:

* :class:`LoadModel` is a per-node bivariate normal over (real, reactive)
  consumption, truncated to a box, with a time-of-day mean multiplier.
* :class:`DiscreteLoadModel` puts mass on a finite set of (real, reactive)
  points per node; it is used for exact enumeration studies.

Loads are independent across nodes and across time steps.  Powers are in pu.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, stats

from .errors import ConfigError

# (hour, multiplier) knots of the default afternoon peak
DEFAULT_PROFILE = ((13.0, 0.5), (13.9, 0.65), (14.1, 0.65), (15.0, 0.5))

_LOG_ZERO = -np.inf


def profile_multiplier(profile, hour):
    """Piecewise-linear interpolation of the mean multiplier, held flat outside the knots."""
    hours, values = zip(*profile)
    return np.interp(hour, hours, values)


@dataclass(frozen=True, eq=False)
class LoadModel:
    nominal_real: np.ndarray
    nominal_reactive: np.ndarray
    profile: tuple = DEFAULT_PROFILE
    sigma_fraction: float = 0.15
    truncation: tuple[float, float] = (-0.25, 0.675)
    correlation: float = 0.8
    _norm_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        p = np.array(self.nominal_real, dtype=float)
        q = np.array(self.nominal_reactive, dtype=float)
        if p.shape != q.shape or p.ndim != 1:
            raise ConfigError("nominal load vectors must be 1-D of equal length")
        if np.any(p < 0) or np.any(q < 0) or not (np.isfinite(p).all() and np.isfinite(q).all()):
            raise ConfigError("nominal loads must be finite and non-negative")
        if not self.sigma_fraction >= 0:
            raise ConfigError("sigma_fraction must be non-negative")
        if not -1.0 < self.correlation < 1.0:
            raise ConfigError("correlation must lie strictly inside (-1, 1)")
        lo, hi = self.truncation
        if not lo < hi:
            raise ConfigError("truncation interval must be non-empty")
        knots = tuple((float(h), float(m)) for h, m in self.profile)
        if len(knots) < 1 or any(b[0] <= a[0] for a, b in zip(knots, knots[1:])):
            raise ConfigError("profile hours must be strictly increasing")
        if any(not lo <= m <= hi for _, m in knots):
            raise ConfigError("truncation interval must contain every mean multiplier")
        p.setflags(write=False)
        q.setflags(write=False)
        object.__setattr__(self, "nominal_real", p)
        object.__setattr__(self, "nominal_reactive", q)
        object.__setattr__(self, "profile", knots)

    @property
    def node_count(self) -> int:
        return self.nominal_real.shape[0]

    def multiplier(self, hour: float) -> float:
        return float(profile_multiplier(self.profile, hour))

    def mean(self, hour: float) -> tuple[np.ndarray, np.ndarray]:
        mu = self.multiplier(hour)
        return mu * self.nominal_real, mu * self.nominal_reactive

    @property
    def upper_real(self) -> np.ndarray:
        return self.truncation[1] * self.nominal_real

    @property
    def upper_reactive(self) -> np.ndarray:
        return self.truncation[1] * self.nominal_reactive

    # Every node shares the same box and mean once standardized by its own
    # nominal load, so the truncation mass depends on the hour only.
    def standard_box(self, hour: float) -> tuple[float, float]:
        mu = self.multiplier(hour)
        lo, hi = self.truncation
        return (lo - mu) / self.sigma_fraction, (hi - mu) / self.sigma_fraction

    def truncation_mass(self, hour: float) -> float:
        """Probability the untruncated normal lands inside the box."""
        key = round(self.multiplier(hour), 15)
        if key not in self._norm_cache:
            if self.sigma_fraction == 0:
                self._norm_cache[key] = 1.0
            else:
                a, b = self.standard_box(hour)
                cov = [[1.0, self.correlation], [self.correlation, 1.0]]
                self._norm_cache[key] = float(stats.multivariate_normal.cdf(
                    [b, b], mean=[0.0, 0.0], cov=cov, abseps=1e-12, releps=1e-12, lower_limit=[a, a]))
        return self._norm_cache[key]

    def normalization_error(self, hour: float) -> float:
        """|1 - integral of the truncated density|, integrated by quadrature."""
        if self.sigma_fraction == 0:
            return 0.0
        a, b = self.standard_box(hour)
        rho = self.correlation
        c = 1.0 / (2.0 * math.pi * math.sqrt(1.0 - rho * rho))

        def pdf(y, x):
            return c * math.exp(-(x * x - 2 * rho * x * y + y * y) / (2.0 * (1.0 - rho * rho)))

        mass, _ = integrate.dblquad(pdf, a, b, a, b, epsabs=1e-12, epsrel=1e-12)
        return abs(1.0 - mass / self.truncation_mass(hour))

    def log_density(self, real, reactive, hour: float) -> np.ndarray:
        """Log of the truncated joint density per node; ``-inf`` outside the box.

        ``real`` and ``reactive`` broadcast against the node axis (last axis).
        Nodes with zero nominal load (or zero spread) are point masses: the
        log-density is 0 at the mean and ``-inf`` elsewhere.
        """
        real = np.asarray(real, dtype=float)
        reactive = np.asarray(reactive, dtype=float)
        mp, mq = self.mean(hour)
        sp = self.sigma_fraction * self.nominal_real
        sq = self.sigma_fraction * self.nominal_reactive
        lo, hi = self.truncation
        out = np.full(np.broadcast(real, reactive, mp).shape, _LOG_ZERO)
        degenerate = (sp == 0) | (sq == 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            zp = (real - mp) / sp
            zq = (reactive - mq) / sq
            rho = self.correlation
            quad = (zp * zp - 2 * rho * zp * zq + zq * zq) / (1.0 - rho * rho)
            logc = -np.log(2 * np.pi * sp * sq * math.sqrt(1 - rho * rho)) - math.log(self.truncation_mass(hour))
            value = -0.5 * quad + logc
        inside = ((real >= lo * self.nominal_real) & (real <= hi * self.nominal_real)
                  & (reactive >= lo * self.nominal_reactive) & (reactive <= hi * self.nominal_reactive))
        out = np.where(inside & ~degenerate, value, out)
        exact = _close(real, mp) & _close(reactive, mq)
        return np.where(degenerate & exact, 0.0, out)

    def mahalanobis(self, real, reactive, hour: float) -> np.ndarray:
        """Squared distance to the untruncated mean (Euclidean where the spread is zero)."""
        mp, mq = self.mean(hour)
        sp = self.sigma_fraction * self.nominal_real
        sq = self.sigma_fraction * self.nominal_reactive
        dp = np.asarray(real, dtype=float) - mp
        dq = np.asarray(reactive, dtype=float) - mq
        with np.errstate(divide="ignore", invalid="ignore"):
            zp, zq = dp / sp, dq / sq
            rho = self.correlation
            d = (zp * zp - 2 * rho * zp * zq + zq * zq) / (1 - rho * rho)
        return np.where((sp == 0) | (sq == 0), dp * dp + dq * dq, d)

    def sample(self, hour: float, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Independent draws of shape ``(size, node_count)`` by rejection."""
        n = self.node_count
        mp, mq = self.mean(hour)
        if self.sigma_fraction == 0:
            return np.broadcast_to(mp, (size, n)).copy(), np.broadcast_to(mq, (size, n)).copy()
        a, b = self.standard_box(hour)
        need = size * n
        rho = self.correlation
        s = math.sqrt(1.0 - rho * rho)
        accept_rate = self.truncation_mass(hour)
        first, second = [], []
        have = 0
        while have < need:
            m = int((need - have) / accept_rate * 1.05) + 64
            z0 = rng.standard_normal(m)
            z1 = rng.standard_normal(m)
            z1 *= s
            z1 += rho * z0
            ok = (z0 >= a) & (z0 <= b) & (z1 >= a) & (z1 <= b)
            first.append(z0[ok])
            second.append(z1[ok])
            have += first[-1].shape[0]
        z0 = np.concatenate(first)[:need].reshape(size, n)
        z1 = np.concatenate(second)[:need].reshape(size, n)
        real = mp + self.sigma_fraction * self.nominal_real * z0
        reactive = mq + self.sigma_fraction * self.nominal_reactive * z1
        return real, reactive


def _close(a, b):
    return np.abs(a - b) <= 1e-12 * (1.0 + np.abs(b))


@dataclass(frozen=True, eq=False)
class DiscreteLoadModel:
    """Finite-support load model: ``support[j]`` is a list of (real, reactive, prob).

    The support is the same at every hour.
    """

    support: tuple

    def __post_init__(self):
        cleaned = []
        for j, points in enumerate(self.support):
            arr = np.array(points, dtype=float).reshape(-1, 3)
            if arr.shape[0] == 0 or np.any(arr[:, 2] < 0) or not math.isclose(arr[:, 2].sum(), 1.0, abs_tol=1e-12):
                raise ConfigError(f"node {j + 1}: support probabilities must be non-negative and sum to 1")
            arr.setflags(write=False)
            cleaned.append(arr)
        object.__setattr__(self, "support", tuple(cleaned))

    @property
    def node_count(self) -> int:
        return len(self.support)

    @property
    def upper_real(self) -> np.ndarray:
        return np.array([s[:, 0].max() for s in self.support])

    @property
    def upper_reactive(self) -> np.ndarray:
        return np.array([s[:, 1].max() for s in self.support])

    def mean(self, hour: float) -> tuple[np.ndarray, np.ndarray]:
        return (np.array([s[:, 0] @ s[:, 2] for s in self.support]),
                np.array([s[:, 1] @ s[:, 2] for s in self.support]))

    def log_density(self, real, reactive, hour: float) -> np.ndarray:
        """Log probability mass of the exact point (``-inf`` off the support)."""
        real = np.asarray(real, dtype=float)
        reactive = np.asarray(reactive, dtype=float)
        shape = np.broadcast(real, reactive, np.zeros(self.node_count)).shape
        real = np.broadcast_to(real, shape)
        reactive = np.broadcast_to(reactive, shape)
        out = np.full(shape, _LOG_ZERO)
        for j, s in enumerate(self.support):
            mass = np.zeros(shape[:-1])
            for p, q, w in s:
                mass = mass + w * (_close(real[..., j], p) & _close(reactive[..., j], q))
            with np.errstate(divide="ignore"):
                out[..., j] = np.log(mass)
        return out

    def mahalanobis(self, real, reactive, hour: float) -> np.ndarray:
        mp, mq = self.mean(hour)
        return (np.asarray(real) - mp) ** 2 + (np.asarray(reactive) - mq) ** 2

    def sample(self, hour: float, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        real = np.empty((size, self.node_count))
        reactive = np.empty((size, self.node_count))
        for j, s in enumerate(self.support):
            idx = rng.choice(s.shape[0], size=size, p=s[:, 2])
            real[:, j] = s[idx, 0]
            reactive[:, j] = s[idx, 1]
        return real, reactive
