"""Compiled kernels for the Monte-Carlo hot path.

``sweep`` is the node-by-node counterpart of the matrix-form sweep in
:mod:`tclgrid.grid`; each sample stops iterating as soon as its own voltages
settle.  ``realizations`` fuses the whole sampling procedure of
:class:`tclgrid.utility.RealizationSampler` into one pass per sample.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def sweep(p, q, r, x, parent, order, v0, tol, max_iter):
    S, n = p.shape
    v = np.empty((S, n))
    P = np.empty((S, n))
    Q = np.empty((S, n))
    converged = np.zeros(S, dtype=np.bool_)
    diverged = np.zeros(S, dtype=np.bool_)
    ell = np.empty(n)
    v2 = np.empty(n)
    vold = np.empty(n)
    v02 = v0 * v0
    most = 0
    for s in range(S):
        for j in range(n):
            ell[j] = 0.0
            vold[j] = v0
        it = 0
        while it < max_iter:
            it += 1
            for j in range(n):
                P[s, j] = p[s, j] + r[j] * ell[j]
                Q[s, j] = q[s, j] + x[j] * ell[j]
            for k in range(n - 1, -1, -1):
                j = order[k]
                a = parent[j]
                if a >= 0:
                    P[s, a] += P[s, j]
                    Q[s, a] += Q[s, j]
            bad = False
            delta = 0.0
            for k in range(n):
                j = order[k]
                a = parent[j]
                vp2 = v02 if a < 0 else v2[a]
                v2[j] = vp2 - 2.0 * (r[j] * P[s, j] + x[j] * Q[s, j]) + (r[j] * r[j] + x[j] * x[j]) * ell[j]
                if v2[j] <= 0.0:
                    bad = True
                    break
            if bad:
                diverged[s] = True
                break
            for k in range(n):
                j = order[k]
                a = parent[j]
                vp2 = v02 if a < 0 else v2[a]
                ell[j] = (P[s, j] * P[s, j] + Q[s, j] * Q[s, j]) / vp2
                vj = np.sqrt(v2[j])
                d = abs(vj - vold[j])
                if d > delta:
                    delta = d
                vold[j] = vj
            if delta < tol:
                converged[s] = True
                break
        for j in range(n):
            v[s, j] = vold[j] if not diverged[s] else np.nan
        if it > most:
            most = it
    return v, P, Q, converged, diverged, most


@njit(cache=True)
def _sweep_one(p, q, r, x, parent, order, v0, tol, max_iter, P, Q, ell, v2, vold):
    """Single-sample sweep writing voltages into ``vold``; False on collapse/non-convergence.

    ``ell`` holds the starting squared currents (the caller passes the last
    sample's solution, which cuts the iteration count) and is left at the
    converged values.
    """
    n = p.shape[0]
    v02 = v0 * v0
    for j in range(n):
        vold[j] = v0
    for _ in range(max_iter):
        for j in range(n):
            P[j] = p[j] + r[j] * ell[j]
            Q[j] = q[j] + x[j] * ell[j]
        for k in range(n - 1, -1, -1):
            j = order[k]
            a = parent[j]
            if a >= 0:
                P[a] += P[j]
                Q[a] += Q[j]
        for k in range(n):
            j = order[k]
            a = parent[j]
            vp2 = v02 if a < 0 else v2[a]
            v2[j] = vp2 - 2.0 * (r[j] * P[j] + x[j] * Q[j]) + (r[j] * r[j] + x[j] * x[j]) * ell[j]
            if v2[j] <= 0.0:
                return False
        delta = 0.0
        for k in range(n):
            j = order[k]
            a = parent[j]
            vp2 = v02 if a < 0 else v2[a]
            ell[j] = (P[j] * P[j] + Q[j] * Q[j]) / vp2
            vj = np.sqrt(v2[j])
            d = abs(vj - vold[j])
            if d > delta:
                delta = d
            vold[j] = vj
        if delta < tol:
            return True
    # a single pass without losses is the linearized solution, always accepted
    return max_iter == 1


@njit(cache=True)
def _upper_index(table, row, last, z):
    """Smallest ``c <= last`` with ``table[row, c] > z`` (``last`` if none)."""
    lo, hi = 0, last
    while lo < hi:
        mid = (lo + hi) >> 1
        if table[row, mid] > z:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True, nogil=True)
def realizations(rng, size, cdf, counts, w_on, w_off, avg_p, avg_q, direction, switch_cdf, mean_p, mean_q,
                 sd_p, sd_q, rho, box_lo, box_hi, r, x, parent, order, v0, tol, max_iter):
    """Fused realization procedure: ON-count draw, loads, switch forecast,
    command response, power flow.  Returns per-sample min and max voltage
    (NaN where the power flow failed).

    ``direction`` is the sign of the command and ``switch_cdf[k, c]`` the
    binomial cdf ``P(C <= c)`` for ``k`` eligible devices at probability
    ``|u|``; command responses are drawn by inversion of that table.
    """
    n = counts.shape[0]
    vmin = np.empty(size)
    vmax = np.empty(size)
    p = np.empty(n)
    q = np.empty(n)
    P = np.empty(n)
    Q = np.empty(n)
    ell = np.zeros(n)
    v2 = np.empty(n)
    vold = np.empty(n)
    s_cor = np.sqrt(1.0 - rho * rho)
    for s in range(size):
        for j in range(n):
            # step 1a: ON count now by inverse cdf
            on = _upper_index(cdf, j, counts[j], rng.random())
            off = counts[j] - on
            # step 1b: load at the next step, truncated by rejection
            while True:
                z0 = rng.standard_normal()
                z1 = rho * z0 + s_cor * rng.standard_normal()
                if box_lo <= z0 <= box_hi and box_lo <= z1 <= box_hi:
                    break
            # step 2: thermostat switches, rounded half up
            s_on = int(np.floor(w_on[j] * off + 0.5))
            s_off = int(np.floor(w_off[j] * on + 0.5))
            s_on = min(max(s_on, 0), off)
            s_off = min(max(s_off, 0), on)
            # step 3: command response
            c_on = 0
            c_off = 0
            if direction != 0:
                k = off - s_on if direction > 0 else on - s_off
                c = _upper_index(switch_cdf, k, k, rng.random())
                if direction > 0:
                    c_on = c
                else:
                    c_off = c
            # step 4
            nxt = on + s_on - s_off + c_on - c_off
            p[j] = mean_p[j] + sd_p[j] * z0 + avg_p[j] * nxt
            q[j] = mean_q[j] + sd_q[j] * z1 + avg_q[j] * nxt
        if max_iter == 1:
            ell[:] = 0.0
        if _sweep_one(p, q, r, x, parent, order, v0, tol, max_iter, P, Q, ell, v2, vold):
            lo = vold[0]
            hi = vold[0]
            for j in range(1, n):
                lo = min(lo, vold[j])
                hi = max(hi, vold[j])
            vmin[s] = lo
            vmax[s] = hi
        else:
            vmin[s] = np.nan
            vmax[s] = np.nan
            ell[:] = 0.0
    return vmin, vmax
