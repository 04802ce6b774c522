"""Compiled inner loops shared by the simulation modules.

Everything here works on plain float64/int64 arrays so it can be jitted.
A rate function is passed around as ``(t0, dt, vals, cum)``: grid origin,
grid step, node values and cumulative mass at the nodes.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# service-law kind codes (kept in sync with processes.SERVICE_KINDS)
IID_EXPONENTIAL = 0
IID_DETERMINISTIC = 1
IID_TWO_POINT = 2
MARKOV_MODULATED = 3
MOVING_AVERAGE = 4


@njit(cache=True)
def cum_mass(t, t0, dt, vals, cum):
    n = vals.shape[0]
    k = int(np.floor((t - t0) / dt))
    if k < 0:
        k = 0
    elif k > n - 2:
        k = n - 2
    s = t - (t0 + k * dt)
    return cum[k] + vals[k] * s + (vals[k + 1] - vals[k]) * s * s / (2.0 * dt)


@njit(cache=True)
def inv_mass(m, t0, dt, vals, cum):
    n = vals.shape[0]
    if m >= cum[n - 1]:
        return t0 + (n - 1) * dt
    if m <= cum[0]:
        return t0
    # largest k with cum[k] <= m
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if cum[mid] <= m:
            lo = mid
        else:
            hi = mid
    k = lo
    r = m - cum[k]
    a = (vals[k + 1] - vals[k]) / (2.0 * dt)
    b = vals[k]
    disc = b * b + 4.0 * a * r
    if disc < 0.0:
        disc = 0.0
    s = 2.0 * r / (b + np.sqrt(disc))
    if s > dt:
        s = dt
    return t0 + k * dt + s


@njit(cache=True)
def inv_mass_array(ms, t0, dt, vals, cum):
    out = np.empty(ms.shape[0])
    for i in range(ms.shape[0]):
        out[i] = inv_mass(ms[i], t0, dt, vals, cum)
    return out


@njit(cache=True)
def cum_mass_array(ts, t0, dt, vals, cum):
    out = np.empty(ts.shape[0])
    for i in range(ts.shape[0]):
        out[i] = cum_mass(ts[i], t0, dt, vals, cum)
    return out


@njit(cache=True)
def lindley(z, eta):
    n = z.shape[0]
    y = np.empty(n)
    if n == 0:
        return y
    y[0] = z[0] + eta[0]
    for i in range(1, n):
        start = z[i] if z[i] > y[i - 1] else y[i - 1]
        y[i] = start + eta[i]
    return y


@njit(cache=True)
def resolve_once(z, eta):
    """One application of the conflict-resolution operator.

    Customers satisfying ``z_i >= z_k + eta_k`` for every earlier k keep
    their epoch; the others are moved to the running completion time of the
    last such customer before them.
    """
    n = z.shape[0]
    out = z.copy()
    if n == 0:
        return out
    reach = z[0] + eta[0]  # max over earlier k of z_k + eta_k
    acc = z[0] + eta[0]    # z_head + eta_head + ... + eta_{j-1}
    for j in range(1, n):
        if z[j] >= reach:
            acc = z[j] + eta[j]
        else:
            out[j] = acc
            acc = acc + eta[j]
        cand = z[j] + eta[j]
        if cand > reach:
            reach = cand
    return out


@njit(cache=True)
def service_at(j, state, kind, params, E, U):
    if kind == IID_EXPONENTIAL:
        return params[0] * E[j]
    if kind == IID_DETERMINISTIC:
        return params[0]
    if kind == IID_TWO_POINT:
        return params[0] if U[j] < params[2] else params[1]
    if kind == MARKOV_MODULATED:
        return params[state] * E[j]
    # moving average of k consecutive innovations
    k = int(params[1])
    acc = 0.0
    for i in range(k):
        acc += E[j + i]
    return params[0] * acc / k


@njit(cache=True)
def next_state(j, state, kind, params, U):
    if kind != MARKOV_MODULATED:
        return state
    if U[j] < params[2 + state]:
        return 1 - state
    return state


@njit(cache=True)
def busy_field(u, m_u, n_states, t0, dt, vals, cum, G, E, U, kind, params,
               n_bins, dx, counts, sqcounts, e_w, conv_w, anchor_slot,
               mass_out, conv_out, start):
    """Forced-arrival busy periods for one sample, common numbers across u.

    For every start epoch ``u[m]`` (and every initial modulating state when
    ``n_states`` > 1) a customer is injected into an idle server at u and the
    busy period is run on the shared gap/service draws.  Departure offsets
    are histogrammed into ``counts[s, m, k]``; bin k of start m feeds the
    anchor in slot ``anchor_slot[m + k + 1]``.

    Pairs (s, m) are processed in flat order from ``start``.  A busy period
    is committed only once it ends, so when the draws run out the function
    returns the flat position of the unfinished pair (which left no trace)
    and the caller resumes there with longer draws.  Returns -1 when done.
    """
    m_end = cum[cum.shape[0] - 1]
    x_max = n_bins * dx
    L = G.shape[0]
    M = u.shape[0]
    buf = np.empty(L + 1, np.int64)
    for pos in range(start, n_states * M):
        s = pos // M
        m = pos % M
        offset = 0.0
        gam = 0.0
        state = s
        j = 0
        nb = 0
        while True:
            if j >= L:
                return pos
            if j > 0:
                state = next_state(j, state, kind, params, U)
            offset = offset + service_at(j, state, kind, params, E, U)
            if offset >= x_max:
                break
            k = int(offset / dx)
            if k >= n_bins:
                break
            buf[nb] = k
            nb += 1
            gam += G[j]
            target = m_u[m] + gam
            if target >= m_end:
                break
            if inv_mass(target, t0, dt, vals, cum) - u[m] < offset:
                j += 1
            else:
                break
        i = 0
        while i < nb:
            k = buf[i]
            n = 0
            while i < nb and buf[i] == k:
                n += 1
                i += 1
            counts[s, m, k] += n
            sqcounts[s, m, k] += n * n
            a = anchor_slot[m + k + 1]
            if a >= 0:
                mass_out[a] += e_w[s, m] * n
                conv_out[a] += conv_w[s, m] * n
    return -1


@njit(cache=True)
def two_mode(z, eta, slow, threshold):
    """Event loop of the slow/fast two-mode server.

    Returns per-customer departure epochs and the mode (0 slow, 1 fast) in
    force when each customer started service.
    """
    n = z.shape[0]
    nf = 0
    for i in range(n):
        if not slow[i]:
            nf += 1
    ns = n - nf
    fast_idx = np.empty(nf, np.int64)
    slow_idx = np.empty(ns, np.int64)
    a = 0
    b = 0
    for i in range(n):
        if slow[i]:
            slow_idx[b] = i
            b += 1
        else:
            fast_idx[a] = i
            a += 1
    fast_z = z[fast_idx]
    slow_z = z[slow_idx]
    y = np.empty(n)
    modes = np.zeros(n, np.int64)
    pf = 0
    ps = 0
    t = -np.inf
    mode = 0
    served = 0
    while served < n:
        wf = np.searchsorted(fast_z, t, side="right") - pf
        ws = np.searchsorted(slow_z, t, side="right") - ps
        if wf == 0 and ws == 0:
            nxt = np.inf
            if pf < nf:
                nxt = fast_z[pf]
            if ps < ns and slow_z[ps] < nxt:
                nxt = slow_z[ps]
            t = nxt
            continue
        if mode == 0 and wf >= threshold:
            mode = 1
        if mode == 1 and wf == 0:
            mode = 0
        if mode == 1 or ws == 0:
            i = fast_idx[pf]
            pf += 1
        else:
            i = slow_idx[ps]
            ps += 1
        modes[i] = mode
        y[i] = t + eta[i]
        t = y[i]
        served += 1
    return y, modes
