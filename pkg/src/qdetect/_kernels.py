"""Numba kernels: counter-based RNG, chain-path Monte Carlo, policy simulation.

Per-path random streams are derived from (master_seed, path_index) with a
splitmix64-style generator, so serial and parallel runs produce identical
paths for identical indices.

Level/discount kill rules: a path estimating a downcrossing Laplace
transform can escape upward into states with ever smaller interpolation
intervals, which makes naive simulation arbitrarily slow.  For beta > 0
the function exp(-beta t) * (y / y_target)^(-q*) with
q* = [(a - mu^2/2) + sqrt((a - mu^2/2)^2 + 2 beta mu^2)] / mu^2
is a supermartingale bound on the path's remaining contribution, so paths
are killed (contributing 0) once that bound falls below KILL_TOL; the
resulting bias is below KILL_TOL per path, which is negligible against
the stderr targets used throughout.
"""

from __future__ import annotations

import numpy as np
from numba import njit

U64 = np.uint64
GOLD = U64(0x9E3779B97F4A7C15)
MIX1 = U64(0xBF58476D1CE4E5B9)
MIX2 = U64(0x94D049BB133111EB)
PATH = U64(0xD2B74407B1CE6E93)

#: absolute per-path bias bound for discount/level kills
KILL_TOL = 1e-7
_LOG_KILL = np.log(KILL_TOL)

_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> U64(30))) * MIX1
    z = (z ^ (z >> U64(27))) * MIX2
    return z ^ (z >> U64(31))


@njit(cache=True, inline="always")
def _stream(master_seed, path_index):
    return _mix(U64(master_seed) ^ (U64(path_index) * PATH))


@njit(cache=True, inline="always")
def _next_u(state):
    """Advance state; return (state, uniform in (0, 1])."""
    state = state + GOLD
    u = (_mix(state) >> U64(11)) * _INV53 + _INV53
    return state, u


@njit(cache=True)
def _step_tables(n_levels, h, mu2, lam, a):
    """Per-level p_up and dt of the approximating chain, levels 0..n_levels-1."""
    p_up = np.empty(n_levels)
    dt = np.empty(n_levels)
    for i in range(n_levels):
        y = i * h
        sig2 = mu2 * y * y
        drift = lam + a * y
        up = drift if drift > 0.0 else 0.0
        down = -drift if drift < 0.0 else 0.0
        denom = sig2 + h * (up + down)
        p_up[i] = (0.5 * sig2 + h * up) / denom
        dt[i] = h * h / denom
    return p_up, dt


@njit(cache=True)
def hit_laplace_batch(
    i0,
    i_target,
    h,
    mu2,
    lam,
    a,
    beta,
    master_seed,
    path_offset,
    n_paths,
    max_steps,
    i_kill,
    q_star,
    out,
):
    """Simulate n_paths of the chain from level i0 until first hit of i_target.

    out[p] = exp(-beta * hitting_time), 0 for killed/exhausted/truncated
    paths.  Returns the number of max_steps truncations (kills with a
    proven-negligible remainder are not truncations).
    """
    n_levels = max(i_target, i_kill, i0) + 1
    p_up, dt = _step_tables(n_levels, h, mu2, lam, a)
    q_log = np.zeros(n_levels)
    if i_kill > i0 and q_star > 0.0:
        y_t = i_target * h if i_target > 0 else h
        for i in range(1, n_levels):
            r = i * h / y_t
            q_log[i] = q_star * np.log(r) if r > 1.0 else 0.0
    n_trunc = 0
    for p in range(n_paths):
        state = _stream(master_seed, path_offset + p)
        idx = i0
        t = 0.0
        val = 0.0
        steps = 0
        imax = i0
        while True:
            if idx == i_target:
                val = np.exp(-beta * t) if beta > 0.0 else 1.0
                break
            if beta > 0.0 and beta * t > -_LOG_KILL:
                break  # remaining contribution is at most exp(-beta t) < KILL_TOL
            if idx > imax:
                imax = idx
                if i_kill > i0 and idx >= i_kill:
                    break
                if q_log[idx] > 0.0 and -beta * t - q_log[idx] < _LOG_KILL:
                    break
            if steps >= max_steps:
                n_trunc += 1
                break
            t += dt[idx]
            state, u = _next_u(state)
            idx = idx + 1 if u < p_up[idx] else idx - 1
            steps += 1
        out[p] = val
    return n_trunc


@njit(cache=True)
def ladder_edge_batch(
    i0,
    i_target,
    h,
    mu2,
    lam,
    a,
    beta,
    p_up,
    dt,
    log_bound,
    ref,
    q_star,
    master_seed,
    path_offset,
    n_paths,
    max_steps,
    out,
):
    """Adjacent-edge hitting Laplace paths sharing precomputed step tables.

    Built for the backward recursions over the whole grid: p_up/dt cover
    levels 0..n-1 once instead of being rebuilt per edge, and the level
    kill uses the caller-supplied bound table log_bound (a valid log upper
    bound, relative to the value at the start level ref, on the remaining
    contribution of a path sitting at that level).  Above the table both
    the step parameters and the bound continue in closed form, the latter
    as the q_star power-law tail, so rare far-escaping paths cost a few
    flops per step instead of unbounded table memory.
    """
    n_tab = p_up.shape[0]
    n_b = log_bound.shape[0]
    tail_ref = log_bound[n_b - 1]
    log_z_b = np.log((n_b - 1) * h) if n_b > 1 else 0.0
    n_trunc = 0
    for p in range(n_paths):
        state = _stream(master_seed, path_offset + p)
        idx = i0
        t = 0.0
        val = 0.0
        steps = 0
        while True:
            if idx == i_target:
                val = np.exp(-beta * t) if beta > 0.0 else 1.0
                break
            bt = beta * t
            if bt > -_LOG_KILL:
                break  # remaining contribution below KILL_TOL on discount alone
            if idx > i0 and q_star > 0.0:
                if idx < n_b:
                    lb = log_bound[idx]
                else:
                    lb = tail_ref - q_star * (np.log(idx * h) - log_z_b)
                if lb - ref - bt < _LOG_KILL:
                    break
            if steps >= max_steps:
                n_trunc += 1
                break
            if idx < n_tab:
                t += dt[idx]
                pu = p_up[idx]
            else:
                y = idx * h
                sig2 = mu2 * y * y
                drift = lam + a * y
                up = drift if drift > 0.0 else 0.0
                down = -drift if drift < 0.0 else 0.0
                denom = sig2 + h * (up + down)
                pu = (0.5 * sig2 + h * up) / denom
                t += h * h / denom
            state, u = _next_u(state)
            idx = idx + 1 if u < pu else idx - 1
            steps += 1
        out[p] = val
    return n_trunc


@njit(cache=True)
def running_cost_batch(
    i0,
    i_absorb,
    k_vals,
    h,
    mu2,
    lam,
    a,
    beta,
    master_seed,
    path_offset,
    n_paths,
    max_steps,
    out,
):
    """Discounted running cost sum_{n < N} k(xi_n) e^{-beta t_n} (1-e^{-beta dt_n})/beta
    with absorption at level i_absorb.  Returns the truncation tally."""
    n_levels = i_absorb + 1
    p_up, dt = _step_tables(n_levels, h, mu2, lam, a)
    e_dt = np.exp(-beta * dt)
    w_dt = (1.0 - e_dt) / beta
    k_sup = 0.0
    for i in range(n_levels):
        if abs(k_vals[i]) > k_sup:
            k_sup = abs(k_vals[i])
    n_trunc = 0
    for p in range(n_paths):
        state = _stream(master_seed, path_offset + p)
        idx = i0
        ebt = 1.0
        acc = 0.0
        steps = 0
        while idx != i_absorb:
            if ebt * k_sup / beta < KILL_TOL:
                break  # remaining contribution provably negligible
            if steps >= max_steps:
                n_trunc += 1
                break
            acc += k_vals[idx] * ebt * w_dt[idx]
            ebt *= e_dt[idx]
            state, u = _next_u(state)
            idx = idx + 1 if u < p_up[idx] else idx - 1
            steps += 1
        out[p] = acc
    return n_trunc


@njit(cache=True)
def policy_batch(
    mu,
    lam0,
    lam1,
    lam,
    a,
    c,
    prior,
    factors,
    cum_nu0,
    cum_nu1,
    phi_star,
    dt_sim,
    max_alarm_steps,
    master_seed,
    path_offset,
    n_paths,
    theta_out,
    tau_out,
    penalty_out,
    censored_out,
):
    """Forward-simulate observation scenarios and the odds-ratio filter.

    Each path draws the disorder time from the zero-modified exponential
    prior, generates the point process by thinning at rate max(lam0, lam1)
    and the Wiener channel segment by segment (segments split at grid
    times, accepted event times and the disorder time), runs the filter

        phi <- phi * exp((a - mu^2/2) ds + mu dX) + lam ds

    between events and phi <- factor * phi at events, and raises the alarm
    at the first grid time with phi >= phi_star.
    """
    mu2 = mu * mu
    r_max = lam0 if lam0 > lam1 else lam1
    phi0 = prior / (1.0 - prior)
    n_atoms = factors.shape[0]
    for p in range(n_paths):
        state = _stream(master_seed, path_offset + p)
        state, u = _next_u(state)
        if u < prior:
            theta = 0.0
        else:
            state, u = _next_u(state)
            theta = -np.log(u) / lam
        phi = phi0
        t = 0.0
        tau = -1.0
        if phi >= phi_star:
            tau = 0.0
        steps = 0
        state, u = _next_u(state)
        next_ev = -np.log(u) / r_max
        next_grid = dt_sim
        spare = 0.0
        has_spare = False
        while tau < 0.0 and steps < max_alarm_steps:
            t_next = next_grid
            is_event = False
            if next_ev < t_next:
                t_next = next_ev
                is_event = True
            if theta > t and theta < t_next:
                t_next = theta
                is_event = False
            seg = t_next - t
            if seg > 0.0:
                if has_spare:
                    z = spare
                    has_spare = False
                else:
                    state, u1 = _next_u(state)
                    state, u2 = _next_u(state)
                    rad = np.sqrt(-2.0 * np.log(u1))
                    ang = 6.283185307179586 * u2
                    z = rad * np.cos(ang)
                    spare = rad * np.sin(ang)
                    has_spare = True
                d_x = np.sqrt(seg) * z
                if t >= theta:
                    d_x += mu * seg
                phi = phi * np.exp((a - 0.5 * mu2) * seg + mu * d_x) + lam * seg
            t = t_next
            if is_event:
                state, u = _next_u(state)
                rate = lam0 if t < theta else lam1
                if u * r_max < rate:
                    # accepted event: draw a mark from the active regime
                    state, u = _next_u(state)
                    cw = cum_nu0 if t < theta else cum_nu1
                    j = 0
                    while j < n_atoms - 1 and u > cw[j]:
                        j += 1
                    phi = factors[j] * phi
                state, u = _next_u(state)
                next_ev = t + (-np.log(u) / r_max)
            if t == next_grid:
                steps += 1
                next_grid += dt_sim
                if phi >= phi_star:
                    tau = t
        censored = tau < 0.0
        if censored:
            tau = t
        theta_out[p] = theta
        tau_out[p] = tau
        delay = tau - theta
        if delay < 0.0:
            delay = 0.0
        # a censored path never raised an alarm, so it accrues delay cost
        # up to the horizon but no false-alarm penalty
        false_alarm = (not censored) and tau < theta
        penalty_out[p] = (1.0 if false_alarm else 0.0) + c * delay
        censored_out[p] = 1 if censored else 0
