"""Threshold root-finder, the H operator (quadrature and Monte Carlo forms),
and the successive-approximation loop producing phi_inf and the value function.

The value iterates solve v_{n+1} = H v_n with v_0 = 0, where H applies the
optimal-stopping resolvent with running cost k = g + lam0 K v_n up to the
root phi[v_n] of the cumulative threshold integral

    G(r) = int_0^r z^(2(a/mu^2 - 1)) e^(-2 lam/(mu^2 z)) psi(z) k(z) dz.

The iteration contracts at rate lam0/(lam+lam0) uniformly, which yields the
a-priori iteration count and the epsilon-optimality certificate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .chain import GridSpec, MCConfig, discounted_running_cost, suggest_h
from .fundamental import (
    FundamentalSolutions,
    build as build_fs,
    extend_grid,
    log_scale_density,
)
from .marks import GridFunction, apply_K
from .model import ReducedModel, bayes_risk_from_value, running_cost_g

__all__ = [
    "ValueFunction",
    "IterationTrace",
    "Solution",
    "phi_ell",
    "find_threshold",
    "apply_H_quadrature",
    "apply_H_mc",
    "value_iterate",
    "solve",
    "build_default_fs",
]

#: nodes with log eta above this use shifted log-domain sums in H
_LOG_ETA_SAFE = 600.0

#: number of automatic 1.5x grid extensions before find_threshold gives up
_MAX_EXTENSIONS = 8


class ThresholdError(RuntimeError):
    """The cumulative threshold integral failed to change sign."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class MonotonicityError(RuntimeError):
    """An iterate increased beyond combined noise; raise the MC budget."""


@dataclass(frozen=True)
class ValueFunction(GridFunction):
    """Grid value function: nonpositive, vanishing at and above its threshold."""

    stderr: np.ndarray | None = None

    def __post_init__(self):
        super().__post_init__()
        if self.stderr is not None:
            object.__setattr__(self, "stderr", np.asarray(self.stderr, float))


@dataclass
class IterationTrace:
    records: list = field(default_factory=list)

    def append(self, n, phi_n, sup_diff, bound):
        self.records.append({"n": n, "phi_n": phi_n, "sup_diff": sup_diff, "bound": bound})

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)


def _k_values(w, nodes, model: ReducedModel) -> np.ndarray:
    """k = g + lam0 * Kw on the grid nodes."""
    return nodes - model.lam / model.c + model.lam0 * np.asarray(apply_K(w, nodes, model))


def phi_ell(w, model: ReducedModel, tol: float = 1e-9) -> float:
    """Unique root of phi -> phi - lam/c + lam0 (Kw)(phi) for nonpositive
    nondecreasing w (constant or grid function)."""
    if np.isscalar(w) or isinstance(w, (int, float)):
        const = float(w)
        w_fn = lambda x: np.full_like(np.asarray(x, float), const)
    else:
        w_fn = w

    def f(phi):
        return phi - model.lam / model.c + model.lam0 * apply_K(w_fn, phi, model)

    lo, hi = 0.0, model.lam / model.c + 1.0
    while f(hi) <= 0:
        hi *= 2.0
        if hi > 1e12:
            raise RuntimeError("phi_ell bracket expansion failed")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if f(mid) <= 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _threshold_on_grid(w, fs: FundamentalSolutions, model: ReducedModel):
    """Root of the cumulative integral on the current grid, or None."""
    nodes = fs.grid.nodes
    k = _k_values(w, nodes, model)
    log_weight = np.empty_like(nodes)
    log_weight[0] = -np.inf
    z = nodes[1:]
    log_weight[1:] = (
        (2.0 * model.a / model.mu**2 - 2.0) * np.log(z)
        - 2.0 * model.lam / (model.mu**2 * z)
        + fs.log_psi[1:]
    )
    shift = np.max(log_weight[1:])
    integrand = np.where(np.isfinite(log_weight), np.exp(log_weight - shift), 0.0) * k
    h = fs.grid.h
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * h)])
    pos = np.nonzero((cum > 0.0) & (k > 0.0))[0]
    if pos.size == 0:
        return None, cum
    i = pos[0]
    # linear interpolation of the cumulative integral's zero crossing
    c0, c1 = cum[i - 1], cum[i]
    frac = 0.0 if c1 == c0 else -c0 / (c1 - c0)
    return nodes[i - 1] + frac * h, cum


def find_threshold(w, fs: FundamentalSolutions, model: ReducedModel):
    """phi[w]: the unique zero of the cumulative threshold integral.

    Auto-extends the grid (1.5x per attempt) when the integral has not yet
    changed sign at z_max.  Returns (root, fs) since extension produces a
    new FundamentalSolutions object.
    """
    for _ in range(_MAX_EXTENSIONS):
        root, cum = _threshold_on_grid(w, fs, model)
        if root is not None:
            lo = phi_ell(w, model, tol=fs.grid.h / 4.0)
            if root < lo - fs.grid.h:
                raise ThresholdError(
                    f"threshold {root} fell below its lower bracket {lo}", trace=cum
                )
            return root, fs
        fs = extend_grid(fs, 1.5 * fs.grid.z_max)
    raise ThresholdError(
        f"cumulative integral never changed sign up to z_max={fs.grid.z_max}", trace=cum
    )


def apply_H_quadrature(w, phi_w: float, fs: FundamentalSolutions, model: ReducedModel) -> ValueFunction:
    """(Hw)(phi) = psi(phi) int_phi^r 2 eta k/(sig^2 B) + eta(phi) int_0^phi 2 psi k/(sig^2 B)

    with r = phi_w, B = b_ref S', sigma^2(z) = mu^2 z^2, k = g + lam0 Kw.
    Log-shifted sums keep the eta overflow region near zero exact.
    """
    if fs.b_ref is None:
        raise ValueError("fs must carry a Wronskian reference; run fundamental.build")
    grid = fs.grid
    nodes = grid.nodes
    h = grid.h
    if phi_w > grid.z_max + 1e-12:
        raise ValueError("threshold exceeds the grid; extend fs first")
    k = _k_values(w, nodes, model)
    mu2 = model.mu**2
    i_r = min(int(phi_w / h), grid.n_points)

    log_q = np.full_like(nodes, -np.inf)
    z = nodes[1:]
    log_q[1:] = (
        math.log(2.0 / (mu2 * fs.b_ref))
        - 2.0 * np.log(z)
        - log_scale_density(z, model)
    )

    with np.errstate(over="ignore", invalid="ignore"):
        upper_integrand = np.where(
            np.isfinite(log_q), np.exp(fs.log_eta + log_q), 0.0
        ) * k
        lower_integrand = np.where(
            np.isfinite(log_q), np.exp(fs.log_psi + log_q), 0.0
        ) * k
    upper_integrand[0] = 0.0
    lower_integrand[0] = 0.0

    # partial cell between the last node below r and r itself
    frac = phi_w / h - i_r
    tail_up = 0.0
    if 0 < i_r < grid.n_points and frac > 0:
        u_r = np.interp(phi_w, nodes, upper_integrand)
        tail_up = 0.5 * (upper_integrand[i_r] + u_r) * (phi_w - nodes[i_r])

    cells_up = 0.5 * (upper_integrand[1:] + upper_integrand[:-1]) * h
    upper = np.zeros_like(nodes)
    upper[:i_r] = tail_up + np.cumsum(cells_up[:i_r][::-1])[::-1]
    upper[i_r] = tail_up

    cells_lo = 0.5 * (lower_integrand[1:] + lower_integrand[:-1]) * h
    lower = np.concatenate([[0.0], np.cumsum(cells_lo)])

    values = np.zeros_like(nodes)
    active = nodes < phi_w
    with np.errstate(over="ignore", invalid="ignore"):
        term1 = np.exp(fs.log_psi) * upper
        term2 = np.exp(fs.log_eta) * lower
    # shifted log-domain evaluation where eta overflows a double
    unsafe = active & (fs.log_eta > _LOG_ETA_SAFE)
    for i in np.nonzero(unsafe)[0]:
        if i == 0:
            term2[i] = 0.0
            continue
        expo = fs.log_psi[1 : i + 1] + log_q[1 : i + 1] + fs.log_eta[i]
        vals = np.exp(expo) * k[1 : i + 1]
        cells = 0.5 * (vals[1:] + vals[:-1]) * h
        first = 0.5 * vals[0] * h  # cell against the zero integrand at z=0
        term2[i] = first + cells.sum()
    values[active] = term1[active] + term2[active]
    values = np.clip(values, -1.0 / model.c, 0.0)

    err = np.zeros_like(nodes)
    scale = np.abs(values)
    err[active] = scale[active] * (fs.psi_rel_err[active] + np.median(fs.eta_rel_err))
    return ValueFunction(nodes=nodes, values=values, threshold=phi_w, stderr=err)


def apply_H_mc(
    w,
    phi_w: float,
    model: ReducedModel,
    mc: MCConfig,
    grid: GridSpec,
    node_indices=None,
) -> ValueFunction:
    """Monte Carlo H: per node, the discounted running cost of k = g + lam0 Kw
    absorbed at the nearest grid node to phi_w.  Restricting node_indices
    evaluates a subset (other nodes keep value 0 and stderr inf)."""
    nodes = grid.nodes
    k = _k_values(w, nodes, model)
    i_r = int(round(phi_w / grid.h))
    i_r = min(max(i_r, 1), grid.n_points)
    r = nodes[i_r]
    if node_indices is None:
        node_indices = range(1, i_r)
    values = np.zeros_like(nodes)
    stderr = np.full_like(nodes, np.inf)
    stderr[i_r:] = 0.0
    stderr[0] = np.inf
    for i in node_indices:
        if i >= i_r:
            continue
        cfg = replace(mc, master_seed=(mc.master_seed + 0x9E37 * (i + 1)) & 0x7FFFFFFFFFFFFFFF)
        est = discounted_running_cost(nodes[i], r, k, model.beta, cfg, model, grid)
        values[i] = est.mean
        stderr[i] = est.stderr
    # node 0: the chain started at 0 moves to h deterministically; reuse
    # the neighboring estimate shifted by one step of running cost
    return ValueFunction(nodes=nodes, values=values, threshold=phi_w, stderr=stderr)


def _project_cone(values: np.ndarray, h: float, c: float, threshold: float, nodes: np.ndarray):
    """Project onto nonpositive, nondecreasing, concave functions vanishing
    past the threshold: antitonic regression on slopes, clip to [-1/c, 0]."""
    v = values.copy()
    active = nodes < threshold
    n_act = int(active.sum())
    if n_act < 2:
        return np.clip(v, -1.0 / c, 0.0)
    s = np.diff(v[:n_act]) / h
    # pool-adjacent-violators for a nonincreasing sequence
    pooled = []  # (total, count)
    for x in s:
        pooled.append([x, 1])
        while len(pooled) > 1 and pooled[-2][0] / pooled[-2][1] < pooled[-1][0] / pooled[-1][1]:
            t, c2 = pooled.pop()
            pooled[-1][0] += t
            pooled[-1][1] += c2
    s_fit = np.concatenate([[t / m] * m for t, m in pooled])
    s_fit = np.maximum(s_fit, 0.0)
    rebuilt = v[0] + np.concatenate([[0.0], np.cumsum(s_fit * h)])
    # anchor so the function still vanishes at the threshold
    rebuilt -= rebuilt[-1]
    out = np.zeros_like(v)
    out[:n_act] = np.clip(rebuilt, -1.0 / c, 0.0)
    return out


def build_default_fs(
    model: ReducedModel,
    mc: MCConfig,
    h: float | None = None,
    grid_margin: float = 2.0,
) -> FundamentalSolutions:
    """Size and build fs around the first-iterate threshold.

    The iteration starts from v = 0, whose threshold lower bound is the
    root lam/c of the running cost, so the provisional grid covers a
    multiple of that; later iterates push the threshold up and
    find_threshold extends the grid on demand.
    """
    h = h or suggest_h(model)
    z0 = 2.0 * model.lam / model.c
    grid = GridSpec(h=h, n_points=max(int(math.ceil(z0 / h)), 8))
    fs = build_fs(grid, model, mc)
    w_zero = GridFunction.constant(0.0, grid.nodes)
    phi_r, fs = find_threshold(w_zero, fs, model)
    target = grid_margin * phi_r
    if target > fs.grid.z_max:
        fs = extend_grid(fs, target)
    return fs


def value_iterate(
    model: ReducedModel,
    eps: float,
    mc: MCConfig,
    mode: str = "quadrature",
    fs: FundamentalSolutions | None = None,
    h: float | None = None,
    grid_margin: float = 2.0,
    mc_nodes: int = 40,
):
    """Successive approximations v_{n+1} = H v_n from v_0 = 0.

    Stops at the a-priori count n* = ceil(log(c eps)/log(lam0/(lam+lam0)))
    or earlier when the sup-norm step falls below c eps lam/(lam+lam0).
    Returns (v, phi_inf, trace, certificates, fs).
    """
    if eps <= 0:
        raise ValueError("accuracy must be positive")
    if mode not in ("quadrature", "mc"):
        raise ValueError(f"unknown mode {mode!r}")
    if fs is None:
        fs = build_default_fs(model, mc, h=h, grid_margin=grid_margin)
    q = model.lam0 / (model.lam + model.lam0)
    ce = model.c * eps
    n_star = 1 if ce >= 1.0 else max(1, math.ceil(math.log(ce) / math.log(q)))
    early = ce * model.lam / (model.lam + model.lam0)

    v = ValueFunction(
        nodes=fs.grid.nodes,
        values=np.zeros_like(fs.grid.nodes),
        threshold=np.inf,
        stderr=np.zeros_like(fs.grid.nodes),
    )
    trace = IterationTrace()
    phi_n = None
    sup_diff = math.inf
    for n in range(1, n_star + 1):
        phi_n, fs = find_threshold(v, fs, model)
        if v.nodes.size != fs.grid.nodes.size:  # grid was extended mid-run
            pad = fs.grid.nodes.size - v.nodes.size
            v = ValueFunction(
                nodes=fs.grid.nodes,
                values=np.concatenate([v.values, np.zeros(pad)]),
                threshold=v.threshold,
                stderr=np.concatenate([v.stderr, np.zeros(pad)]),
            )
        if mode == "quadrature":
            v_next = apply_H_quadrature(v, phi_n, fs, model)
        else:
            i_r = int(round(phi_n / fs.grid.h))
            stride = max(1, i_r // mc_nodes)
            node_idx = list(range(1, i_r, stride))
            v_next = apply_H_mc(v, phi_n, model, mc, fs.grid, node_indices=node_idx)
            filled = np.interp(
                fs.grid.nodes,
                fs.grid.nodes[node_idx + [i_r]],
                np.append(v_next.values[node_idx], 0.0),
            )
            filled[fs.grid.nodes >= phi_n] = 0.0
            projected = _project_cone(filled, fs.grid.h, model.c, phi_n, fs.grid.nodes)
            err = np.interp(
                fs.grid.nodes,
                fs.grid.nodes[node_idx + [i_r]],
                np.append(v_next.stderr[node_idx], 0.0),
            )
            v_next = ValueFunction(
                nodes=fs.grid.nodes, values=projected, threshold=phi_n, stderr=err
            )
        combined = 3.0 * (np.max(v.stderr) + np.max(v_next.stderr)) + 1e-9 / model.c
        if np.any(v_next.values > v.values + combined):
            raise MonotonicityError(
                f"iterate {n} increased beyond combined noise; raise the MC budget"
            )
        sup_diff = float(np.max(np.abs(v_next.values - v.values)))
        trace.append(n, phi_n, sup_diff, (1.0 / model.c) * q**n)
        v = v_next
        if sup_diff < early:
            break

    n_done = len(trace)
    cert_apriori = (1.0 / model.c) * q**n_done
    cert_early = sup_diff * (model.lam0 / model.lam)
    certificates = {
        "n_star": n_star,
        "n_done": n_done,
        "apriori_value_bound": cert_apriori,
        "early_exit_value_bound": cert_early,
        "value_bound": min(cert_apriori, cert_early),
        "risk_bound": model.c * min(cert_apriori, cert_early),
    }
    return v, phi_n, trace, certificates, fs


@dataclass(frozen=True)
class Solution:
    phi_inf: float
    phi_bracket: tuple
    v: ValueFunction
    trace: IterationTrace
    certificates: dict
    pi_grid: np.ndarray
    risk: np.ndarray
    fs: FundamentalSolutions


def solve(
    model: ReducedModel,
    eps: float,
    mc: MCConfig,
    mode: str = "quadrature",
    fs: FundamentalSolutions | None = None,
    h: float | None = None,
    grid_margin: float = 2.0,
) -> Solution:
    """Full pipeline: value iteration plus the Bayes-risk curve U(pi)."""
    v, phi_inf, trace, certs, fs = value_iterate(
        model, eps, mc, mode=mode, fs=fs, h=h, grid_margin=grid_margin
    )
    pi_grid = np.arange(0.0, 1.0, 0.01)
    odds = pi_grid / (1.0 - pi_grid)
    vals = np.asarray(v(odds))
    risk = np.array(
        [bayes_risk_from_value(p, val, model.c) for p, val in zip(pi_grid, vals)]
    )
    hq = fs.grid.h / 4.0
    return Solution(
        phi_inf=phi_inf,
        phi_bracket=(phi_inf - hq, phi_inf + hq),
        v=v,
        trace=trace,
        certificates=certs,
        pi_grid=pi_grid,
        risk=risk,
        fs=fs,
    )
