"""Increasing/decreasing fundamental solutions psi, eta of the discounted
generator equation (lam + lam0) u = A0 u on the grid, the scale density S',
and the Wronskian reference constant.

psi and eta are built by backward recursions over per-edge hitting-time
Laplace transforms estimated with the chain Monte Carlo engine:

    psi(z_n) = psi(z_{n+1}) * E^{z_n}[exp(-beta tau_{z_{n+1}})]
    eta(z_n) = eta(z_{n+1}) / E^{z_{n+1}}[exp(-beta tau_{z_n})]

both normalized to 1 at z_max.  Everything is stored in the log domain:
eta diverges like exp(2 lam / (mu^2 z)) as z -> 0, far beyond double range
on fine grids.

Near zero the downcrossing factors collapse doubly exponentially
(E[exp(-beta tau)] ~ exp(-2 lam h / (mu^2 z^2))), so no Monte Carlo budget
can estimate them.  Below an automatically chosen floor node, eta is
continued with the closed consequence of the Wronskian identity:
eta(z) = const * psi(z) * integral_z^inf S'/psi^2, whose lower-endpoint
Laplace approximation gives eta(z) ~ C S'(z) z^2 mu^2 / (2 lam psi(z)).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np

from . import _kernels
from .chain import (
    GridSpec,
    MCConfig,
    MCEstimate,
    InconsistencyError,
    _default_max_steps,
    _q_star,
    _run_batches,
)
from .model import ReducedModel

__all__ = [
    "FundamentalSolutions",
    "compute_psi",
    "compute_eta",
    "eta_from_identity",
    "build",
    "extend_grid",
    "scale_density",
    "log_scale_density",
    "wronskian_ref",
]

#: downcrossing factors are estimated only where they exceed roughly exp(-3)
_ETA_FLOOR_FACTOR = 3.0

#: bottom edges (see _relax_level) get this relaxed per-factor stderr target
_RELAXED_TARGET = 1e-2


class DivisionInstabilityError(RuntimeError):
    """A downcrossing factor is indistinguishable from zero at this budget."""


def _edge_seed(master_seed: int, direction: int, edge: int) -> int:
    token = (master_seed ^ ((2 * edge + direction) * int(_kernels.PATH))) & (2**64 - 1)
    return int(_kernels._mix(np.uint64(token))) & (2**63 - 1)


def log_scale_density(y, model: ReducedModel):
    y = np.asarray(y, dtype=float)
    out = 2.0 * model.lam / (model.mu**2 * y) - (2.0 * model.a / model.mu**2) * np.log(y)
    return out if out.ndim else float(out)


def scale_density(y, model: ReducedModel):
    """S'(y) = exp(2 lam / (mu^2 y)) * y^(-2a/mu^2), proportionality constant 1."""
    if np.any(np.asarray(y) <= 0):
        raise ValueError("scale density has an essential singularity at y = 0")
    out = np.exp(log_scale_density(y, model))
    return out if np.ndim(y) else float(out)


@dataclass(frozen=True)
class FundamentalSolutions:
    grid: GridSpec
    log_psi: np.ndarray
    log_eta: np.ndarray
    psi_rel_err: np.ndarray
    eta_rel_err: np.ndarray
    eta_floor_index: int
    b_ref: float | None = None
    b_dispersion: float | None = None
    model: ReducedModel | None = None
    mc: MCConfig | None = None
    eta_method: str = "identity"

    @property
    def psi(self) -> np.ndarray:
        return np.exp(self.log_psi)

    @property
    def eta(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_eta)

    @property
    def s_prime(self) -> np.ndarray:
        nodes = self.grid.nodes
        out = np.full_like(nodes, np.nan)
        if self.model is not None:
            out[0] = np.inf
            with np.errstate(over="ignore"):
                out[1:] = np.exp(log_scale_density(nodes[1:], self.model))
        return out

    def to_csv(self, path) -> None:
        with np.errstate(over="ignore"):
            psi = self.psi
            eta = self.eta
        with open(path, "w", newline="") as fh:
            b_ref = None if self.b_ref is None else float(self.b_ref)
            b_disp = None if self.b_dispersion is None else float(self.b_dispersion)
            fh.write(f"# h={float(self.grid.h)!r} n_points={self.grid.n_points}\n")
            fh.write(f"# b_ref={b_ref!r} b_dispersion={b_disp!r} "
                     f"eta_floor_index={self.eta_floor_index} eta_method={self.eta_method}\n")
            writer = csv.writer(fh)
            writer.writerow(["node", "psi", "eta", "s_prime", "rel_err",
                             "log_psi", "log_eta", "eta_rel_err"])
            sp = self.s_prime if self.model is not None else np.full(psi.shape, np.nan)
            for i, z in enumerate(self.grid.nodes):
                writer.writerow([repr(float(x)) for x in (
                    z, psi[i], eta[i], sp[i], self.psi_rel_err[i],
                    self.log_psi[i], self.log_eta[i], self.eta_rel_err[i])])

    @staticmethod
    def from_csv(path) -> "FundamentalSolutions":
        """Inspection/caching reader; model and mc are not serialized."""
        with open(path) as fh:
            meta = {}
            line = fh.readline()
            while line.startswith("#"):
                for tok in line[1:].split():
                    key, _, val = tok.partition("=")
                    meta[key] = val
                line = fh.readline()
            rows = list(csv.reader([line] + fh.readlines()))
        body = np.array([[float(x) for x in row] for row in rows[1:]])
        grid = GridSpec(h=float(meta["h"]), n_points=int(meta["n_points"]))
        b_ref = None if meta["b_ref"] == "None" else float(meta["b_ref"])
        b_disp = None if meta["b_dispersion"] == "None" else float(meta["b_dispersion"])
        return FundamentalSolutions(
            grid=grid,
            log_psi=body[:, 5],
            log_eta=body[:, 6],
            psi_rel_err=body[:, 4],
            eta_rel_err=body[:, 7],
            eta_floor_index=int(meta["eta_floor_index"]),
            b_ref=b_ref,
            b_dispersion=b_disp,
            eta_method=meta.get("eta_method", "identity"),
        )


#: bound table placeholder for up edges, where the level kill never fires
_NO_BOUND = np.zeros(2)


def _ladder_factor(
    i0: int,
    i_target: int,
    tables,
    log_bound: np.ndarray,
    ref: float,
    q_star: float,
    grid: GridSpec,
    model: ReducedModel,
    mc: MCConfig,
    target: float | None,
) -> MCEstimate:
    """One adjacent-edge Laplace factor through the shared-table kernel.

    The recursions visit every grid edge, so the per-level step parameters
    are tabulated once per sweep instead of per edge, and downcrossing
    paths that escape upward are killed against log_bound: the log of a
    valid upper bound on eta at each level, relative to ref (the value at
    the edge's lower node).  Inside the estimated region that bound is the
    accumulated log eta itself, which near zero collapses the kill radius
    by orders of magnitude compared to the generic q_star power law.
    """
    p_up, dt = tables
    direction = 1 if i_target < i0 else 0
    seed = _edge_seed(mc.master_seed, direction, min(i0, i_target))
    max_steps = mc.max_steps_per_path or _default_max_steps(grid)
    mu2 = model.mu**2

    def runner(offset, out):
        return _kernels.ladder_edge_batch(
            i0, i_target, grid.h, mu2, model.lam, model.a, model.beta,
            p_up, dt, log_bound, ref, q_star,
            seed, offset, out.size, max_steps, out,
        )

    est = _run_batches(runner, replace(mc, target_rel_stderr=target))
    if est.mean > 1.0 + 3.0 * est.stderr:
        raise InconsistencyError(
            f"edge factor {est.mean} at node {min(i0, i_target)} exceeds 1 beyond noise"
        )
    return est


def _relax_level(grid: GridSpec, model: ReducedModel) -> float:
    """Below this state the per-factor stderr target is relaxed: adjacent
    factors deviate strongly from 1 there, so tight relative targets cost
    millions of paths while contributing little to downstream accuracy."""
    return math.sqrt(20.0 * model.lam * grid.h) / abs(model.mu)


def _eta_floor(grid: GridSpec, model: ReducedModel) -> int:
    z_floor = math.sqrt(2.0 * model.lam * grid.h / (_ETA_FLOOR_FACTOR * model.mu**2))
    return max(1, int(math.ceil(z_floor / grid.h)))


def _step_tables(n_levels: int, model: ReducedModel, h: float):
    return _kernels._step_tables(n_levels, h, model.mu**2, model.lam, model.a)


def _increasing_exponents(model: ReducedModel) -> tuple[float, float]:
    """(p1, q) with psi ~ z^p1 and eta ~ z^-q at infinity."""
    mu2 = model.mu**2
    half = model.a - 0.5 * mu2
    root = math.sqrt(half * half + 2.0 * model.beta * mu2)
    return (-half + root) / mu2, (half + root) / mu2


def frobenius_log_psi(z, model: ReducedModel) -> np.ndarray:
    """log of the increasing solution via its series in 1/z.

    Infinity is a regular singular point of the resolvent equation, so the
    expansion psi(z) = z^p1 * sum_k a_k z^-k converges for every z > 0 (the
    transformed coefficients are entire) with factorially decaying terms;
    truncation stops once the next term is below 1e-17 of the leading one
    at the smallest requested node.
    """
    z = np.asarray(z, dtype=float)
    mu2 = model.mu**2
    p1, _ = _increasing_exponents(model)
    x = 1.0 / z
    x_max = float(x.max())
    coeffs = [1.0]
    ak = 1.0
    for k in range(1, 400):
        d = 0.5 * mu2 * (p1 - k) * (p1 - k - 1.0) + model.a * (p1 - k) - model.beta
        if abs(d) < 1e-9:
            raise RuntimeError(
                "resonant exponent pair; series continuation unavailable")
        ak = -model.lam * (p1 - k + 1.0) * ak / d
        coeffs.append(ak)
        if abs(ak) * x_max**k < 1e-17:
            break
    else:
        raise RuntimeError("series for the increasing solution did not converge")
    s = np.zeros_like(x)
    for c in reversed(coeffs):
        s = s * x + c
    if np.any(s <= 0.0):
        raise RuntimeError("series for the increasing solution lost positivity")
    return p1 * np.log(z) + np.log(s)


def _series_switch_index(n_points: int, h: float, model: ReducedModel) -> int:
    """First index where the series replaces per-edge Monte Carlo.

    The increasing solution generally mixes in a z^-q component; relative
    to the z^p1 part it decays like z^-(p1+q), so above
    z = 10^(12/(p1+q)) the admixture is below about 1e-12 for order-one
    mixing coefficients and the pure series is exact at working precision.
    Ladder edges cost O(z/h) chain steps each, so this switch is what
    keeps wide grids (thresholds grow like 1/c) affordable.
    """
    p1, q = _increasing_exponents(model)
    z_sw = 10.0 ** (12.0 / (p1 + q))
    return min(n_points, max(int(math.ceil(z_sw / h)), 2))


def compute_psi(grid: GridSpec, model: ReducedModel, mc: MCConfig):
    """Backward recursion for log psi plus accumulated relative error.

    Nodes above the series switch point take their values from the
    convergent expansion at infinity; Monte Carlo ladder edges fill the
    rest downward from the switch node.
    """
    n = grid.n_points
    i_sw = _series_switch_index(n, grid.h, model)
    log_psi = np.zeros(n + 1)
    rel_var = np.zeros(n + 1)
    if i_sw < n:
        tail = frobenius_log_psi(grid.nodes[i_sw:], model)
        log_psi[i_sw:] = tail - tail[-1]
    tables = _step_tables(i_sw + 1, model, grid.h)
    z_relax = _relax_level(grid, model)
    for i in range(i_sw - 1, -1, -1):
        target = mc.target_rel_stderr
        if target is not None and (i + 1) * grid.h < z_relax:
            target = max(target, _RELAXED_TARGET)
        est = _ladder_factor(i, i + 1, tables, _NO_BOUND, 0.0, 0.0, grid, model, mc, target)
        factor = min(est.mean, 1.0 - 1e-15)
        if factor <= 0.0:
            raise DivisionInstabilityError(f"upcrossing factor vanished at node {i}")
        log_psi[i] = log_psi[i + 1] + math.log(factor)
        rel_var[i] = rel_var[i + 1] + (est.stderr / factor) ** 2
    return log_psi, np.sqrt(rel_var)


def compute_eta(grid: GridSpec, model: ReducedModel, mc: MCConfig, log_psi=None):
    """Backward recursion for log eta; identity-based continuation below the floor."""
    n = grid.n_points
    tables = _step_tables(n + 1, model, grid.h)
    q_star = _q_star(model, model.beta)
    log_eta = np.zeros(n + 1)
    rel_var = np.zeros(n + 1)
    floor = _eta_floor(grid, model)
    z_relax = _relax_level(grid, model)
    for i in range(n - 1, floor - 1, -1):
        target = mc.target_rel_stderr
        if target is not None and (i + 1) * grid.h < z_relax:
            target = max(target, _RELAXED_TARGET)
        est = _ladder_factor(
            i + 1, i, tables, log_eta, float(log_eta[i + 1]), q_star,
            grid, model, mc, target,
        )
        if est.mean <= 3.0 * est.stderr:
            raise DivisionInstabilityError(
                f"downcrossing factor at node {i} is {est.mean:.3e} <= 3 stderr "
                f"{3 * est.stderr:.3e}; increase n_paths or raise the floor"
            )
        factor = min(est.mean, 1.0 - 1e-15)
        log_eta[i] = log_eta[i + 1] - math.log(factor)
        rel_var[i] = rel_var[i + 1] + (est.stderr / factor) ** 2

    if log_psi is None:
        log_psi, _ = compute_psi(grid, model, mc)
    nodes = grid.nodes
    mu2 = model.mu**2

    def log_fill(i):
        z = nodes[i]
        return (
            log_scale_density(z, model)
            + 2.0 * math.log(z)
            + math.log(mu2 / (2.0 * model.lam))
            - log_psi[i]
        )

    offset = log_eta[floor] - log_fill(floor)
    for i in range(floor - 1, 0, -1):
        log_eta[i] = offset + log_fill(i)
        rel_var[i] = rel_var[floor]
    log_eta[0] = np.inf
    rel_var[0] = rel_var[1]
    return log_eta, np.sqrt(rel_var), floor


def _exp_fit_cells(log_vals: np.ndarray, widths: np.ndarray) -> np.ndarray:
    """log of per-cell integrals assuming exponential variation between
    consecutive samples: int exp(affine) over each cell, in the log domain."""
    hi = np.maximum(log_vals[:-1], log_vals[1:])
    lo = np.minimum(log_vals[:-1], log_vals[1:])
    delta = hi - lo
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(
            delta > 1e-12,
            hi + np.log1p(-np.exp(-delta)) - np.log(delta) + np.log(widths),
            np.logaddexp(log_vals[:-1], log_vals[1:]) + np.log(widths / 2.0),
        )


def _cell_log_reciprocal(z_lo: float, z_hi: float, lp_lo: float, lp_hi: float,
                         model: ReducedModel) -> float:
    """log of int_{z_lo}^{z_hi} S'(u) exp(-2 log_psi(u)) du, integrated in
    s = 1/u, with log_psi interpolated linearly between the cell endpoints.

    In s the integrand's log is (2 lam/mu^2) s plus slowly varying terms,
    so exponential-fit pieces converge fast; the piece count is sized from
    the measured curvature of the non-affine remainder.
    """
    s_lo, s_hi = 1.0 / z_hi, 1.0 / z_lo
    slope = (lp_hi - lp_lo) / (z_hi - z_lo)

    def log_f(s):
        u = 1.0 / s
        lp = lp_lo + (u - z_lo) * slope
        return log_scale_density(u, model) - 2.0 * lp - 2.0 * np.log(s)

    s_mid = 0.5 * (s_lo + s_hi)
    curv = abs(float(log_f(np.array([s_lo]))[0] + log_f(np.array([s_hi]))[0]
                     - 2.0 * log_f(np.array([s_mid]))[0]))
    n_sub = int(min(20000, max(1, math.ceil(math.sqrt(curv / 1e-7)))))
    s = np.linspace(s_lo, s_hi, n_sub + 1)
    pieces = _exp_fit_cells(log_f(s), np.diff(s))
    top = float(pieces.max())
    return top + math.log(np.exp(pieces - top).sum())


def eta_from_identity(grid: GridSpec, model: ReducedModel, log_psi: np.ndarray,
                      tail_span: int = 50) -> np.ndarray:
    """log eta on the whole grid from the reduction-of-order identity.

    For a second-order generator the decreasing solution is recovered from
    the increasing one as eta(z) = psi(z) * integral_z^inf S'(u)/psi(u)^2 du
    (up to the Wronskian constant).  Evaluated in the log domain with
    trapezoid cells accumulated from the top and a power-law tail above
    z_max whose exponent is fitted from the last tail_span nodes, this
    turns one Monte Carlo product (psi) into both solutions.

    This is the production path for solver builds: per-edge downcrossing
    Monte Carlo has an escape-excursion variance that makes solver-grade
    targets unreachable in reasonable time for weakly mean-reverting
    models, while the identity costs one vectorized pass.  compute_eta
    remains available as the direct estimator and as a cross-check.
    """
    n = grid.n_points
    nodes = grid.nodes
    log_integrand = np.empty(n + 1)
    log_integrand[0] = np.inf
    log_integrand[1:] = log_scale_density(nodes[1:], model) - 2.0 * log_psi[1:]
    m = max(2, min(tail_span, n // 4))
    kappa = -(log_integrand[n] - log_integrand[n - m]) * nodes[n] / (m * grid.h)
    if kappa <= 1.05:
        raise RuntimeError(
            f"integrand tail exponent {kappa:.3f} too flat for a convergent "
            "tail estimate; extend the grid"
        )
    log_tail = log_integrand[n] + math.log(nodes[n] / (kappa - 1.0))
    # exponential-fit cells: exact when the log-integrand is affine across
    # the cell.  Near zero the scale density's 2 lam/(mu^2 u) term bends
    # the log-integrand far too fast for a chord fit, so cells with
    # measurable log-curvature are re-integrated in the reciprocal
    # variable s = 1/u, where that term is exactly affine, subdividing
    # until the residual curvature per piece is negligible.
    cells = _exp_fit_cells(log_integrand, grid.h * np.ones(n))
    mid = nodes[1:-1] + 0.5 * grid.h
    log_mid = log_scale_density(mid, model) - (log_psi[1:-1] + log_psi[2:])
    curv = log_integrand[1:-1] + log_integrand[2:] - 2.0 * log_mid
    for i in np.nonzero(np.abs(curv) > 1e-7)[0] + 1:
        cells[i] = _cell_log_reciprocal(
            nodes[i], nodes[i + 1], log_psi[i], log_psi[i + 1], model)
    cells[0] = np.inf  # S' is non-integrable at 0, so eta(0+) = +inf
    rev = np.logaddexp.accumulate(np.concatenate(([log_tail], cells[::-1])))
    log_eta = log_psi + rev[::-1]
    log_eta -= log_eta[n]
    return log_eta


def wronskian_ref(fs: FundamentalSolutions, span: int | None = None):
    """(b_ref, dispersion) with B(y)/S'(y) = b_ref constant across the grid.

    Uses log-domain derivatives: psi' eta - psi eta' =
    psi eta [ (log psi)' - (log eta)' ], differenced over +-span nodes.
    The default span widens with the grid (about 0.5% of the nodes, at
    least 2): per-node Monte Carlo noise enters the difference quotient
    divided by span*h, so a fixed narrow stencil would drown the signal
    on fine grids.  Returns the median over interior nodes and the
    IQR/median dispersion diagnostic.
    """
    if fs.model is None:
        raise ValueError("wronskian_ref needs the model attached to fs")
    n = fs.grid.n_points
    if span is None:
        span = max(2, n // 200)
    lo = max(fs.eta_floor_index + span, span + 1)
    hi = n - span
    if hi - lo < 5:
        raise ValueError("need at least 5 interior nodes for the Wronskian estimate")
    idx = np.arange(lo, hi)
    z = fs.grid.nodes[idx]
    dlp = (fs.log_psi[idx + span] - fs.log_psi[idx - span]) / (2 * span * fs.grid.h)
    dle = (fs.log_eta[idx + span] - fs.log_eta[idx - span]) / (2 * span * fs.grid.h)
    log_b = fs.log_psi[idx] + fs.log_eta[idx] + np.log(dlp - dle) - log_scale_density(z, fs.model)
    b = np.exp(log_b)
    med = float(np.median(b))
    q1, q3 = np.percentile(b, [25, 75])
    dispersion = float((q3 - q1) / med)
    return med, dispersion


def build(
    grid: GridSpec,
    model: ReducedModel,
    mc: MCConfig,
    span: int | None = None,
    eta_method: str = "identity",
) -> FundamentalSolutions:
    """Compute psi, eta and the Wronskian constant on the given grid.

    eta_method "identity" (default) derives eta from psi through the
    reduction-of-order quadrature; "ladder" runs the per-edge downcrossing
    Monte Carlo recursion, which is the direct estimator but orders of
    magnitude slower at tight targets.
    """
    grid.validate_no_exit(model)
    log_psi, psi_err = compute_psi(grid, model, mc)
    if eta_method == "identity":
        log_eta = eta_from_identity(grid, model, log_psi)
        # smooth propagation of the psi noise through the quadrature;
        # the ratio eta/psi averages 1/psi^2 so errors at most triple
        eta_err = 3.0 * psi_err
        floor = 0
    elif eta_method == "ladder":
        log_eta, eta_err, floor = compute_eta(grid, model, mc, log_psi=log_psi)
    else:
        raise ValueError(f"unknown eta_method {eta_method!r}")
    fs = FundamentalSolutions(
        grid=grid,
        log_psi=log_psi,
        log_eta=log_eta,
        psi_rel_err=psi_err,
        eta_rel_err=eta_err,
        eta_floor_index=floor,
        model=model,
        mc=mc,
        eta_method=eta_method,
    )
    b_ref, disp = wronskian_ref(fs, span=span)
    if b_ref <= 0:
        raise RuntimeError("Wronskian constant must be strictly positive")
    return replace(fs, b_ref=b_ref, b_dispersion=disp)


def extend_grid(fs: FundamentalSolutions, new_z_max: float, mc: MCConfig | None = None) -> FundamentalSolutions:
    """Extend psi/eta upward to new_z_max; existing nodes are untouched.

    psi(z_{n+1}) = psi(z_n) / E^{z_n}[e^{-beta tau_{z_{n+1}}}] and
    eta(z_{n+1}) = eta(z_n) * E^{z_{n+1}}[e^{-beta tau_{z_n}}].
    """
    if fs.model is None:
        raise ValueError("extend_grid needs the model attached to fs")
    mc = mc or fs.mc
    grid = fs.grid
    if new_z_max <= grid.z_max:
        raise ValueError("new_z_max must exceed the current z_max")
    n_new = int(math.ceil(new_z_max / grid.h))
    big = GridSpec(h=grid.h, n_points=n_new)
    n_old = grid.n_points
    log_psi = np.concatenate([fs.log_psi, np.empty(n_new - n_old)])
    log_eta = np.concatenate([fs.log_eta, np.empty(n_new - n_old)])
    psi_var = np.concatenate([fs.psi_rel_err**2, np.empty(n_new - n_old)])
    eta_var = np.concatenate([fs.eta_rel_err**2, np.empty(n_new - n_old)])
    i_sw = _series_switch_index(n_new, grid.h, fs.model)
    n_ladder = min(i_sw, n_new)
    tables = _step_tables(n_ladder + 1, fs.model, grid.h)
    q_star = _q_star(fs.model, fs.model.beta)
    ladder_eta = fs.eta_method == "ladder"
    for i in range(n_old, n_ladder):
        up = _ladder_factor(
            i, i + 1, tables, _NO_BOUND, 0.0, 0.0, big, fs.model, mc,
            mc.target_rel_stderr,
        )
        f_up = min(up.mean, 1.0 - 1e-15)
        if f_up <= 0:
            raise DivisionInstabilityError(f"extension factor degenerate at node {i}")
        log_psi[i + 1] = log_psi[i] - math.log(f_up)
        psi_var[i + 1] = psi_var[i] + (up.stderr / f_up) ** 2
        if ladder_eta:
            # nothing is known above the frontier yet, so the downcrossing
            # kill bound falls back to the power tail anchored at the target
            down = _ladder_factor(
                i + 1, i, tables, log_eta[: i + 1], float(log_eta[i]), q_star,
                big, fs.model, mc, mc.target_rel_stderr,
            )
            f_down = min(down.mean, 1.0 - 1e-15)
            if f_down <= 3.0 * down.stderr:
                raise DivisionInstabilityError(f"extension factor degenerate at node {i}")
            log_eta[i + 1] = log_eta[i] + math.log(f_down)
            eta_var[i + 1] = eta_var[i] + (down.stderr / f_down) ** 2
    if i_sw < n_new:
        # above the switch the convergent series continues psi exactly,
        # anchored at the switch node (whose value the old grid or the
        # ladder loop above has already fixed)
        first = max(i_sw, n_old) + 1
        tail = frobenius_log_psi(big.nodes[i_sw:], fs.model)
        log_psi[first:] = tail[first - i_sw:] - tail[0] + log_psi[i_sw]
        psi_var[first:] = psi_var[i_sw]
        if ladder_eta:
            raise DivisionInstabilityError(
                "ladder eta cannot be extended past the series switch point; "
                "rebuild with the identity method for wide grids"
            )
    if not ladder_eta:
        log_eta = eta_from_identity(big, fs.model, log_psi)
        eta_var = (3.0 * np.sqrt(psi_var)) ** 2
    ext = replace(
        fs,
        grid=big,
        log_psi=log_psi,
        log_eta=log_eta,
        psi_rel_err=np.sqrt(psi_var),
        eta_rel_err=np.sqrt(eta_var),
    )
    b_ref, disp = wronskian_ref(ext)
    return replace(ext, b_ref=b_ref, b_dispersion=disp)
