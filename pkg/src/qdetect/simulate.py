"""Forward simulation of observations under the physical measure, the
odds-ratio filter recursion, and Monte Carlo Bayes-risk evaluation of
threshold alarm policies.

Two execution paths share one discretization contract: a transparent pure
numpy/python pair (sample_scenario + run_filter) for inspection and tests,
and a fused compiled kernel (evaluate_policy) for risk estimation at scale.
Both split every time step at the disorder time and at accepted event times,
update the filter with the integrating-factor rule

    phi <- phi * exp((a - mu^2/2) ds + mu dX) + lam ds

between events and phi <- r_j * phi at events, and check the alarm only at
the dt_sim grid times.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .marks import jump_factor_table
from .model import ReducedModel

__all__ = [
    "ScenarioConfig",
    "ObservationPath",
    "ScenarioOutcome",
    "RiskEstimate",
    "default_dt_sim",
    "sample_scenario",
    "run_filter",
    "evaluate_policy",
]

_BATCH = 4096


def _rate_scale(model: ReducedModel) -> float:
    return max(model.lam0, model.lam1, model.lam, abs(model.a), model.mu**2)


def default_dt_sim(model: ReducedModel) -> float:
    """Half the stability limit 0.1 / max(lam0, lam1, lam, |a|, mu^2)."""
    return 0.05 / _rate_scale(model)


@dataclass(frozen=True)
class ScenarioConfig:
    """Euler step, censoring budget and RNG identity for policy evaluation."""

    n_paths: int
    master_seed: int
    dt_sim: float
    max_alarm_steps: int = 1_000_000

    def __post_init__(self):
        if self.n_paths <= 0:
            raise ValueError("n_paths must be positive")
        if self.dt_sim <= 0:
            raise ValueError("dt_sim must be positive")
        if self.max_alarm_steps <= 0:
            raise ValueError("max_alarm_steps must be positive")

    def validate_stability(self, model: ReducedModel):
        limit = 0.1 / _rate_scale(model)
        if self.dt_sim > limit * (1 + 1e-12):
            raise ValueError(
                f"dt_sim={self.dt_sim} exceeds the stability limit {limit}"
            )

    @staticmethod
    def for_model(model: ReducedModel, n_paths: int, master_seed: int,
                  dt_sim: float | None = None,
                  max_alarm_steps: int = 1_000_000) -> "ScenarioConfig":
        cfg = ScenarioConfig(
            n_paths=n_paths,
            master_seed=master_seed,
            dt_sim=dt_sim if dt_sim is not None else default_dt_sim(model),
            max_alarm_steps=max_alarm_steps,
        )
        cfg.validate_stability(model)
        return cfg


@dataclass(frozen=True)
class ObservationPath:
    """One simulated observation record on [0, horizon].

    Segment boundaries are the union of the dt_sim grid, accepted event
    times and the disorder time; `dx` holds the Wiener increment over each
    segment (with drift mu active from theta on), `event_mark[i]` the atom
    index of an event at boundary `times[i]` (-1 when none), and
    `is_grid[i]` flags the alarm-check times.
    """

    theta: float
    dt_sim: float
    horizon: float
    times: np.ndarray
    dx: np.ndarray
    event_mark: np.ndarray
    is_grid: np.ndarray

    def __post_init__(self):
        if self.times.size != self.dx.size + 1:
            raise ValueError("need one Wiener increment per segment")


def sample_scenario(
    model: ReducedModel,
    rng: np.random.Generator,
    horizon: float | None = None,
    dt_sim: float | None = None,
) -> ObservationPath:
    """Draw the disorder time, the marked point process (by thinning at
    max(lam0, lam1)) and the Wiener channel over [0, horizon]."""
    dt = dt_sim if dt_sim is not None else default_dt_sim(model)
    if horizon is None:
        horizon = 50.0 * dt
    theta = 0.0 if rng.uniform() < model.prior else rng.exponential(1.0 / model.lam)

    r_max = max(model.lam0, model.lam1)
    t = 0.0
    ev_times, ev_marks = [], []
    nu0 = model.marks.nu0 if model.marks.kind == "discrete" else np.array([1.0])
    nu1 = model.marks.nu1 if model.marks.kind == "discrete" else np.array([1.0])
    while True:
        t += rng.exponential(1.0 / r_max)
        if t >= horizon:
            break
        rate = model.lam0 if t < theta else model.lam1
        if rng.uniform() * r_max < rate:
            weights = nu0 if t < theta else nu1
            ev_times.append(t)
            ev_marks.append(int(rng.choice(weights.size, p=weights)))

    n_grid = int(round(horizon / dt))
    grid = dt * np.arange(n_grid + 1)
    boundaries = [grid]
    if ev_times:
        boundaries.append(np.asarray(ev_times))
    if 0.0 < theta < horizon:
        boundaries.append(np.array([theta]))
    times = np.unique(np.concatenate(boundaries))
    seg = np.diff(times)
    drift = np.where(times[:-1] >= theta, model.mu, 0.0)
    dx = drift * seg + np.sqrt(seg) * rng.standard_normal(seg.size)

    event_mark = np.full(times.size, -1, dtype=np.int64)
    for et, mk in zip(ev_times, ev_marks):
        event_mark[np.searchsorted(times, et)] = mk
    is_grid = np.isin(times, grid)
    return ObservationPath(
        theta=theta, dt_sim=dt, horizon=horizon,
        times=times, dx=dx, event_mark=event_mark, is_grid=is_grid,
    )


def run_filter(path: ObservationPath, model: ReducedModel, phi_star: float):
    """Replay the odds-ratio filter along a recorded path.

    Returns (phi trajectory at every boundary, alarm time or None).
    """
    if phi_star <= 0:
        raise ValueError("alarm threshold must be positive")
    table = jump_factor_table(model.marks, model.lam0, model.lam1)
    mu, a, lam = model.mu, model.a, model.lam
    phi = model.phi0
    traj = np.empty(path.times.size)
    traj[0] = phi
    alarm = 0.0 if (phi >= phi_star and path.is_grid[0]) else None
    for i in range(1, path.times.size):
        ds = path.times[i] - path.times[i - 1]
        phi = phi * math.exp((a - 0.5 * mu**2) * ds + mu * path.dx[i - 1]) + lam * ds
        mk = path.event_mark[i]
        if mk >= 0:
            phi = table.factors[mk] * phi
        traj[i] = phi
        if alarm is None and path.is_grid[i] and phi >= phi_star:
            alarm = float(path.times[i])
    return traj, alarm


@dataclass(frozen=True)
class ScenarioOutcome:
    """Per-path detection outcome and its Bayes penalty."""

    theta: float
    tau: float
    censored: bool

    @property
    def false_alarm(self) -> bool:
        return (not self.censored) and self.tau < self.theta

    @property
    def delay(self) -> float:
        return max(0.0, self.tau - self.theta)


@dataclass(frozen=True)
class RiskEstimate:
    """Monte Carlo mean/stderr of the detection penalty 1{tau<theta} + c (tau-theta)+."""

    mean: float
    stderr: float
    n_paths: int
    censored_count: int

    @property
    def warning(self) -> bool:
        return self.censored_count > 0.01 * self.n_paths


def evaluate_policy(
    model: ReducedModel,
    phi_star: float,
    cfg: ScenarioConfig,
    return_outcomes: bool = False,
):
    """Monte Carlo Bayes risk of the alarm rule 'stop when phi >= phi_star'.

    Censored paths (budget hit before the alarm) contribute the delay cost
    accrued up to the horizon and no false-alarm penalty.
    """
    if phi_star < 0:
        raise ValueError("alarm threshold must be nonnegative")
    cfg.validate_stability(model)
    if phi_star <= model.phi0:
        # the alarm fires at time zero; penalty is the false-alarm indicator
        n = cfg.n_paths
        is_pre = np.empty(n, dtype=bool)
        thetas = np.empty(n)
        for p in range(n):
            # the compiled helpers hand the state back as a Python int, so
            # re-wrap it as uint64 before the next dispatch
            state = np.uint64(_kernels._stream(cfg.master_seed, p))
            state, u = _kernels._next_u(state)
            if u < model.prior:
                is_pre[p] = False
                thetas[p] = 0.0
            else:
                is_pre[p] = True  # theta > 0, so tau = 0 is a false alarm
                state, u = _kernels._next_u(np.uint64(state))
                thetas[p] = -math.log(u) / model.lam
        pen = is_pre.astype(float)
        mean = float(pen.mean())
        stderr = float(pen.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
        est = RiskEstimate(mean=mean, stderr=stderr, n_paths=n, censored_count=0)
        if return_outcomes:
            outs = [
                ScenarioOutcome(theta=float(th), tau=0.0, censored=False)
                for th in thetas
            ]
            return est, outs
        return est

    table = jump_factor_table(model.marks, model.lam0, model.lam1)
    nu0 = model.marks.nu0 if model.marks.kind == "discrete" else np.array([1.0])
    nu1 = model.marks.nu1 if model.marks.kind == "discrete" else np.array([1.0])
    cum0 = np.cumsum(nu0)
    cum1 = np.cumsum(nu1)

    theta_out = np.empty(cfg.n_paths)
    tau_out = np.empty(cfg.n_paths)
    penalty_out = np.empty(cfg.n_paths)
    censored_out = np.zeros(cfg.n_paths, dtype=np.int64)
    done = 0
    while done < cfg.n_paths:
        n = min(_BATCH, cfg.n_paths - done)
        _kernels.policy_batch(
            model.mu, model.lam0, model.lam1, model.lam, model.a, model.c,
            model.prior, table.factors, cum0, cum1, phi_star, cfg.dt_sim,
            cfg.max_alarm_steps, cfg.master_seed, done, n,
            theta_out[done : done + n], tau_out[done : done + n],
            penalty_out[done : done + n], censored_out[done : done + n],
        )
        done += n

    mean = float(penalty_out.mean())
    stderr = float(penalty_out.std(ddof=1) / math.sqrt(cfg.n_paths)) if cfg.n_paths > 1 else 0.0
    censored = int(censored_out.sum())
    est = RiskEstimate(mean=mean, stderr=stderr, n_paths=cfg.n_paths, censored_count=censored)
    if est.warning:
        warnings.warn(
            f"{censored} of {cfg.n_paths} paths hit the alarm budget", RuntimeWarning
        )
    if return_outcomes:
        outs = [
            ScenarioOutcome(theta=float(th), tau=float(ta), censored=bool(ce))
            for th, ta, ce in zip(theta_out, tau_out, censored_out)
        ]
        return est, outs
    return est
