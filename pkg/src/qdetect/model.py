"""Problem specification, multisource reduction and Bayes-risk conversions.

Several independent Wiener channels (post-disorder drifts mu_j) and
compound Poisson channels (rates lam0_i -> lam1_i, mark laws nu0_i -> nu1_i)
all change character at a common exponentially distributed disorder time.
The detection problem is equivalent to a canonical one with a single
Wiener channel of drift mu = ||mu_vec|| and a single marked point process
with aggregate rates and mixture mark laws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .marks import MarkModel, likelihood_ratio

__all__ = [
    "PoissonSource",
    "SourceSpec",
    "ReducedModel",
    "reduce_sources",
    "running_cost_g",
    "bayes_risk_from_value",
]


@dataclass(frozen=True)
class PoissonSource:
    lam0: float
    lam1: float
    marks: MarkModel

    def __post_init__(self):
        if self.lam0 <= 0 or self.lam1 <= 0:
            raise ValueError("point-process rates must be strictly positive")


@dataclass(frozen=True)
class SourceSpec:
    """Raw multisource problem description before reduction."""

    wiener_drifts: tuple
    poisson_sources: tuple
    disorder_rate: float
    prior: float
    delay_cost: float

    def __post_init__(self):
        object.__setattr__(self, "wiener_drifts", tuple(float(d) for d in self.wiener_drifts))
        object.__setattr__(self, "poisson_sources", tuple(self.poisson_sources))
        if self.disorder_rate <= 0:
            raise ValueError("disorder rate must be strictly positive")
        if not (0.0 <= self.prior < 1.0):
            raise ValueError("prior mass must lie in [0, 1)")
        if self.delay_cost <= 0:
            raise ValueError("delay cost must be strictly positive")
        if not self.poisson_sources:
            raise ValueError("at least one point-process source is required")


@dataclass(frozen=True)
class ReducedModel:
    """Canonical single-channel parameters; `a` is the derived drift slope."""

    mu: float
    lam0: float
    lam1: float
    lam: float
    c: float
    prior: float
    marks: MarkModel

    def __post_init__(self):
        if self.mu == 0.0:
            raise ValueError("canonical model requires mu != 0")
        if min(self.lam0, self.lam1, self.lam, self.c) <= 0:
            raise ValueError("rates and delay cost must be strictly positive")
        if not (0.0 <= self.prior < 1.0):
            raise ValueError("prior mass must lie in [0, 1)")

    @property
    def a(self) -> float:
        return self.lam - self.lam1 + self.lam0

    @property
    def beta(self) -> float:
        """Discount rate of the between-jump resolvent equations."""
        return self.lam + self.lam0

    @property
    def phi0(self) -> float:
        """Initial odds ratio pi/(1-pi)."""
        return self.prior / (1.0 - self.prior)


def reduce_sources(spec: SourceSpec) -> ReducedModel:
    """Collapse a multisource spec to the canonical single-channel model.

    mu is the Euclidean norm of the drift vector, the point processes
    superpose (rates add), and the mark laws mix with weights lam0_i/lam0
    pre-change and lam1_i/lam1 post-change.  Duplicate atom labels across
    sources merge by summing weights (exact label equality).
    """
    mu = float(np.linalg.norm(spec.wiener_drifts))
    if mu == 0.0:
        raise ValueError("canonical model requires mu != 0 (all Wiener drifts were zero)")

    for src in spec.poisson_sources:
        if src.marks.kind == "discrete":
            for i in range(src.marks.n_atoms):
                likelihood_ratio(src.marks, i)  # raises on absolute-continuity violation

    lam0 = sum(s.lam0 for s in spec.poisson_sources)
    lam1 = sum(s.lam1 for s in spec.poisson_sources)

    if len(spec.poisson_sources) == 1 and spec.poisson_sources[0].marks.kind == "simple":
        marks: MarkModel = MarkModel.simple()
    else:
        # a simple source contributes one pseudo-atom labeled by its rate
        # ratio; the mixture weights then give it the correct per-source
        # jump factor lam1_i/lam0_i after scaling by lam1/lam0
        pre: dict = {}
        post: dict = {}
        for s in spec.poisson_sources:
            if s.marks.kind == "simple":
                atoms = [("simple", s.lam1 / s.lam0)]
                nu0 = [1.0]
                nu1 = [1.0]
            else:
                atoms = list(s.marks.atoms)
                nu0 = list(s.marks.nu0)
                nu1 = list(s.marks.nu1)
            for atom, w0, w1 in zip(atoms, nu0, nu1):
                pre[atom] = pre.get(atom, 0.0) + (s.lam0 / lam0) * w0
                post[atom] = post.get(atom, 0.0) + (s.lam1 / lam1) * w1
        atoms = tuple(pre.keys())
        marks = MarkModel.discrete(
            atoms,
            np.array([pre[z] for z in atoms]),
            np.array([post[z] for z in atoms]),
        )

    return ReducedModel(
        mu=mu,
        lam0=lam0,
        lam1=lam1,
        lam=spec.disorder_rate,
        c=spec.delay_cost,
        prior=spec.prior,
        marks=marks,
    )


def running_cost_g(phi: float, model: ReducedModel) -> float:
    """g(phi) = phi - lam/c, the running cost of the continuation region."""
    if np.any(np.asarray(phi) < 0):
        raise ValueError("odds ratio must be nonnegative")
    return phi - model.lam / model.c


def bayes_risk_from_value(pi: float, value_at_odds: float, c: float) -> float:
    """U(pi) = 1 - pi + c (1 - pi) V(pi/(1-pi)); V must lie in [-1/c, 0]."""
    if not (0.0 <= pi < 1.0):
        raise ValueError("pi must lie in [0, 1)")
    if value_at_odds > 1e-12 or value_at_odds < -1.0 / c - 1e-12:
        raise ValueError(f"value {value_at_odds} outside [-1/c, 0]")
    return 1.0 - pi + c * (1.0 - pi) * value_at_odds
