"""Finite-support mark distributions, likelihood ratios and the jump-averaging operator K.

The operator K averages a grid function over the one-jump multiplicative
update of the odds ratio: (Kw)(phi) = sum_i nu0_i * w(r_i * phi) where
r_i = (lam1/lam0) * f(z_i) and f = dnu1/dnu0 is the mark likelihood ratio.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "MarkModel",
    "JumpFactorTable",
    "GridFunction",
    "likelihood_ratio",
    "jump_factor_table",
    "apply_K",
]

_WEIGHT_TOL = 1e-12


class AbsoluteContinuityError(ValueError):
    """Post-change mark law puts mass where the pre-change law has none."""


@dataclass(frozen=True)
class MarkModel:
    """Mark distribution of the point-process events.

    kind is "simple" for a markless point process (f == 1) or "discrete"
    for finitely many atoms with pre/post weights nu0, nu1.
    """

    kind: str
    atoms: tuple = ()
    nu0: np.ndarray = field(default_factory=lambda: np.array([]))
    nu1: np.ndarray = field(default_factory=lambda: np.array([]))

    def __post_init__(self):
        if self.kind not in ("simple", "discrete"):
            raise ValueError(f"unknown mark model kind: {self.kind!r}")
        if self.kind == "discrete":
            nu0 = np.asarray(self.nu0, dtype=float)
            nu1 = np.asarray(self.nu1, dtype=float)
            object.__setattr__(self, "nu0", nu0)
            object.__setattr__(self, "nu1", nu1)
            object.__setattr__(self, "atoms", tuple(self.atoms))
            if not (len(self.atoms) == nu0.size == nu1.size):
                raise ValueError("atoms, nu0 and nu1 must have equal length")
            if nu0.size == 0:
                raise ValueError("discrete mark model needs at least one atom")
            if np.any(nu0 <= 0):
                raise ValueError("nu0 weights must be strictly positive")
            if np.any(nu1 < 0):
                raise ValueError("nu1 weights must be nonnegative")
            if abs(nu0.sum() - 1.0) > _WEIGHT_TOL or abs(nu1.sum() - 1.0) > _WEIGHT_TOL:
                raise ValueError("mark weights must sum to 1 within 1e-12")

    @staticmethod
    def simple() -> "MarkModel":
        return MarkModel(kind="simple")

    @staticmethod
    def discrete(atoms, nu0, nu1) -> "MarkModel":
        return MarkModel(kind="discrete", atoms=tuple(atoms), nu0=np.asarray(nu0, float), nu1=np.asarray(nu1, float))

    @property
    def n_atoms(self) -> int:
        return 1 if self.kind == "simple" else len(self.atoms)


def likelihood_ratio(m: MarkModel, atom_index: int) -> float:
    """f(z_i) = nu1_i / nu0_i; identically 1 for simple marks."""
    if m.kind == "simple":
        return 1.0
    nu0_i = m.nu0[atom_index]
    nu1_i = m.nu1[atom_index]
    if nu0_i == 0.0 and nu1_i > 0.0:
        raise AbsoluteContinuityError(
            f"atom {m.atoms[atom_index]!r}: nu1 = {nu1_i} but nu0 = 0"
        )
    return nu1_i / nu0_i


@dataclass(frozen=True)
class JumpFactorTable:
    """Multiplicative odds updates r_i = (lam1/lam0) f(z_i) with pre-change weights."""

    factors: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "factors", np.asarray(self.factors, float))
        object.__setattr__(self, "weights", np.asarray(self.weights, float))
        if np.any(self.factors < 0):
            raise ValueError("jump factors must be nonnegative")


def jump_factor_table(marks: MarkModel, lam0: float, lam1: float) -> JumpFactorTable:
    ratio = lam1 / lam0
    if marks.kind == "simple":
        return JumpFactorTable(factors=np.array([ratio]), weights=np.array([1.0]))
    f = np.array([likelihood_ratio(marks, i) for i in range(marks.n_atoms)])
    return JumpFactorTable(factors=ratio * f, weights=marks.nu0.copy())


@dataclass(frozen=True)
class GridFunction:
    """Piecewise-linear function on a uniform grid with a threshold extension.

    Values are attached to nodes 0, h, 2h, ..., n*h.  Evaluation between
    nodes is linear interpolation; at and above `threshold` the function
    is 0 by convention (the value iterates vanish past their thresholds).
    """

    nodes: np.ndarray
    values: np.ndarray
    threshold: float

    def __post_init__(self):
        object.__setattr__(self, "nodes", np.asarray(self.nodes, float))
        object.__setattr__(self, "values", np.asarray(self.values, float))
        if self.nodes.shape != self.values.shape:
            raise ValueError("nodes and values must have the same shape")

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.interp(x, self.nodes, self.values, right=0.0)
        out = np.where(x >= self.threshold, 0.0, out)
        return out if out.ndim else float(out)

    @staticmethod
    def constant(value: float, nodes: np.ndarray, threshold: float = np.inf) -> "GridFunction":
        nodes = np.asarray(nodes, float)
        return GridFunction(nodes, np.full(nodes.shape, float(value)), threshold)


def apply_K(w, phi, model) -> float | np.ndarray:
    """(Kw)(phi) = sum_i nu0_i * w(r_i * phi).

    `w` is a GridFunction (threshold extension applies) or a plain callable,
    `model` a ReducedModel supplying lam0, lam1 and the mark law.
    """
    table = jump_factor_table(model.marks, model.lam0, model.lam1)
    phi_arr = np.asarray(phi, dtype=float)
    args = np.multiply.outer(table.factors, phi_arr)
    vals = w(args)
    out = np.tensordot(table.weights, np.asarray(vals, float), axes=1)
    return out if np.ndim(phi) else float(out)
