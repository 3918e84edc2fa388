"""Problem reduction and risk-conversion tests."""

import math

import numpy as np
import pytest

from qdetect.marks import MarkModel, jump_factor_table
from qdetect.model import (
    PoissonSource,
    ReducedModel,
    SourceSpec,
    bayes_risk_from_value,
    reduce_sources,
    running_cost_g,
)

from conftest import make_model


class TestReducedModel:
    def test_derived_quantities(self):
        m = make_model(mu=2.0, lam0=6.0, lam1=1.5, lam=0.5, prior=0.2)
        assert m.a == 0.5 - 1.5 + 6.0
        assert m.beta == 0.5 + 6.0
        assert m.phi0 == pytest.approx(0.25)

    @pytest.mark.parametrize(
        "overrides",
        [
            {"mu": 0.0},
            {"lam0": 0.0},
            {"lam1": -1.0},
            {"lam": 0.0},
            {"c": 0.0},
            {"prior": 1.0},
            {"prior": -0.1},
        ],
    )
    def test_rejects_invalid_parameters(self, overrides):
        with pytest.raises(ValueError):
            make_model(**overrides)


class TestReduceSources:
    def test_single_simple_source_stays_simple(self):
        spec = SourceSpec(
            wiener_drifts=(3.0, 4.0),
            poisson_sources=(PoissonSource(2.0, 5.0, MarkModel.simple()),),
            disorder_rate=0.5,
            prior=0.1,
            delay_cost=2.0,
        )
        m = reduce_sources(spec)
        assert m.mu == pytest.approx(5.0)  # Euclidean norm of the drifts
        assert m.lam0 == 2.0 and m.lam1 == 5.0
        assert m.marks.kind == "simple"
        assert m.lam == 0.5 and m.c == 2.0 and m.prior == 0.1

    def test_superposed_simple_sources_keep_per_source_jump_factors(self):
        spec = SourceSpec(
            wiener_drifts=(1.0,),
            poisson_sources=(
                PoissonSource(2.0, 1.0, MarkModel.simple()),
                PoissonSource(3.0, 6.0, MarkModel.simple()),
            ),
            disorder_rate=1.0,
            prior=0.0,
            delay_cost=1.0,
        )
        m = reduce_sources(spec)
        assert m.lam0 == 5.0 and m.lam1 == 7.0
        table = jump_factor_table(m.marks, m.lam0, m.lam1)
        # each atom's multiplicative update must equal its source's rate ratio
        got = sorted(zip(table.factors, table.weights))
        assert got[0][0] == pytest.approx(0.5)  # 1/2 from the first source
        assert got[1][0] == pytest.approx(2.0)  # 6/3 from the second
        # pre-change weights are the rate shares lam0_i / lam0
        assert got[0][1] == pytest.approx(2.0 / 5.0)
        assert got[1][1] == pytest.approx(3.0 / 5.0)

    def test_duplicate_atoms_merge_by_label(self):
        marks = MarkModel.discrete(("a", "b"), [0.5, 0.5], [0.25, 0.75])
        spec = SourceSpec(
            wiener_drifts=(1.0,),
            poisson_sources=(
                PoissonSource(1.0, 1.0, marks),
                PoissonSource(1.0, 1.0, marks),
            ),
            disorder_rate=1.0,
            prior=0.0,
            delay_cost=1.0,
        )
        m = reduce_sources(spec)
        assert m.marks.n_atoms == 2
        assert np.allclose(sorted(m.marks.nu0), [0.5, 0.5])
        assert np.allclose(sorted(m.marks.nu1), [0.25, 0.75])

    def test_all_zero_drifts_rejected(self):
        spec = SourceSpec(
            wiener_drifts=(0.0, 0.0),
            poisson_sources=(PoissonSource(1.0, 2.0, MarkModel.simple()),),
            disorder_rate=1.0,
            prior=0.0,
            delay_cost=1.0,
        )
        with pytest.raises(ValueError, match="mu != 0"):
            reduce_sources(spec)

    def test_requires_a_point_process(self):
        with pytest.raises(ValueError):
            SourceSpec(
                wiener_drifts=(1.0,),
                poisson_sources=(),
                disorder_rate=1.0,
                prior=0.0,
                delay_cost=1.0,
            )


class TestRiskConversions:
    def test_running_cost_crosses_zero_at_rate_over_cost(self):
        m = make_model(lam=2.0, c=0.5)
        assert running_cost_g(4.0, m) == pytest.approx(0.0)
        assert running_cost_g(1.0, m) < 0 < running_cost_g(5.0, m)
        with pytest.raises(ValueError):
            running_cost_g(-1.0, m)

    def test_bayes_risk_conversion(self):
        # v = 0 (stop immediately): risk is the false-alarm probability 1 - pi
        assert bayes_risk_from_value(0.3, 0.0, 1.0) == pytest.approx(0.7)
        # v = -1/c (best possible): risk collapses to 0
        assert bayes_risk_from_value(0.0, -2.0, 0.5) == pytest.approx(0.0)
        with pytest.raises(ValueError):
            bayes_risk_from_value(1.0, -0.5, 1.0)
        with pytest.raises(ValueError):
            bayes_risk_from_value(0.5, 0.5, 1.0)
        with pytest.raises(ValueError):
            bayes_risk_from_value(0.5, -3.0, 1.0)
