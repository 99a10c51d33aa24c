import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octcvd import riskscore as R
from octcvd.cohort import CohortConfig, generate_patients


def table(intercept=-2.0, **over):
    w = {n: 0.0 for n in R.VARIABLES}
    w.update(over)
    return R.WeightTable(w, intercept)


class TestImpute:
    def test_all_absent(self):
        out = R.impute_missing(R.RiskInputs())
        assert all(getattr(out, n) == 0.0 for n in R.VARIABLES)

    def test_present_kept(self):
        out = R.impute_missing(R.RiskInputs(age=61.5, smoking=1))
        assert out.age == 61.5 and out.smoking == 1 and out.sbp == 0.0

    def test_idempotent(self):
        x = R.impute_missing(R.RiskInputs(sbp=140.0))
        assert R.impute_missing(x) == x

    def test_rejects_bad_flag(self):
        with pytest.raises(ValueError):
            R.RiskInputs(smoking=2)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            R.RiskInputs(age=math.nan)


class TestScore:
    def test_zero_inputs_give_intercept(self):
        s = R.score_baseline(R.impute_missing(R.RiskInputs()), table(-2.0))
        assert s == pytest.approx(0.11920292202211755, abs=1e-12)

    def test_requires_imputation(self):
        with pytest.raises(ValueError, match="impute"):
            R.score_baseline(R.RiskInputs(age=50.0), table())

    def test_missing_weight_named(self):
        w = {n: 0.0 for n in R.VARIABLES if n != "townsend"}
        with pytest.raises(KeyError, match="townsend"):
            R.WeightTable(w, 0.0)

    def test_missing_intercept(self, tmp_path):
        p = tmp_path / "w.csv"
        p.write_text("variable,weight\nage,0.1\n")
        with pytest.raises(KeyError, match="intercept"):
            R.read_weights(p)

    def test_default_table_directions(self):
        w = R.default_weights().weights
        for name in ("age", "sbp", "smoking", "diabetes_type1", "diabetes_type2"):
            assert w[name] > 0

    @pytest.mark.parametrize("name", ["age", "sbp", "smoking", "diabetes_type1", "diabetes_type2"])
    def test_monotone_sweep(self, name):
        base = R.impute_missing(R.RiskInputs(age=55.0, sbp=130.0, sex=1))
        lo, hi = (0.0, 1.0) if name in R.BOOLEAN_FIELDS else (getattr(base, name), getattr(base, name) + 30)
        grid = np.linspace(lo, hi, 2 if name in R.BOOLEAN_FIELDS else 7)
        scores = [R.score_baseline(R.RiskInputs(**{**base.__dict__, name: float(v)})) for v in grid]
        assert all(b > a for a, b in zip(scores, scores[1:]))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3), min_size=len(R.VARIABLES), max_size=len(R.VARIABLES)))
    def test_range(self, vals):
        vals = [float(v > 0) if n in R.BOOLEAN_FIELDS or n == "sex" else v
                for n, v in zip(R.VARIABLES, vals)]
        s = R.score_baseline(R.RiskInputs(**dict(zip(R.VARIABLES, vals))))
        assert 0.0 <= s <= 1.0

    def test_many_matches_single(self):
        pats = generate_patients(CohortConfig(n_cases=5, n_controls=5))
        recs = [R.impute_missing(R.inputs_from_patient(p)) for p in pats]
        np.testing.assert_allclose(R.score_many(recs), [R.score_baseline(r) for r in recs], rtol=1e-15)


class TestYouden:
    def test_perfect_separation(self):
        assert R.youden_threshold([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 0.8

    def test_tie_keeps_smallest(self):
        # t=0.2 and t=0.4 both give J=0.5
        assert R.youden_threshold([0.1, 0.2, 0.3, 0.4], [0, 1, 0, 1]) == 0.2

    def test_single_class(self):
        with pytest.raises(ValueError):
            R.youden_threshold([0.1, 0.2], [1, 1])

    def test_scores_file(self, tmp_path):
        p = tmp_path / "risk_scores.csv"
        R.write_scores([3, 1], [0.25, 0.5], p)
        assert p.read_text().splitlines() == ["subject_id,score", "3,0.25", "1,0.5"]
