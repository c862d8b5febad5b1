import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hazrecal.errors import CohortError, EmptyRiskSetError
from hazrecal.survival import (Cohort, StepFunction, SubjectRecord, at_risk_counts,
                               greenwood_covariance, kaplan_meier, nelson_aalen, risk_set_size)


def toy_km_cohort():
    # events at 1 and 2, censored at 1.5 and 3
    return Cohort(np.zeros(4), [1.0, 2.0, 1.5, 3.0], [1, 1, 0, 0], np.zeros((4, 1)))


@st.composite
def cohorts(draw, max_n=25, ties=True, truncation=False):
    n = draw(st.integers(2, max_n))
    if ties:
        exit_ = draw(st.lists(st.integers(1, 8), min_size=n, max_size=n))
        exit_ = np.array(exit_, dtype=float)
    else:
        exit_ = np.array(draw(st.lists(st.floats(0.1, 10), min_size=n, max_size=n, unique=True)))
    event = np.array(draw(st.lists(st.sampled_from([0, 1, 1, 2]), min_size=n, max_size=n)))
    entry = np.zeros(n)
    if truncation:
        frac = np.array(draw(st.lists(st.floats(0, 0.9), min_size=n, max_size=n)))
        entry = np.floor(frac * exit_ * 2) / 2
    z = np.array(draw(st.lists(st.floats(-2, 2), min_size=n, max_size=n))).reshape(n, 1)
    return Cohort(entry, exit_, event, z)


class TestRecords:
    def test_record_validation(self):
        with pytest.raises(CohortError):
            SubjectRecord(2.0, 1.0, 0, [0.0])
        with pytest.raises(CohortError):
            SubjectRecord(0.0, 1.0, 3, [0.0])
        with pytest.raises(CohortError):
            SubjectRecord(0.0, 1.0, 1, [np.nan])

    def test_from_records_roundtrip(self):
        c = toy_km_cohort()
        back = Cohort.from_records(c.records(), c.covariate_names)
        np.testing.assert_array_equal(back.exit, c.exit)
        np.testing.assert_array_equal(back.event, c.event)

    def test_arrays_are_read_only(self):
        c = toy_km_cohort()
        with pytest.raises(ValueError):
            c.exit[0] = 9.0

    def test_mixed_dimensions_rejected(self):
        recs = [SubjectRecord(0, 1, 1, [0.0]), SubjectRecord(0, 2, 0, [0.0, 1.0])]
        with pytest.raises(CohortError):
            Cohort.from_records(recs)


class TestStepFunction:
    def test_right_continuous(self):
        f = StepFunction(np.array([1.0, 2.0]), np.array([0.5, 0.8]), 0.0)
        assert f(0.999) == 0.0
        assert f(1.0) == 0.5
        assert f(1.5) == 0.5
        assert f(2.0) == 0.8
        np.testing.assert_allclose(f.jumps, [0.5, 0.3])

    def test_dict_roundtrip(self):
        f = StepFunction(np.array([0.5, 3.0]), np.array([0.1, 0.7]), 0.0)
        g = StepFunction.from_dict(f.to_dict())
        np.testing.assert_array_equal(g.knots, f.knots)
        np.testing.assert_array_equal(g.values, f.values)

    def test_knots_must_increase(self):
        with pytest.raises(ValueError):
            StepFunction(np.array([2.0, 1.0]), np.array([0.1, 0.2]), 0.0)


class TestRiskSet:
    def test_single_subject(self):
        c = Cohort([0.0], [5.0], [0], [[0.0]])
        assert risk_set_size(c, 3.0, [0.0], 0) == 1.0
        assert risk_set_size(c, 6.0, [0.0], 0) == 0.0

    def test_delayed_entry_hand_enumeration(self):
        c = Cohort([0.0, 2.0, 4.0], [5.0, 5.0, 5.0], [0, 0, 0], [[1.0], [0.0], [1.0]])
        assert risk_set_size(c, 3.0, [np.log(2)], 0) == pytest.approx(1.0)

    def test_orders_and_shapes(self):
        c = Cohort([0.0, 0.0], [5.0, 5.0], [0, 0], [[1.0, 2.0], [0.0, 1.0]])
        h1 = risk_set_size(c, 1.0, [0.0, 0.0], 1)
        h2 = risk_set_size(c, 1.0, [0.0, 0.0], 2)
        np.testing.assert_allclose(h1, [0.5, 1.5])
        np.testing.assert_allclose(h2, [[0.5, 1.0], [1.0, 2.5]])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            risk_set_size(toy_km_cohort(), 1.0, [0.0, 0.0], 0)

    @given(cohorts(ties=True))
    def test_nonincreasing_without_truncation(self, c):
        t = np.linspace(0.01, 9, 40)
        h = np.array([risk_set_size(c, x, [0.3], 0) for x in t])
        assert np.all(np.diff(h) <= 1e-15)


class TestKaplanMeier:
    def test_no_events(self):
        c = Cohort(np.zeros(5), np.arange(1.0, 6.0), np.zeros(5, int), np.zeros((5, 1)))
        surv, var = kaplan_meier(c)
        assert surv(10.0) == 1.0
        assert var(10.0) == 0.0

    def test_hand_product_limit(self):
        surv, var = kaplan_meier(toy_km_cohort())
        assert surv(1.0) == pytest.approx(0.75)
        assert surv(2.0) == pytest.approx(0.375)
        assert var(1.0) == pytest.approx(0.046875)

    def test_competing_treated_as_censored(self):
        a = Cohort(np.zeros(4), [1.0, 2.0, 1.5, 3.0], [1, 1, 2, 0], np.zeros((4, 1)))
        np.testing.assert_allclose(kaplan_meier(a)[0](np.arange(4.0)),
                                   kaplan_meier(toy_km_cohort())[0](np.arange(4.0)))

    def test_empty_risk_set_names_time(self):
        # the second event is recorded at its entry time and nobody else is at risk then
        c = Cohort([0.0, 1.5], [1.0, 1.5], [1, 1], np.zeros((2, 1)))
        with pytest.raises(EmptyRiskSetError, match="1.5"):
            kaplan_meier(c)
        with pytest.raises(EmptyRiskSetError):
            nelson_aalen(c)

    @given(cohorts(ties=False))
    def test_exp_na_bounds_km(self, c):
        surv, _ = kaplan_meier(c)
        cum = nelson_aalen(c)
        t = np.linspace(0, 10.5, 60)
        s = np.asarray(surv(t))
        e = np.exp(-np.asarray(cum(t)))
        assert np.all(e >= s - 1e-12)
        _, cvar = nelson_aalen(c, with_variance=True)
        assert np.all(np.abs(e - s) <= np.asarray(cvar(t)) + 1e-12)

    @given(cohorts(truncation=True), st.randoms())
    def test_permutation_invariance(self, c, rnd):
        idx = list(range(c.n))
        rnd.shuffle(idx)
        t = np.linspace(0, 9, 30)
        try:
            a = kaplan_meier(c)
        except EmptyRiskSetError:
            return
        b = kaplan_meier(c.subset(idx))
        np.testing.assert_allclose(a[0](t), b[0](t), rtol=0, atol=1e-14)
        np.testing.assert_allclose(a[1](t), b[1](t), rtol=0, atol=1e-14)

    @settings(max_examples=50)
    @given(cohorts())
    def test_greenwood_diagonal_is_variance(self, c):
        surv, var = kaplan_meier(c)
        t = np.array([1.0, 2.5, 4.0, 7.0])
        cov = greenwood_covariance(surv, var, t)
        np.testing.assert_allclose(np.diag(cov), var(t), rtol=1e-12, atol=1e-300)
        np.testing.assert_allclose(cov, cov.T)

    def test_delayed_entry_risk_set(self):
        c = Cohort([0.0, 0.0, 2.0], [1.0, 3.0, 3.0], [1, 1, 0], np.zeros((3, 1)))
        np.testing.assert_array_equal(at_risk_counts(c, np.array([1.0, 2.0, 2.5])), [2, 1, 2])
        surv, _ = kaplan_meier(c)
        # at t=3 two are at risk (subject 3 entered at 2), one event
        assert surv(3.0) == pytest.approx(0.5 * 0.5)


class TestNelsonAalen:
    def test_no_events(self):
        c = Cohort(np.zeros(3), [1.0, 2.0, 3.0], [0, 0, 2], np.zeros((3, 1)))
        assert nelson_aalen(c)(5.0) == 0.0

    def test_single_event(self):
        c = Cohort(np.zeros(4), [1.0, 2.0, 3.0, 4.0], [1, 0, 0, 0], np.zeros((4, 1)))
        assert nelson_aalen(c)(1.0) == pytest.approx(0.25)

    def test_hand_sum(self):
        assert nelson_aalen(toy_km_cohort())(2.0) == pytest.approx(0.75)

    def test_competing_code(self):
        c = Cohort(np.zeros(4), [1.0, 2.0, 3.0, 4.0], [2, 1, 2, 0], np.zeros((4, 1)))
        assert nelson_aalen(c, event_code=2)(3.0) == pytest.approx(0.25 + 0.5)
