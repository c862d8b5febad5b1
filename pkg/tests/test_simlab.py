import json
import math
from dataclasses import replace

import numpy as np
import pytest

from hazrecal.el import Constraint
from hazrecal.errors import HazrecalError
from hazrecal.simlab import (COVARIATE_DESIGNS, CompetingConfig, ScenarioConfig, aalen_johansen,
                             aggregate, generate_binary_cohort, generate_cohort, metrics_to_csv,
                             replicate_rng, run_replicates, run_scenario, summarize_target,
                             UKB_SOURCE, UKB_LOG_HR, UKB_LOG_HR_COMPETING, weibull_inverse)
from hazrecal.survival import Cohort

LOG2 = math.log(2)


def small_config(**kw):
    base = dict(n_source=300, m_target=3000, replicates=6, seed=11,
                estimators=("breslow", "unweighted", "weighted2"))
    base.update(kw)
    return ScenarioConfig.from_names("A1", "C1", **base)


class TestGenerator:
    def test_inverse_transform_zero_covariates(self):
        assert weibull_inverse(np.array([1.0]), 0.01, 2.0, 1.0, np.array([0.0]))[0] == \
            pytest.approx(100.0)

    def test_inverse_transform_with_covariates(self):
        lp = np.array([1.0, 0.0]) @ np.array([LOG2, LOG2])
        t = weibull_inverse(np.array([1.0]), 0.01, 2.0, 1.0, np.array([lp]))[0]
        assert t == pytest.approx(100 / math.sqrt(2), rel=1e-14)

    def test_censoring_rate_band(self):
        config = ScenarioConfig.from_names("A1", "C1")
        c = generate_cohort(config, "source", replicate_rng(1, 0), size=10_000)
        assert 0.60 <= np.mean(c.event == 0) <= 0.90

    def test_integer_times_and_no_truncation(self):
        config = ScenarioConfig.from_names("A1", "C1")
        c = generate_cohort(config, "source", replicate_rng(2, 0), size=5000)
        np.testing.assert_array_equal(c.exit, np.round(c.exit))
        assert c.exit.min() >= 1 and c.exit.max() <= 100
        np.testing.assert_array_equal(c.entry, 0.0)

    def test_design_moments(self):
        config = ScenarioConfig.from_names("A1", "C3")
        c = generate_cohort(config, "target", replicate_rng(3, 0), size=200_000)
        mom = COVARIATE_DESIGNS["C3"].moments()
        z1, z2 = c.covariates.T
        assert np.mean(z1) == pytest.approx(mom["E[Z1]"], abs=0.005)
        assert np.mean(z2) == pytest.approx(mom["E[Z2]"], abs=0.01)
        assert np.mean(z2**2) == pytest.approx(mom["E[Z2^2]"], abs=0.02)

    def test_competing_events_recorded(self):
        config = small_config(competing=CompetingConfig(1.0, 1.0, (0.0, 0.0)))
        c = generate_cohort(config, "target", replicate_rng(4, 0))
        assert set(np.unique(c.event)) == {0, 1, 2}

    def test_replicate_streams_are_reproducible(self):
        a = replicate_rng(42, 3).random(5)
        b = replicate_rng(42, 3).random(5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, replicate_rng(42, 4).random(5))


class TestSummary:
    def test_right_continuity_beyond_events(self):
        c = Cohort(np.zeros(4), [1.0, 2.0, 5.0, 9.0], [1, 1, 0, 0], np.zeros((4, 1)))
        s = summarize_target(c, [2.0, 8.0])
        assert s.survival[1] == s.survival[0]

    def test_raw_moment_binomial_bound(self):
        config = ScenarioConfig.from_names("A1", "C2")
        m = 100_000
        c = generate_cohort(config, "target", replicate_rng(5, 0), size=m)
        s = summarize_target(c, [20.0], [Constraint("raw_moment", 1)])
        assert abs(s.constraints.targets[0] - 0.8) <= 3 * math.sqrt(0.16 / m)
        assert s.constraints.target_variances[0] == pytest.approx(0.16 / m, rel=0.05)

    def test_greenwood_magnitude(self):
        config = ScenarioConfig.from_names("A1", "C1")
        c = generate_cohort(config, "target", replicate_rng(6, 0))
        s = summarize_target(c, [20.0])
        # censoring before t=20 only inflates the binomial variance S(1-S)/m
        floor = s.survival[0] * (1 - s.survival[0]) / c.n
        assert floor * (1 - 1e-9) <= s.survival_variance[0] < 1.5 * floor
        assert s.survival_variance[0] < 1e-6

    def test_nelson_aalen_option(self):
        config = ScenarioConfig.from_names("A1", "C1")
        c = generate_cohort(config, "target", replicate_rng(7, 0), size=20_000)
        km = summarize_target(c, [20.0, 40.0])
        na = summarize_target(c, [20.0, 40.0], survival="nelson_aalen")
        assert np.all(na.survival >= km.survival)
        np.testing.assert_allclose(na.survival, km.survival, atol=1e-3)

    def test_no_one_at_risk(self):
        c = Cohort(np.zeros(3), [1.0, 2.0, 3.0], [1, 0, 1], np.zeros((3, 1)))
        with pytest.raises(HazrecalError):
            summarize_target(c, [4.0])


class TestScenario:
    def test_bit_identical_reruns(self):
        config = small_config()
        a = metrics_to_csv(run_scenario(config), config)
        b = metrics_to_csv(run_scenario(config), config)
        assert a == b

    def test_serial_equals_parallel(self):
        config = small_config(replicates=4)
        serial = run_replicates(config, [20.0, 40.0])
        parallel = run_replicates(replace(config, workers=2), [20.0, 40.0])
        for a, b in zip(serial, parallel):
            for k in a.estimates:
                np.testing.assert_array_equal(a.estimates[k], b.estimates[k])
                np.testing.assert_array_equal(a.se[k], b.se[k])

    def test_smse_consistency(self):
        config = small_config()
        eval_times = np.array([20.0, 40.0, 60.0])
        results = run_replicates(config, eval_times)
        rows = aggregate(results, config, eval_times)
        R = rows[0].replicates
        for row in rows:
            bias = row.pbias * row.truth / 100
            assert abs(row.smse**2 - (bias**2 + row.esd**2 * (R - 1) / R)) < 1e-10
            assert 0 <= row.cp <= 100

    def test_single_replicate_marks_missing(self):
        config = small_config(replicates=1)
        text = metrics_to_csv(run_scenario(config))
        header, first = text.splitlines()[:2]
        esd = header.split(",").index("esd")
        assert first.split(",")[esd] == "NA"

    def test_config_roundtrip(self):
        config = small_config(competing=CompetingConfig(0.5, 2.0, (0.1, -0.2)),
                              target_censor_zeta=0.0)
        back = ScenarioConfig.from_dict(json.loads(json.dumps(config.to_dict())))
        assert back == config

    def test_config_echoed_in_csv(self):
        config = small_config(replicates=1)
        line = metrics_to_csv(run_scenario(config), config).splitlines()[0]
        assert line.startswith("# config: ")
        assert ScenarioConfig.from_dict(json.loads(line[len("# config: "):])) == config

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            ScenarioConfig.from_names("A9", "C1")
        with pytest.raises(ValueError):
            small_config(replicates=0)
        with pytest.raises(ValueError):
            small_config(estimators=("weighted9",))


class TestEmpiricalRisk:
    def test_no_competing_equals_one_minus_km(self):
        from hazrecal.survival import kaplan_meier
        config = small_config()
        c = generate_cohort(config, "target", replicate_rng(8, 0))
        surv, _ = kaplan_meier(c)
        t = np.array([10.0, 30.0, 50.0])
        np.testing.assert_allclose(aalen_johansen(c, 0.0, t), 1 - np.asarray(surv(t)), atol=1e-12)

    def test_binary_generator(self):
        c = generate_binary_cohort(UKB_SOURCE, UKB_LOG_HR, UKB_LOG_HR_COMPETING,
                                   replicate_rng(9, 0), size=20_000)
        assert c.p == 8
        np.testing.assert_allclose(c.covariates.mean(axis=0), UKB_SOURCE.prevalence, atol=0.02)
        assert 2 in set(np.unique(c.event))
