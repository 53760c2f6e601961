"""Tests for subgroup audits: summaries, Welch contrasts, BH-FDR, parity."""

import math

import numpy as np
import pytest

from normgauge import (
    BasisConfig,
    Cohort,
    InputError,
    ModelConfig,
    Subject,
    bh_fdr,
    fit_normative,
    group_difference,
    group_summary,
    parity_report,
    significant_fraction,
)


def make_race_cohort(rng, n_per_race, d=2, shift=None):
    """Cohorts with a flat age effect and optional per-race response shift."""
    races = [r for r, n in sorted(n_per_race.items()) for _ in range(n)]
    n = len(races)
    ages = rng.uniform(20, 70, n)
    noise = rng.normal(0, 0.3, (n, d))
    responses = 1.0 + 0.02 * ages[:, None] + noise
    if shift:
        for i, race in enumerate(races):
            responses[i] += shift.get(race, 0.0)
    subjects = tuple(
        Subject(
            id=f"s{i:05d}",
            age=float(ages[i]),
            sex="F" if i % 2 == 0 else "M",
            race=races[i],
        )
        for i in range(n)
    )
    regions = tuple(f"r{k}" for k in range(d))
    return Cohort(subjects=subjects, regions=regions, responses=responses)


class TestGroupSummary:
    worked = np.array([[2.5], [-2.1], [0.3], [1.9]])

    def test_worked_extreme_rates_default_threshold(self):
        out = group_summary(self.worked, ["g"] * 4, threshold=2.0)
        assert out.pct_extreme_pos["g"][0] == 0.25
        assert out.pct_extreme_neg["g"][0] == 0.25
        assert out.pct_extreme_total["g"][0] == 0.5
        assert out.mean_deviation["g"][0] == pytest.approx(0.65, abs=1e-15)

    def test_worked_extreme_rates_low_threshold(self):
        # 0.3 is not beyond the threshold 0.3: strictly greater counts
        out = group_summary(self.worked, ["g"] * 4, threshold=0.3)
        assert out.pct_extreme_total["g"][0] == 0.75

    def test_declared_empty_group_is_missing_not_zero(self):
        out = group_summary(self.worked, ["g"] * 4, group_labels=("g", "h"))
        assert out.group_sizes["h"] == 0
        assert np.isnan(out.mean_deviation["h"]).all()
        assert np.isnan(out.pct_extreme_total["h"]).all()
        assert not np.isnan(out.pct_extreme_total["g"]).any()

    def test_row_order_invariance(self):
        rng = np.random.default_rng(5)
        z = rng.normal(size=(30, 4))
        labels = list(np.where(rng.random(30) < 0.5, "A", "W"))
        base = group_summary(z, labels)
        perm = rng.permutation(30)
        shuffled = group_summary(z[perm], [labels[i] for i in perm])
        for g in base.groups:
            np.testing.assert_allclose(
                base.mean_deviation[g], shuffled.mean_deviation[g], atol=1e-14
            )
            np.testing.assert_array_equal(
                base.pct_extreme_total[g], shuffled.pct_extreme_total[g]
            )

    def test_bad_inputs_rejected(self):
        with pytest.raises(InputError):
            group_summary(self.worked, ["g"] * 4, threshold=0.0)
        with pytest.raises(InputError):
            group_summary(self.worked, ["g"] * 3)


class TestGroupDifference:
    def test_worked_two_by_two(self):
        values = np.array([[0.0], [1.0], [2.0], [3.0]])
        res = group_difference(values, ["a", "a", "b", "b"], ("a", "b"))
        assert res.t[0] == pytest.approx(-2.8284271247461903, abs=1e-14)
        assert res.df[0] == pytest.approx(2.0, abs=1e-12)
        assert res.p[0] == pytest.approx(0.10557280900008408, rel=1e-12)

    def test_identical_groups_null(self):
        values = np.array([[0.0], [1.0], [0.0], [1.0]])
        res = group_difference(values, ["a", "a", "b", "b"], ("a", "b"))
        assert res.t[0] == 0.0
        assert res.p[0] == 1.0

    def test_constant_identical_groups_null(self):
        values = np.full((4, 2), 7.0)
        res = group_difference(values, ["a", "a", "b", "b"], ("a", "b"))
        np.testing.assert_array_equal(res.t, 0.0)
        np.testing.assert_array_equal(res.p, 1.0)

    def test_constant_distinct_groups_certain(self):
        values = np.array([[1.0], [1.0], [2.0], [2.0]])
        res = group_difference(values, ["a", "a", "b", "b"], ("a", "b"))
        assert res.t[0] == -np.inf
        assert res.p[0] == 0.0

    def test_contrast_antisymmetry(self):
        rng = np.random.default_rng(11)
        values = rng.normal(size=(40, 6))
        labels = list(np.where(rng.random(40) < 0.4, "A", "W"))
        fwd = group_difference(values, labels, ("A", "W"))
        rev = group_difference(values, labels, ("W", "A"))
        np.testing.assert_array_equal(fwd.t, -rev.t)
        np.testing.assert_array_equal(fwd.p, rev.p)
        np.testing.assert_array_equal(fwd.df, rev.df)

    def test_matches_scipy_welch(self):
        from scipy import stats

        rng = np.random.default_rng(3)
        x = rng.normal(0, 1, 25)
        y = rng.normal(0.4, 2.0, 60)
        values = np.concatenate([x, y])[:, None]
        labels = ["a"] * 25 + ["b"] * 60
        res = group_difference(values, labels, ("a", "b"))
        ref = stats.ttest_ind(x, y, equal_var=False)
        assert res.t[0] == pytest.approx(ref.statistic, rel=1e-12)
        assert res.p[0] == pytest.approx(ref.pvalue, rel=1e-10)

    def test_single_member_group_untestable(self, caplog):
        values = np.arange(8.0).reshape(4, 2)
        with caplog.at_level("WARNING"):
            res = group_difference(values, ["a", "b", "b", "b"], ("a", "b"))
        assert np.isnan(res.t).all()
        assert np.isnan(res.p).all()
        assert not res.testable.any()
        assert any("untestable" in r.message for r in caplog.records)

    def test_label_count_mismatch(self):
        with pytest.raises(InputError):
            group_difference(np.zeros((3, 1)), ["a", "b"], ("a", "b"))


def bh_reference(p, q):
    """Textbook step-up: largest k with p_(k) <= k q / m, flag all p <= p_(k)."""
    p = np.asarray(p, dtype=float)
    m = p.size
    sorted_p = np.sort(p)
    k_max = 0
    for k in range(1, m + 1):
        if sorted_p[k - 1] <= k * q / m:
            k_max = k
    if k_max == 0:
        return np.zeros(m, dtype=bool)
    return p <= sorted_p[k_max - 1]


class TestBhFdr:
    def test_worked_example(self):
        flags = bh_fdr(np.array([0.001, 0.02, 0.03, 0.6]), q=0.05)
        np.testing.assert_array_equal(flags, [True, True, True, False])

    def test_all_ones_flags_nothing(self):
        assert not bh_fdr(np.ones(10), q=0.05).any()

    def test_step_up_rescues_smaller_ranks(self):
        # ranks 2 and 3 fail their own thresholds (0.025, 0.0375) but rank 4
        # passes at 0.05, so the step-up flags all four
        flags = bh_fdr(np.array([0.04, 0.049, 0.01, 0.03]), q=0.05)
        np.testing.assert_array_equal(flags, [True, True, True, True])

    def test_matches_reference_on_random_vectors(self):
        rng = np.random.default_rng(21)
        m = 148
        for _ in range(1000):
            p = rng.random(m)
            spiked = rng.random() < 0.5
            if spiked:
                k = rng.integers(1, 40)
                p[:k] = rng.random(k) * 0.01
            np.testing.assert_array_equal(bh_fdr(p, q=0.05), bh_reference(p, 0.05))

    def test_null_false_positive_rate_controlled(self):
        # global-null Welch p-values through the full pipeline: the share of
        # repetitions with any flag stays near the nominal level
        rng = np.random.default_rng(99)
        m = 148
        hits = 0
        reps = 200
        for _ in range(reps):
            values = rng.normal(size=(80, m))
            labels = ["a"] * 40 + ["b"] * 40
            res = group_difference(values, labels, ("a", "b"))
            if bh_fdr(res.p, q=0.05).any():
                hits += 1
        assert hits / reps <= 0.05 + 0.02

    def test_invalid_inputs_rejected(self):
        with pytest.raises(InputError):
            bh_fdr(np.array([0.1, 1.5]))
        with pytest.raises(InputError):
            bh_fdr(np.array([0.1, -0.01]))
        with pytest.raises(InputError):
            bh_fdr(np.array([0.1, np.nan]))
        with pytest.raises(InputError):
            bh_fdr(np.array([0.1]), q=0.0)

    def test_empty_input(self):
        assert bh_fdr(np.zeros(0)).size == 0


class TestSignificantFraction:
    def test_exact_fraction(self):
        assert significant_fraction([True, False, True, False]) == 0.5
        flags = np.zeros(148, dtype=bool)
        flags[:3] = True
        assert significant_fraction(flags) == 3 / 148

    def test_none_flagged(self):
        assert significant_fraction(np.zeros(7, dtype=bool)) == 0.0

    def test_empty_is_nan(self):
        assert math.isnan(significant_fraction(np.zeros(0, dtype=bool)))


class TestParityReport:
    def fit_and_split(self, rng, n_train, n_test_per_race, shift=None):
        train = make_race_cohort(rng, {"W": n_train})
        model = fit_normative(
            train, ModelConfig(basis=BasisConfig(knot_range=(20.0, 70.0)))
        )
        test = make_race_cohort(rng, n_test_per_race, shift=shift)
        return model, test

    def test_same_process_groups_have_small_gaps(self):
        rng = np.random.default_rng(17)
        model, test = self.fit_and_split(rng, 800, {"A": 1000, "W": 1000})
        report = parity_report(model, test)
        assert report.groups == ("A", "W")
        assert report.gaps["explained_variance"] < 0.05
        assert report.gaps["extreme_rate"] < 0.03

    def test_shifted_group_detected(self):
        rng = np.random.default_rng(23)
        # +1 noise-sd shift for group A lifts its mean deviation to about +1
        model, test = self.fit_and_split(
            rng, 800, {"A": 600, "W": 600}, shift={"A": 0.3}
        )
        report = parity_report(model, test)
        assert report.per_group["A"]["mean_deviation"] == pytest.approx(1.0, abs=0.2)
        assert report.per_group["W"]["mean_deviation"] == pytest.approx(0.0, abs=0.2)
        assert report.per_group["A"]["msll"] > report.per_group["W"]["msll"]
        assert report.gaps["msll"] > 0.0

    def test_single_group_gaps_zero(self):
        rng = np.random.default_rng(29)
        model, test = self.fit_and_split(rng, 400, {"W": 300})
        report = parity_report(model, test)
        assert report.groups == ("W",)
        assert report.gaps["explained_variance"] == 0.0
        assert report.gaps["msll"] == 0.0
        assert report.gaps["extreme_rate"] == 0.0

    def test_label_length_mismatch(self):
        rng = np.random.default_rng(31)
        model, test = self.fit_and_split(rng, 300, {"W": 100})
        with pytest.raises(InputError):
            parity_report(model, test, groups=["W"] * 5)
