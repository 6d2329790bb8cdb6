import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rarelab.estimators import (
    ConstraintError,
    EstimatorKind,
    EventLabel,
    LabeledSample,
    MixtureSpec,
    SampleBatch,
    assumption_residual,
    assumption_residual_closed_form,
    check_assumption,
    closed_form_moments,
    estimate_mu1,
    estimate_mu2,
    sample_mixture,
    snr,
)

CANONICAL = MixtureSpec(0.01, (1.0,), 2.0, 1.0)


def hand_batch():
    return SampleBatch([[1.0], [2.0], [3.0], [4.0]], [False, True, False, True])


class TestSampleTypes:
    def test_labeled_sample_rejects_nan(self):
        with pytest.raises(ConstraintError):
            LabeledSample(np.array([1.0, np.nan]), EventLabel.NORMAL)

    def test_batch_iterates_as_samples(self):
        samples = list(hand_batch())
        assert [s.label for s in samples] == [EventLabel.NORMAL, EventLabel.CRITICAL] * 2
        assert SampleBatch.from_samples(samples) == hand_batch()

    def test_batch_is_read_only(self):
        b = hand_batch()
        with pytest.raises(ValueError):
            b.values[0, 0] = 5.0

    def test_mismatched_labels(self):
        with pytest.raises(ConstraintError):
            SampleBatch([[1.0], [2.0]], [True])

    def test_mixed_dimensions(self):
        with pytest.raises(ConstraintError):
            SampleBatch.from_samples(
                [LabeledSample([1.0], EventLabel.NORMAL), LabeledSample([1.0, 2.0], EventLabel.NORMAL)]
            )


class TestMixtureSpec:
    @pytest.mark.parametrize("rho", [0.0, -0.1, 1.5])
    def test_bad_rho(self, rho):
        with pytest.raises(ConstraintError, match="rho_b"):
            MixtureSpec(rho, (1.0,), 2.0, 1.0)

    def test_zero_mean_rejected(self):
        with pytest.raises(ConstraintError):
            MixtureSpec(0.1, (0.0, 0.0), 1.0, 1.0)

    def test_negative_variance(self):
        with pytest.raises(ConstraintError):
            MixtureSpec(0.1, (1.0,), -1.0, 1.0)

    def test_satisfying(self):
        spec = MixtureSpec.satisfying(0.1, (1.0, 2.0), 0.5)
        assert spec.var_a == pytest.approx(0.5 + 2.5)
        assert spec.assumption_satisfied
        assert not MixtureSpec(0.1, (1.0,), 1.0, 1.0).assumption_satisfied

    def test_dict_round_trip(self):
        assert MixtureSpec.from_dict(CANONICAL.to_dict()) == CANONICAL


class TestClosedForm:
    def test_canonical_values(self):
        cf = closed_form_moments(CANONICAL)
        assert cf.mu == pytest.approx([0.01])
        assert cf.var_mu1 == pytest.approx(1.9999, rel=1e-12)
        assert cf.var_mu2 == pytest.approx(0.0199, rel=1e-12)
        assert cf.ratio == pytest.approx(100.497487, rel=1e-6)
        assert cf.snr_mu1 == pytest.approx(1e-4 / 1.9999)
        assert cf.snr_mu2 == pytest.approx(1e-4 / 0.0199)

    def test_half_rho(self):
        # 1.75 / 0.75 by hand
        cf = closed_form_moments(MixtureSpec.satisfying(0.5, (1.0,), 1.0))
        assert cf.var_mu1 == pytest.approx(1.75)
        assert cf.var_mu2 == pytest.approx(0.75)
        assert cf.ratio == pytest.approx(7 / 3)

    def test_rho_one_collapses(self):
        cf = closed_form_moments(MixtureSpec(1.0, (1.0,), 3.0, 1.0))
        assert cf.var_mu1 == pytest.approx(cf.var_mu2)

    def test_trace_over_coordinates(self):
        spec = MixtureSpec(0.2, (1.0, -2.0), 1.0, 0.5)
        cf = closed_form_moments(spec)
        assert cf.var_mu1 == pytest.approx(cf.var_mu1_coords.sum())
        assert cf.var_mu1_coords[1] == pytest.approx(0.8 * 1.0 + 0.2 * 4.5 - 0.16)

    def test_residual_closed_form(self):
        assert assumption_residual_closed_form(CANONICAL) == pytest.approx(0.0, abs=1e-15)
        spec = MixtureSpec(0.1, (1.0,), 1.0, 1.0)
        assert assumption_residual_closed_form(spec) == pytest.approx(0.09 * (2.0 - 1.0))


spec_strategy = st.builds(
    lambda rho, m, va, vb: MixtureSpec(rho, tuple(m), va, vb),
    st.floats(1e-6, 1.0),
    st.lists(st.floats(-10, 10).filter(lambda x: abs(x) > 1e-3), min_size=1, max_size=4),
    st.floats(0, 10),
    st.floats(0, 10),
)


class TestClosedFormProperties:
    @given(spec_strategy)
    def test_ordering(self, spec):
        cf = closed_form_moments(spec)
        assert cf.var_mu2 <= cf.var_mu1 * (1 + 1e-12) + 1e-300

    @given(st.floats(1e-4, 1.0), st.lists(st.floats(0.01, 5), min_size=1, max_size=3), st.floats(0, 5))
    def test_rho_factor(self, rho, m, var_b):
        cf = closed_form_moments(MixtureSpec.satisfying(rho, m, var_b))
        assert cf.ratio * rho >= 1.0 - 1e-9


class TestEstimators:
    def test_hand_values(self):
        e1, e2 = estimate_mu1(hand_batch()), estimate_mu2(hand_batch())
        assert e1.mean == pytest.approx([2.5])
        assert e1.sample_variance == pytest.approx(5 / 3)
        assert e2.mean == pytest.approx([1.5])
        assert e2.sample_variance == pytest.approx(11 / 3)
        assert e1.kind is EstimatorKind.MU1 and e2.kind is EstimatorKind.MU2
        assert e2.standard_error == pytest.approx(math.sqrt(11 / 12))

    def test_single_sample_is_degenerate(self):
        b = SampleBatch([[2.0]], [True])
        e = estimate_mu2(b)
        assert e.degenerate and e.sample_variance == 0.0
        with pytest.raises(ConstraintError):
            snr(e, [1.0])

    def test_empty_batch(self):
        with pytest.raises(ConstraintError):
            estimate_mu1([])

    def test_no_critical_samples(self):
        b = SampleBatch([[1.0], [-1.0]], [False, False])
        assert estimate_mu2(b).mean == pytest.approx([0.0])

    def test_accepts_sample_list(self):
        assert estimate_mu1(list(hand_batch())).mean == pytest.approx([2.5])

    @settings(max_examples=50)
    @given(
        arrays(np.float64, st.tuples(st.integers(2, 30), st.integers(1, 3)), elements=st.floats(-1e3, 1e3)),
        st.data(),
    )
    def test_definitions(self, values, data):
        crit = np.array(data.draw(st.lists(st.booleans(), min_size=len(values), max_size=len(values))))
        b = SampleBatch(values, crit)
        np.testing.assert_allclose(estimate_mu1(b).mean, values.mean(axis=0), atol=1e-9)
        np.testing.assert_allclose(estimate_mu2(b).mean, values[crit].sum(axis=0) / len(values), atol=1e-9)
        perm = np.random.default_rng(0).permutation(len(values))
        np.testing.assert_allclose(
            estimate_mu2(SampleBatch(values[perm], crit[perm])).mean, estimate_mu2(b).mean, atol=1e-9
        )
        scaled = estimate_mu1(SampleBatch(3.0 * values, crit))
        assert scaled.sample_variance == pytest.approx(9.0 * estimate_mu1(b).sample_variance, rel=1e-9, abs=1e-9)


class TestSampling:
    def test_deterministic(self):
        assert sample_mixture(CANONICAL, 500, 3) == sample_mixture(CANONICAL, 500, 3)
        assert sample_mixture(CANONICAL, 500, 3) != sample_mixture(CANONICAL, 500, 3, trial=1)

    def test_label_frequency_and_moments(self):
        spec = MixtureSpec(0.2, (2.0, -1.0), 1.5, 0.5)
        b = sample_mixture(spec, 200_000, 11)
        assert b.dim == 2
        assert abs(b.critical.mean() - 0.2) < 4 * math.sqrt(0.16 / 200_000)
        np.testing.assert_allclose(b.values[b.critical].mean(axis=0), [2.0, -1.0], atol=0.02)
        np.testing.assert_allclose(b.values[~b.critical].var(axis=0), [1.5, 1.5], rtol=0.02)

    def test_uniform_component(self):
        spec = MixtureSpec(0.5, (1.0,), 3.0, 0.25, component="uniform")
        b = sample_mixture(spec, 100_000, 2)
        crit = b.values[b.critical, 0]
        assert crit.min() >= 1.0 - math.sqrt(0.75) and crit.max() <= 1.0 + math.sqrt(0.75)
        assert crit.var() == pytest.approx(0.25, rel=0.03)

    def test_bad_size(self):
        with pytest.raises(ConstraintError):
            sample_mixture(CANONICAL, 0, 1)


class TestAssumptionCheck:
    def test_satisfied_spec(self):
        b = sample_mixture(CANONICAL, 400_000, 5)
        resid, se = assumption_residual(b)
        assert abs(resid) <= 4 * se
        assert check_assumption(b) == pytest.approx(abs(resid))

    def test_violated_spec(self):
        spec = MixtureSpec(0.1, (1.0,), 1.0, 1.0)
        resid, se = assumption_residual(sample_mixture(spec, 400_000, 6))
        assert abs(resid - assumption_residual_closed_form(spec)) <= 4 * se
        assert resid > 10 * se


def test_snr_canonical():
    b = sample_mixture(CANONICAL, 200_000, 9)
    cf = closed_form_moments(CANONICAL)
    assert snr(estimate_mu1(b), cf.mu) == pytest.approx(cf.snr_mu1, rel=0.05)
