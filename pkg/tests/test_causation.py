"""Bound, calibration, and combination algebra against enumeration oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from snigl.causation import (
    CalibrationStats,
    calibrate_binary,
    calibrate_multiclass,
    combine_binary,
    combine_multiclass,
    estimate_confusion_multiclass,
    estimate_flip_rates_binary,
    pns_lower_bound,
)
from snigl.errors import (
    CalibrationDegeneracyError,
    DegenerateDenominatorError,
    DivisionGuardError,
    FormatError,
    IllConditionedWarning,
    InputValidationError,
    SingularMatrixError,
    VersionMismatchError,
)
from snigl.scm import (
    enumerate_joint,
    exact_pns,
    exact_posterior,
    joint_from_class_conditionals,
    or_gate_scm,
    random_scm,
    simulate_pseudo_labels,
    xor_noise_scm,
)

probs_open = st.floats(min_value=0.01, max_value=0.99)


def random_cs_given_y_joint(rng, num_c=3, num_s=3, classes=2):
    """Random joint with C and S conditionally independent given Y."""
    p_y = rng.dirichlet(np.ones(classes) * 3.0)
    p_c = rng.dirichlet(np.ones(num_c) * 2.0, size=classes)
    p_s = rng.dirichlet(np.ones(num_s) * 2.0, size=classes)
    return joint_from_class_conditionals(p_y, p_c, p_s)


class TestPnsLowerBound:
    def test_uninformative_cause_gives_zero(self):
        assert pns_lower_bound(0.5, 0.5, 0.3).value == 0.0

    def test_hand_evaluated_substitution(self):
        assert pns_lower_bound(0.9, 0.5, 0.2).value == pytest.approx(0.5, abs=1e-12)

    def test_bound_below_exact_on_xor_model(self):
        scm = xor_noise_scm(p_c=0.5, p_u=0.1)
        joint = enumerate_joint(scm, ["C", "Y"])
        p_y_given_c = exact_posterior(joint, "Y", {"C": 1})[1]
        p_y = joint.marginal(["Y"]).probs[1]
        p_c = joint.marginal(["C"]).probs[1]
        bound = pns_lower_bound(p_y_given_c, p_y, p_c).value
        assert bound == pytest.approx(0.8, abs=1e-12)
        exact = exact_pns(scm, ("C", 1), ("Y", 1))
        assert exact == pytest.approx(0.9, abs=1e-12)
        assert bound <= exact + 1e-9

    def test_or_gate_attains_the_bound(self):
        scm = or_gate_scm(p_c=0.5, p_u=0.2)
        joint = enumerate_joint(scm, ["C", "Y"])
        bound = pns_lower_bound(
            exact_posterior(joint, "Y", {"C": 1})[1],
            joint.marginal(["Y"]).probs[1],
            joint.marginal(["C"]).probs[1],
        ).value
        assert bound == pytest.approx(exact_pns(scm, ("C", 1), ("Y", 1)), abs=1e-12)

    def test_soundness_over_random_models(self):
        rng = np.random.default_rng(42)
        for _ in range(200):
            scm, (c_name, c_val), (y_name, y_val) = random_scm(rng)
            joint = enumerate_joint(scm, [c_name, y_name])
            bound = pns_lower_bound(
                exact_posterior(joint, y_name, {c_name: c_val})[y_val],
                joint.marginal([y_name]).probs[y_val],
                joint.marginal([c_name]).probs[c_val],
            ).value
            assert bound <= exact_pns(scm, (c_name, c_val), (y_name, y_val)) + 1e-9

    def test_degenerate_denominator(self):
        with pytest.raises(DegenerateDenominatorError):
            pns_lower_bound(0.9, 0.5, 1.0 - 1e-9)

    def test_clamped_into_unit_interval(self):
        assert pns_lower_bound(1.0, 0.0, 0.5).value == 1.0


class TestFlipRates:
    def test_deterministic_predictor(self):
        stats = estimate_flip_rates_binary([0.0, 1.0, 1.0, 0.0])
        assert stats.eps1 == pytest.approx(1.0)
        assert stats.eps0 == pytest.approx(1.0)

    def test_hand_arithmetic(self):
        stats = estimate_flip_rates_binary([0.6, 0.8])
        assert stats.eps1 == pytest.approx(0.5 / 0.7, abs=1e-12)
        assert stats.eps0 == pytest.approx(0.1 / 0.3, abs=1e-12)

    @given(p=probs_open)
    def test_constant_predictor_collapses_to_p(self, p):
        stats = estimate_flip_rates_binary([p] * 5)
        assert stats.eps1 == pytest.approx(p, abs=1e-12)
        assert stats.eps0 == pytest.approx(1.0 - p, abs=1e-12)
        assert stats.is_degenerate(tol=1e-9)

    def test_matches_extended_joint_rates(self):
        # Independent oracle: extend a joint with a distribution-matched
        # pseudo-label and read P(Yhat|Y) off the table directly.
        rng = np.random.default_rng(5)
        for _ in range(25):
            joint = random_cs_given_y_joint(rng, num_c=4)
            p_c = joint.marginal(["C"]).probs
            predictor = {c: exact_posterior(joint, "Y", {"C": c}) for c in range(4)}
            ext = simulate_pseudo_labels(joint, predictor, mode="sample")
            stats = estimate_flip_rates_binary(
                [predictor[c][1] for c in range(4)], weights=p_c
            )
            assert stats.eps1 == pytest.approx(
                exact_posterior(ext, "Yhat", {"Y": 1})[1], abs=1e-12
            )
            assert stats.eps0 == pytest.approx(
                exact_posterior(ext, "Yhat", {"Y": 0})[0], abs=1e-12
            )

    def test_empty_input(self):
        with pytest.raises(InputValidationError):
            estimate_flip_rates_binary([])

    def test_division_guard(self):
        with pytest.raises(DivisionGuardError):
            estimate_flip_rates_binary([0.0, 0.0])
        with pytest.raises(DivisionGuardError):
            estimate_flip_rates_binary([1.0, 1.0])


class TestCalibrateBinary:
    def test_noiseless_is_identity(self):
        stats = CalibrationStats.binary(eps0=1.0, eps1=1.0)
        assert calibrate_binary(0.7, stats) == pytest.approx(0.7, abs=1e-12)

    def test_forward_noise_then_invert(self):
        # Forward: P(pseudo=1) = 0.8 * eps1 + 0.2 * (1 - eps0) = 0.76.
        stats = CalibrationStats.binary(eps0=0.8, eps1=0.9)
        forward = 0.8 * 0.9 + 0.2 * (1 - 0.8)
        assert forward == pytest.approx(0.76, abs=1e-12)
        assert calibrate_binary(forward, stats) == pytest.approx(0.8, abs=1e-12)

    def test_degeneracy(self):
        stats = CalibrationStats.binary(eps0=0.6, eps1=0.4)
        with pytest.raises(CalibrationDegeneracyError):
            calibrate_binary(0.5, stats)

    def test_inverse_recovers_conditional_on_random_joints(self):
        # Calibration inverse law: on any C-S-given-Y joint with
        # non-degenerate rates, inverting the forward-noised P(Yhat=1|S)
        # recovers P(Y=1|S) exactly.
        rng = np.random.default_rng(17)
        checked = 0
        while checked < 30:
            joint = random_cs_given_y_joint(rng, num_c=3, num_s=4)
            p_c = joint.marginal(["C"]).probs
            predictor = {c: exact_posterior(joint, "Y", {"C": c}) for c in range(3)}
            stats = estimate_flip_rates_binary(
                [predictor[c][1] for c in range(3)], weights=p_c
            )
            if stats.is_degenerate(tol=1e-6):
                continue
            ext = simulate_pseudo_labels(joint, predictor, mode="sample")
            for s in range(4):
                p_hat = exact_posterior(ext, "Yhat", {"S": s})[1]
                truth = exact_posterior(joint, "Y", {"S": s})[1]
                assert calibrate_binary(p_hat, stats) == pytest.approx(truth, abs=1e-9)
            checked += 1

    def test_lemma_style_equivalence_rates_sum_to_one_iff_pseudo_independent(self):
        # Degenerate rates <=> pseudo-label independent of the true label.
        rng = np.random.default_rng(23)
        for _ in range(30):
            joint = random_cs_given_y_joint(rng, num_c=3)
            predictor = {c: exact_posterior(joint, "Y", {"C": c}) for c in range(3)}
            ext = simulate_pseudo_labels(joint, predictor, mode="sample")
            eps1 = exact_posterior(ext, "Yhat", {"Y": 1})[1]
            eps0 = exact_posterior(ext, "Yhat", {"Y": 0})[0]
            marg = ext.marginal(["Yhat"]).probs
            cond0 = exact_posterior(ext, "Yhat", {"Y": 0})
            cond1 = exact_posterior(ext, "Yhat", {"Y": 1})
            independent = np.allclose(cond0, marg, atol=1e-9) and np.allclose(
                cond1, marg, atol=1e-9
            )
            assert (abs(eps0 + eps1 - 1.0) <= 1e-9) == independent
        # Constructive degenerate case: a constant predictor.
        joint = random_cs_given_y_joint(np.random.default_rng(1), num_c=2)
        ext = simulate_pseudo_labels(joint, {0: [0.5, 0.5], 1: [0.5, 0.5]}, mode="sample")
        eps1 = exact_posterior(ext, "Yhat", {"Y": 1})[1]
        eps0 = exact_posterior(ext, "Yhat", {"Y": 0})[0]
        assert abs(eps0 + eps1 - 1.0) <= 1e-9


class TestConfusionMulticlass:
    def test_one_hot_rows_give_identity(self):
        rows = np.eye(3)[[0, 1, 2, 0, 1]]
        stats = estimate_confusion_multiclass(rows)
        assert np.allclose(stats.confusion, np.eye(3), atol=1e-12)

    def test_constant_rows_give_rank_one(self):
        s = np.array([0.2, 0.5, 0.3])
        stats = estimate_confusion_multiclass([s, s, s])
        for j in range(3):
            assert np.allclose(stats.confusion[:, j], s, atol=1e-12)

    def test_binary_consistency(self):
        # Two-class rows [(1-p, p)] must reproduce the binary flip rates on
        # the diagonal: M[1][1] = eps1 and M[0][0] = eps0.
        p = np.array([0.6, 0.8])
        rows = np.stack([1 - p, p], axis=1)
        stats = estimate_confusion_multiclass(rows)
        binary = estimate_flip_rates_binary(p)
        assert stats.confusion[1, 1] == pytest.approx(binary.eps1, abs=1e-12)
        assert stats.confusion[0, 0] == pytest.approx(binary.eps0, abs=1e-12)
        assert binary.eps1 == pytest.approx(0.714286, abs=1e-6)
        assert binary.eps0 == pytest.approx(0.333333, abs=1e-6)

    def test_columns_stochastic_on_random_rows(self):
        rng = np.random.default_rng(2)
        rows = rng.dirichlet(np.ones(4), size=50)
        stats = estimate_confusion_multiclass(rows)
        assert np.allclose(stats.confusion.sum(axis=0), 1.0, atol=1e-12)
        assert np.all(stats.confusion >= 0)

    def test_matches_extended_joint_confusion(self):
        rng = np.random.default_rng(29)
        joint = random_cs_given_y_joint(rng, num_c=4, num_s=3, classes=3)
        p_c = joint.marginal(["C"]).probs
        predictor = {c: exact_posterior(joint, "Y", {"C": c}) for c in range(4)}
        ext = simulate_pseudo_labels(joint, predictor, mode="sample")
        stats = estimate_confusion_multiclass(
            [predictor[c] for c in range(4)], weights=p_c
        )
        for j in range(3):
            assert np.allclose(
                stats.confusion[:, j],
                exact_posterior(ext, "Yhat", {"Y": j}),
                atol=1e-12,
            )


class TestCalibrateMulticlass:
    def test_identity_confusion(self):
        stats = CalibrationStats.multiclass(np.eye(3))
        p = np.array([0.2, 0.5, 0.3])
        assert np.allclose(calibrate_multiclass(p, stats), p, atol=1e-12)

    def test_diagonally_dominant_example(self):
        m = np.full((3, 3), 0.1) + np.eye(3) * 0.7
        stats = CalibrationStats.multiclass(m)
        h = np.array([0.5, 0.3, 0.2])
        p_hat = m @ h
        assert np.allclose(p_hat, [0.45, 0.31, 0.24], atol=1e-12)
        assert np.allclose(calibrate_multiclass(p_hat, stats), h, atol=1e-9)

    def test_singular_confusion(self):
        m = np.array([[0.5, 0.5, 0.2], [0.3, 0.3, 0.5], [0.2, 0.2, 0.3]])
        stats = CalibrationStats.multiclass(m)
        with pytest.raises(SingularMatrixError):
            calibrate_multiclass([0.4, 0.35, 0.25], stats)

    def test_ill_conditioned_warns(self):
        eps = 2e-9
        m = np.array(
            [
                [0.5, 0.5 - eps, 0.2],
                [0.3, 0.3 + eps, 0.5],
                [0.2, 0.2, 0.3],
            ]
        )
        stats = CalibrationStats.multiclass(m)
        with pytest.warns(IllConditionedWarning):
            calibrate_multiclass([0.4, 0.35, 0.25], stats)

    def test_inverse_recovers_h_on_random_confusions(self):
        rng = np.random.default_rng(31)
        done = 0
        while done < 50:
            m = rng.dirichlet(np.ones(3) * 2.0, size=3).T  # columns stochastic
            if abs(np.linalg.det(m)) < 1e-3:
                continue
            h = rng.dirichlet(np.ones(3))
            stats = CalibrationStats.multiclass(m)
            with np.errstate(all="ignore"):
                recovered = calibrate_multiclass(m @ h, stats)
            assert np.allclose(recovered, h, atol=1e-8)
            done += 1


class TestCombine:
    def test_uninformative_variant_collapses(self):
        for prior in (0.2, 0.5, 0.8):
            assert combine_binary(0.8, prior, prior) == pytest.approx(0.8, abs=1e-12)

    def test_even_prior_case(self):
        assert combine_binary(0.8, 0.6, 0.5) == pytest.approx(6.0 / 7.0, abs=1e-12)

    def test_skewed_prior_exposes_mode_difference(self):
        assert combine_binary(0.8, 0.6, 0.25) == pytest.approx(18.0 / 19.0, abs=1e-12)
        assert combine_binary(0.8, 0.6, 0.25, mode="paper") == pytest.approx(
            2.0 / 3.0, abs=1e-12
        )

    def test_matches_enumerated_posterior(self):
        rng = np.random.default_rng(37)
        for _ in range(50):
            joint = random_cs_given_y_joint(rng, num_c=3, num_s=3)
            prior = joint.marginal(["Y"]).probs[1]
            for c in range(3):
                for s in range(3):
                    p_c = exact_posterior(joint, "Y", {"C": c})[1]
                    p_s = exact_posterior(joint, "Y", {"S": s})[1]
                    truth = exact_posterior(joint, "Y", {"C": c, "S": s})[1]
                    got = combine_binary(p_c, p_s, prior)
                    assert got == pytest.approx(truth, abs=1e-9)

    def test_paper_mode_correct_only_at_uniform_prior(self):
        rng = np.random.default_rng(41)
        # Uniform prior: both modes agree with the enumerated posterior.
        joint = joint_from_class_conditionals(
            p_y=[0.5, 0.5],
            p_c_given_y=np.array([[0.8, 0.2], [0.2, 0.8]]),
            p_s_given_y=np.array([[0.6, 0.4], [0.4, 0.6]]),
        )
        truth = exact_posterior(joint, "Y", {"C": 1, "S": 1})[1]
        assert combine_binary(0.8, 0.6, 0.5, mode="paper") == pytest.approx(
            truth, abs=1e-9
        )
        # Non-uniform prior: paper mode deviates.
        joint = random_cs_given_y_joint(rng)
        prior = joint.marginal(["Y"]).probs[1]
        assert abs(prior - 0.5) > 0.01
        p_c = exact_posterior(joint, "Y", {"C": 0})[1]
        p_s = exact_posterior(joint, "Y", {"S": 0})[1]
        truth = exact_posterior(joint, "Y", {"C": 0, "S": 0})[1]
        assert combine_binary(p_c, p_s, prior) == pytest.approx(truth, abs=1e-9)
        assert abs(combine_binary(p_c, p_s, prior, mode="paper") - truth) > 1e-4

    @given(pc=probs_open, ps=probs_open, prior=probs_open, bump=st.floats(0.001, 0.2))
    @settings(max_examples=200, deadline=None)
    def test_monotonicity(self, pc, ps, prior, bump):
        base = combine_binary(pc, ps, prior)
        if pc + bump < 1.0 - 1e-6:
            assert combine_binary(pc + bump, ps, prior) > base
        if ps + bump < 1.0 - 1e-6:
            assert combine_binary(pc, ps + bump, prior) > base
        if prior + bump < 1.0 - 1e-6:
            assert combine_binary(pc, ps, prior + bump) < base


class TestCombineMulticlass:
    def test_uniform_variant_and_prior_collapse(self):
        p_c = np.array([0.5, 0.3, 0.2])
        u = np.full(3, 1.0 / 3.0)
        assert np.allclose(combine_multiclass(p_c, u, u), p_c, atol=1e-9)

    def test_binary_consistency(self):
        got = combine_multiclass([0.2, 0.8], [0.4, 0.6], [0.5, 0.5])
        assert np.allclose(got, [1.0 / 7.0, 6.0 / 7.0], atol=1e-9)
        assert got[1] == pytest.approx(combine_binary(0.8, 0.6, 0.5), abs=1e-12)

    def test_elementwise_squares_example(self):
        p = np.array([0.5, 0.3, 0.2])
        u = np.full(3, 1.0 / 3.0)
        got = combine_multiclass(p, p, u)
        expected = p**2 / np.sum(p**2)
        assert np.allclose(got, expected, atol=1e-9)
        assert np.allclose(got, [0.657895, 0.236842, 0.105263], atol=1e-6)

    def test_matches_enumerated_three_class_posterior(self):
        rng = np.random.default_rng(43)
        for _ in range(25):
            joint = random_cs_given_y_joint(rng, num_c=3, num_s=4, classes=3)
            prior = joint.marginal(["Y"]).probs
            for c in range(3):
                for s in range(4):
                    p_c = exact_posterior(joint, "Y", {"C": c})
                    p_s = exact_posterior(joint, "Y", {"S": s})
                    truth = exact_posterior(joint, "Y", {"C": c, "S": s})
                    got = combine_multiclass(p_c, p_s, prior)
                    assert np.allclose(got, truth, atol=1e-9)

    def test_argmax_stability_under_uniform_prior(self):
        rng = np.random.default_rng(47)
        u = np.full(4, 0.25)
        for _ in range(100):
            p_c = rng.dirichlet(np.ones(4))
            p_s = rng.dirichlet(np.ones(4))
            combined = combine_multiclass(p_c, p_s, u)
            assert int(np.argmax(combined)) == int(np.argmax(p_c * p_s))


class TestStatsSerialization:
    def test_binary_round_trip(self):
        stats = CalibrationStats.binary(eps0=0.8125, eps1=0.90625)
        again = CalibrationStats.from_text(stats.to_text())
        assert again.eps0 == stats.eps0 and again.eps1 == stats.eps1

    def test_multiclass_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        m = rng.dirichlet(np.ones(3), size=3).T
        stats = CalibrationStats.multiclass(m)
        path = tmp_path / "stats.txt"
        stats.save(path)
        again = CalibrationStats.load(path)
        assert np.array_equal(again.confusion, stats.confusion)

    def test_version_mismatch(self):
        with pytest.raises(VersionMismatchError):
            CalibrationStats.from_text("snigl-calibration-stats v9\nkind=binary\n")

    def test_missing_field(self):
        with pytest.raises(FormatError):
            CalibrationStats.from_text("snigl-calibration-stats v1\nkind=binary\n")
