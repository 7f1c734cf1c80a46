"""Enumeration-oracle suite: exact PNS, posteriors, and pseudo-label joints."""

import numpy as np
import pytest

from snigl.errors import (
    ExogeneityError,
    FormatError,
    InputValidationError,
    IntractableEnumerationError,
    MissingPredictorError,
    NonBinaryCauseError,
    VersionMismatchError,
    ZeroProbabilityEvidenceError,
)
from snigl.scm import (
    DiscreteSCM,
    JointTable,
    Mechanism,
    enumerate_joint,
    exact_pns,
    exact_posterior,
    interventional_distribution,
    joint_from_class_conditionals,
    load_joint,
    load_scm,
    or_gate_scm,
    random_scm,
    save_joint,
    save_scm,
    simulate_pseudo_labels,
    xor_noise_scm,
)


def identity_scm(p=0.5):
    return DiscreteSCM(
        exogenous={"C": np.array([1 - p, p])},
        mechanisms={"Y": Mechanism(("C",), np.array([0, 1]))},
        cardinalities={"C": 2, "Y": 2},
    )


class TestExactPns:
    def test_identity_mechanism_is_fully_necessary_and_sufficient(self):
        for p in (0.2, 0.5, 0.9):
            assert exact_pns(identity_scm(p), ("C", 1), ("Y", 1)) == pytest.approx(1.0)

    def test_xor_with_noise(self):
        # do(C=1) gives Y=1 iff U=0; do(C=0) gives Y!=1 iff U=0.
        scm = xor_noise_scm(p_c=0.5, p_u=0.1)
        assert exact_pns(scm, ("C", 1), ("Y", 1)) == pytest.approx(0.9, abs=1e-12)

    def test_or_gate_value(self):
        scm = or_gate_scm(p_c=0.5, p_u=0.2)
        assert exact_pns(scm, ("C", 1), ("Y", 1)) == pytest.approx(0.8, abs=1e-12)

    def test_non_binary_cause_rejected(self):
        scm = DiscreteSCM(
            exogenous={"C": np.array([0.2, 0.3, 0.5])},
            mechanisms={"Y": Mechanism(("C",), np.array([0, 1, 1]))},
            cardinalities={"C": 3, "Y": 2},
        )
        with pytest.raises(NonBinaryCauseError):
            exact_pns(scm, ("C", 1), ("Y", 1))

    def test_common_ancestor_rejected(self):
        # U confounds C and Y.
        scm = DiscreteSCM(
            exogenous={"U": np.array([0.5, 0.5])},
            mechanisms={
                "C": Mechanism(("U",), np.array([0, 1])),
                "Y": Mechanism(("U", "C"), np.array([[0, 1], [1, 1]])),
            },
            cardinalities={"U": 2, "C": 2, "Y": 2},
        )
        with pytest.raises(ExogeneityError):
            exact_pns(scm, ("C", 1), ("Y", 1))

    def test_state_cap(self):
        scm = DiscreteSCM(
            exogenous={f"U{i}": np.array([0.5, 0.5]) for i in range(8)},
            mechanisms={"Y": Mechanism(("U0",), np.array([0, 1]))},
            cardinalities={**{f"U{i}": 2 for i in range(8)}, "Y": 2},
        )
        with pytest.raises(IntractableEnumerationError):
            exact_pns(scm, ("U1", 1), ("Y", 1), max_states=4)


class TestScmLaws:
    """Structural self-consistency of the enumeration."""

    def test_consistency_law_per_assignment(self):
        # Wherever the factual cause equals c, the do(C=c) outcome equals the
        # factual outcome, for every exogenous assignment.
        rng = np.random.default_rng(7)
        from snigl.scm import _exogenous_grid, evaluate_mechanisms

        for _ in range(50):
            scm, (c_name, c_val), (y_name, _) = random_scm(rng)
            exo, _w = _exogenous_grid(scm)
            factual = evaluate_mechanisms(scm, exo)
            forced = evaluate_mechanisms(scm, exo, do={c_name: c_val})
            match = factual[c_name] == c_val
            assert np.array_equal(factual[y_name][match], forced[y_name][match])

    def test_interventional_matches_conditional_under_exogeneity(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            scm, (c_name, c_val), (y_name, y_val) = random_scm(rng)
            joint = enumerate_joint(scm, [c_name, y_name])
            cond = exact_posterior(joint, y_name, {c_name: c_val})
            interv = interventional_distribution(scm, {c_name: c_val}, y_name)
            assert np.allclose(cond, interv, atol=1e-12)

    def test_two_term_definition_equals_joint_counterfactual(self):
        # Bonferroni sandwich: max(0, a + b - 1) <= PNS <= min(a, b) with
        # a = P(Y_do(c)=y), b = P(Y_do(not c) != y).
        rng = np.random.default_rng(13)
        for _ in range(100):
            scm, cause, effect = random_scm(rng)
            c_name, c_val = cause
            y_name, y_val = effect
            pns = exact_pns(scm, cause, effect)
            a = interventional_distribution(scm, {c_name: c_val}, y_name)[y_val]
            b = 1.0 - interventional_distribution(scm, {c_name: 1 - c_val}, y_name)[y_val]
            assert max(0.0, a + b - 1.0) - 1e-12 <= pns <= min(a, b) + 1e-12


class TestJointTable:
    def test_posterior_reduces_to_marginal_under_independence(self):
        joint = joint_from_class_conditionals(
            p_y=[0.4, 0.6],
            p_c_given_y=np.array([[0.5, 0.5], [0.5, 0.5]]),  # C independent of Y
            p_s_given_y=np.array([[0.9, 0.1], [0.2, 0.8]]),
        )
        post = exact_posterior(joint, "Y", {"C": 1})
        marg = joint.marginal(["Y"]).probs
        assert np.allclose(post, marg, atol=1e-12)

    def test_uniform_square(self):
        joint = JointTable(("A", "B"), (2, 2), np.full((2, 2), 0.25))
        assert np.allclose(exact_posterior(joint, "A", {"B": 0}), [0.5, 0.5])

    def test_combine_reference_posterior(self):
        # P(Y=1)=1/2, P(C'=1|Y)= (0.2, 0.8), P(S'=1|Y) = (0.4, 0.6):
        # P(Y=1|C'=1) = 0.8, P(Y=1|S'=1) = 0.6, posterior P(Y=1|C'=1,S'=1) = 6/7.
        joint = joint_from_class_conditionals(
            p_y=[0.5, 0.5],
            p_c_given_y=np.array([[0.8, 0.2], [0.2, 0.8]]),
            p_s_given_y=np.array([[0.6, 0.4], [0.4, 0.6]]),
        )
        assert exact_posterior(joint, "Y", {"C": 1})[1] == pytest.approx(0.8)
        assert exact_posterior(joint, "Y", {"S": 1})[1] == pytest.approx(0.6)
        assert exact_posterior(joint, "Y", {"C": 1, "S": 1})[1] == pytest.approx(
            6.0 / 7.0, abs=1e-12
        )

    def test_zero_probability_evidence(self):
        probs = np.array([[0.5, 0.0], [0.5, 0.0]])
        joint = JointTable(("A", "B"), (2, 2), probs)
        with pytest.raises(ZeroProbabilityEvidenceError):
            exact_posterior(joint, "A", {"B": 1})

    def test_marginal_order_respected(self):
        probs = np.array([[0.1, 0.2], [0.3, 0.4]])
        joint = JointTable(("A", "B"), (2, 2), probs)
        ba = joint.marginal(["B", "A"])
        assert ba.variables == ("B", "A")
        assert np.allclose(ba.probs, probs.T)


class TestSimulatePseudoLabels:
    def test_one_hot_predictor_argmax_is_deterministic(self):
        joint = joint_from_class_conditionals(
            p_y=[0.5, 0.5],
            p_c_given_y=np.array([[0.7, 0.3], [0.1, 0.9]]),
            p_s_given_y=np.array([[0.5, 0.5], [0.5, 0.5]]),
        )
        predictor = {0: [1.0, 0.0], 1: [0.0, 1.0]}
        ext = simulate_pseudo_labels(joint, predictor, mode="argmax")
        # P(Yhat = c | C = c) must be exactly 1.
        for c in (0, 1):
            post = exact_posterior(ext, "Yhat", {"C": c})
            assert post[c] == pytest.approx(1.0)

    def test_sample_mode_matches_flip_rate_formula(self):
        # With predictor equal to the exact P(Y|C), flip rates computed from
        # the extended joint match the moment-ratio formula.
        from snigl.causation import estimate_flip_rates_binary

        joint = joint_from_class_conditionals(
            p_y=[0.35, 0.65],
            p_c_given_y=np.array([[0.6, 0.3, 0.1], [0.1, 0.4, 0.5]]),
            p_s_given_y=np.array([[0.8, 0.2], [0.3, 0.7]]),
        )
        p_c = joint.marginal(["C"]).probs
        predictor = {
            c: exact_posterior(joint, "Y", {"C": c}) for c in range(p_c.size)
        }
        ext = simulate_pseudo_labels(joint, predictor, mode="sample")
        eps1_joint = exact_posterior(ext, "Yhat", {"Y": 1})[1]
        eps0_joint = exact_posterior(ext, "Yhat", {"Y": 0})[0]
        stats = estimate_flip_rates_binary(
            [predictor[c][1] for c in range(p_c.size)], weights=p_c
        )
        assert stats.eps1 == pytest.approx(eps1_joint, abs=1e-12)
        assert stats.eps0 == pytest.approx(eps0_joint, abs=1e-12)

    def test_constant_predictor_gives_degenerate_rates(self):
        joint = joint_from_class_conditionals(
            p_y=[0.5, 0.5],
            p_c_given_y=np.array([[0.7, 0.3], [0.1, 0.9]]),
            p_s_given_y=np.array([[0.5, 0.5], [0.5, 0.5]]),
        )
        ext = simulate_pseudo_labels(joint, {0: [0.5, 0.5], 1: [0.5, 0.5]}, mode="sample")
        eps1 = exact_posterior(ext, "Yhat", {"Y": 1})[1]
        eps0 = exact_posterior(ext, "Yhat", {"Y": 0})[0]
        assert eps0 + eps1 == pytest.approx(1.0, abs=1e-12)
        # And the pseudo-label is independent of Y.
        marg = ext.marginal(["Yhat"]).probs
        assert np.allclose(exact_posterior(ext, "Yhat", {"Y": 0}), marg, atol=1e-12)

    def test_missing_predictor_entry(self):
        joint = joint_from_class_conditionals(
            p_y=[0.5, 0.5],
            p_c_given_y=np.array([[0.7, 0.3], [0.1, 0.9]]),
            p_s_given_y=np.array([[0.5, 0.5], [0.5, 0.5]]),
        )
        with pytest.raises(MissingPredictorError):
            simulate_pseudo_labels(joint, {0: [1.0, 0.0]}, mode="sample")


class TestTextFormats:
    def test_scm_round_trip(self, tmp_path):
        rng = np.random.default_rng(3)
        scm, cause, effect = random_scm(rng)
        path = tmp_path / "model.scm"
        save_scm(scm, path)
        loaded = load_scm(path)
        assert loaded.variables() == scm.variables()
        assert exact_pns(loaded, cause, effect) == pytest.approx(
            exact_pns(scm, cause, effect), abs=1e-15
        )

    def test_joint_round_trip(self, tmp_path):
        joint = joint_from_class_conditionals(
            p_y=[0.25, 0.75],
            p_c_given_y=np.array([[0.6, 0.4], [0.2, 0.8]]),
            p_s_given_y=np.array([[0.9, 0.1], [0.5, 0.5]]),
        )
        path = tmp_path / "table.joint"
        save_joint(joint, path)
        loaded = load_joint(path)
        assert loaded.variables == joint.variables
        assert np.array_equal(loaded.probs, joint.probs)  # bit-identical floats

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "bad.scm"
        path.write_text("snigl-scm v2\n", encoding="utf-8")
        with pytest.raises(VersionMismatchError):
            load_scm(path)

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "bad.scm"
        path.write_text("snigl-scm v1\nexo U 2 0.5\n", encoding="utf-8")
        with pytest.raises(FormatError) as err:
            load_scm(path)
        assert err.value.line_number == 2

    def test_joint_bad_header(self, tmp_path):
        path = tmp_path / "bad.joint"
        path.write_text("something else\n", encoding="utf-8")
        with pytest.raises(VersionMismatchError):
            load_joint(path)


class TestValidation:
    def test_cyclic_or_forward_reference_rejected(self):
        with pytest.raises(InputValidationError):
            DiscreteSCM(
                exogenous={"U": np.array([0.5, 0.5])},
                mechanisms={"A": Mechanism(("B",), np.array([0, 1]))},
                cardinalities={"U": 2, "A": 2},
            )

    def test_joint_must_sum_to_one(self):
        with pytest.raises(InputValidationError):
            JointTable(("A",), (2,), np.array([0.5, 0.6]))
