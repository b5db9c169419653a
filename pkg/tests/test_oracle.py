import math

import numpy as np
import pytest

from rglm.errors import EstimationError, ParameterError, PreconditionError
from rglm.info.oracle import (
    JointDistribution, PipelineJoint, binned_entropy, binned_mi_estimate, conditional_mi, decomposition_terms,
    entropy, markov_chain, mutual_information, pipeline_joint, random_chain, random_joint, random_pipeline,
    run_oracle_suite, verify_decomposition, verify_dpi, verify_upper_bound,
)


def test_copy_of_uniform_four():
    J = JointDistribution(("X", "Y"), np.eye(4) / 4)
    assert mutual_information(J, "X", "Y") == pytest.approx(math.log(4), abs=1e-12)
    assert entropy(J, "X") == pytest.approx(1.38629, abs=1e-5)


def test_independent_variables():
    J = JointDistribution(("X", "Y"), np.outer([0.2, 0.8], [0.5, 0.3, 0.2]))
    assert abs(mutual_information(J, "X", "Y")) < 1e-14


def test_two_by_two_table():
    J = JointDistribution(("X", "Y"), [[0.4, 0.1], [0.1, 0.4]])
    expected = 0.8 * math.log(1.6) + 0.2 * math.log(0.4)
    assert mutual_information(J, "X", "Y") == pytest.approx(expected, abs=1e-14)
    assert expected == pytest.approx(0.19274, abs=1e-5)


def test_unnormalized_table_is_rejected():
    with pytest.raises(ParameterError):
        JointDistribution(("X", "Y"), [[0.4, 0.1], [0.1, 0.3]])
    with pytest.raises(ParameterError):
        JointDistribution(("X",), [1.2, -0.2])


def test_unknown_variable():
    J = JointDistribution(("X", "Y"), np.full((2, 2), 0.25))
    with pytest.raises(ParameterError):
        entropy(J, "Z")


def test_decomposition_on_random_joints():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        J = random_joint(rng, rng.integers(2, 5, size=3))
        assert verify_decomposition(J) < 1e-12


def test_decomposition_of_independent_joint_is_all_zero():
    table = np.einsum("a,b,c->abc", [0.3, 0.7], [0.5, 0.25, 0.25], [0.1, 0.9])
    terms = decomposition_terms(JointDistribution(("x", "s_G", "s_T"), table))
    for value in (terms.conditional, terms.graph, terms.text_given_graph, terms.text):
        assert abs(value) < 1e-14


def test_decomposition_of_perfect_copy():
    table = np.zeros((3, 3, 3))
    for v, p in enumerate([0.2, 0.3, 0.5]):
        table[v, v, v] = p
    terms = decomposition_terms(JointDistribution(("x", "s_G", "s_T"), table))
    assert abs(terms.conditional) < 1e-14
    assert terms.rhs == pytest.approx(0.0, abs=1e-14)
    assert terms.graph == pytest.approx(terms.text)


def test_upper_bound_on_random_pipelines():
    rng = np.random.default_rng(1)
    for _ in range(200):
        assert verify_upper_bound(random_pipeline(rng)) >= -1e-12


def test_upper_bound_constant_encoder():
    rng = np.random.default_rng(2)
    P = pipeline_joint(rng.dirichlet(np.ones(4)), [0, 0, 0, 0], rng.dirichlet(np.ones(3), size=4),
                       rng.dirichlet(np.ones(2), size=(4, 3)))
    J = P.joint
    assert mutual_information(J, "G", "s_G") == pytest.approx(0.0, abs=1e-14)
    assert conditional_mi(J, "x", "s_G", "s_T") == pytest.approx(0.0, abs=1e-14)


def test_upper_bound_is_tight_for_injective_copy():
    p_g = np.array([0.1, 0.2, 0.3, 0.4])
    f = [2, 0, 3, 1]
    p_t = np.tile([0.6, 0.4], (4, 1))
    p_x = np.zeros((4, 2, 4))
    for g, s in enumerate(f):
        p_x[g, :, s] = 1.0
    slack = verify_upper_bound(pipeline_joint(p_g, f, p_t, p_x))
    assert abs(slack) < 1e-12


def test_upper_bound_rejects_leaky_encoder():
    table = np.full((2, 2, 1, 1), 0.25)
    with pytest.raises(PreconditionError):
        verify_upper_bound(PipelineJoint(JointDistribution(("G", "s_G", "s_T", "x"), table), np.array([0, 1])))


def test_dpi_special_cases():
    p_x = np.array([0.3, 0.7])
    p_y = np.array([[0.9, 0.1], [0.2, 0.8]])
    copy = markov_chain(p_x, p_y, np.eye(2))
    assert verify_dpi(copy) == pytest.approx(0.0, abs=1e-14)
    noise = markov_chain(p_x, p_y, np.tile([0.5, 0.5], (2, 1)))
    assert verify_dpi(noise) == pytest.approx(mutual_information(noise, "X", "Y"), abs=1e-14)


def test_dpi_on_random_chains():
    rng = np.random.default_rng(3)
    for _ in range(200):
        assert verify_dpi(random_chain(rng)) >= -1e-12


def test_oracle_suite_report():
    report = run_oracle_suite(np.random.default_rng(4), decompositions=50, pipelines=20, chains=20)
    assert report.instances == 90
    assert report.failures == []
    assert report.to_dict()["max_residual"] < 1e-12


def test_binned_estimate_of_copy_matches_entropy():
    a = np.random.default_rng(5).standard_normal(100_000)
    estimate = binned_mi_estimate(a, a, bins=10)
    assert estimate == pytest.approx(binned_entropy(a, bins=10), rel=0.05)


def test_binned_estimate_of_independent_samples_is_small():
    rng = np.random.default_rng(6)
    assert binned_mi_estimate(rng.standard_normal(100_000), rng.standard_normal(100_000), bins=8) < 0.05


def test_binned_estimate_orders_by_noise():
    rng = np.random.default_rng(7)
    a = rng.standard_normal(20_000)
    low = binned_mi_estimate(a, a + 0.1 * rng.standard_normal(20_000))
    high = binned_mi_estimate(a, a + 3.0 * rng.standard_normal(20_000))
    assert low > high


def test_binned_estimate_errors():
    a = np.random.default_rng(8).standard_normal(2000)
    with pytest.raises(EstimationError):
        binned_mi_estimate(a, np.ones(2000))
    with pytest.raises(EstimationError):
        binned_mi_estimate(a[:10], a[:10])
    with pytest.raises(ParameterError):
        binned_mi_estimate(a, a, bins=1)
