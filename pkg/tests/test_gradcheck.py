import pytest

from rglm.harness.gradcheck import TOLERANCE, gradient_suite

LOSSES = {"text", "feat", "topo", "sim", "diff", "pretrain"}


def test_small_suite_checks_every_loss():
    errors = gradient_suite(seed=0, d_model=8, max_entries=2)
    assert set(errors) == LOSSES
    for name, err in errors.items():
        assert err <= TOLERANCE, name


@pytest.mark.slow
def test_every_training_loss_passes_finite_differences():
    errors = gradient_suite(seed=0, d_model=8, max_entries=6)
    assert set(errors) == LOSSES
    for name, err in errors.items():
        assert err <= TOLERANCE, name
