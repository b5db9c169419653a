import json
import math

import numpy as np
import pytest

from rglm.core import autodiff as ad
from rglm.core.autodiff import Module, Parameter, Tensor, backward, grad_check
from rglm.core.layers import MLP
from rglm.errors import DimensionError, NumericError, ParseError, UsageError


def test_softmax_of_zeros_is_uniform():
    assert np.allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_softmax_mask_gives_exact_zeros():
    out = ad.softmax(Tensor([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).data
    assert out[0, 1] == 0.0
    assert out.sum() == pytest.approx(1.0)


def test_softmax_fully_masked_row_is_zero():
    out = ad.softmax(Tensor([[1.0, 2.0]]), mask=np.array([[False, False]])).data
    assert np.all(out == 0.0)


def test_layer_norm_rows_have_zero_mean_unit_variance():
    x = np.random.default_rng(3).normal(2.0, 5.0, size=(4, 7))
    out = ad.layer_norm(Tensor(x)).data
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-10)
    assert np.allclose(out.var(axis=-1), 1.0, atol=1e-10)


def test_matmul_identity_leaves_input_unchanged():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ad.matmul(Tensor(a), Tensor(np.eye(2))).data, a)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_backward_sum_of_squares():
    x = Parameter([1.0, 2.0, 3.0], name="x")
    grads = backward(ad.tsum(ad.square(x)), [x])
    assert np.array_equal(grads["x"], [2.0, 4.0, 6.0])


def test_detached_parameter_gets_zero_gradient():
    x = Parameter([1.0, 2.0], name="x")
    unused = Parameter([5.0], name="unused")
    grads = backward(ad.tsum(x * x), [x, unused])
    assert np.array_equal(grads["unused"], [0.0])


def test_backward_is_repeatable_on_same_graph():
    x = Parameter([0.5, -1.0], name="x")
    loss = ad.tsum(ad.exp(x) * x)
    first = backward(loss, [x])["x"].copy()
    second = backward(loss, [x])["x"]
    assert np.array_equal(first, second)


def test_non_scalar_loss_is_rejected():
    with pytest.raises(UsageError):
        backward(Parameter([1.0, 2.0]))


def test_repeated_row_gather_accumulates():
    w = Parameter(np.arange(6.0).reshape(3, 2), name="w")
    grads = backward(ad.tsum(ad.gather_rows(w, [0, 0, 2])), [w])
    assert np.array_equal(grads["w"], [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_index_mean_pool_forward():
    rows = Tensor([[1.0, 2.0], [9.0, 9.0], [9.0, 9.0], [3.0, 4.0]])
    out = ad.index_mean_pool(rows, [(0, 3), (1,)])
    assert np.array_equal(out.data, [[2.0, 3.0], [9.0, 9.0]])
    with pytest.raises(UsageError):
        ad.index_mean_pool(rows, [()])


def test_grad_check_square():
    x = Parameter([3.0], name="x")
    assert grad_check(lambda: ad.tsum(x * x), [x]) < 1e-9


def test_grad_check_softmax_log_composite():
    rng = np.random.default_rng(1)
    x = Parameter(rng.standard_normal((3, 4)), name="x")
    target = rng.integers(0, 4, size=3)
    assert grad_check(lambda: -ad.tsum(ad.log(ad.softmax(x)[(np.arange(3), target)])), [x]) < 1e-6


def test_grad_check_two_layer_perceptron_mse():
    rng = np.random.default_rng(2)
    mlp = MLP(4, 6, 3, rng, activation="tanh")
    x, y = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    assert grad_check(lambda: ad.mean(ad.square(mlp(Tensor(x)) - y)), mlp.parameters()) < 1e-4


@pytest.mark.parametrize("op", [ad.gelu, ad.sigmoid, ad.log_sigmoid, ad.relu, ad.layer_norm])
def test_grad_check_unary_ops(op):
    x = Parameter(np.random.default_rng(4).normal(size=(2, 5)) + 0.05, name="x")
    w = np.random.default_rng(5).normal(size=(2, 5))
    assert grad_check(lambda: ad.tsum(op(x) * w), [x]) < 1e-5


def test_grad_check_l2_norm_and_concat():
    rng = np.random.default_rng(6)
    a = Parameter(rng.normal(size=(3, 2)), name="a")
    b = Parameter(rng.normal(size=(3, 1)), name="b")
    assert grad_check(lambda: ad.tsum(ad.l2_norm(ad.concat([a, b], axis=1))), [a, b]) < 1e-6


def test_grad_check_rejects_non_finite_loss():
    x = Parameter([-1.0], name="x")
    with pytest.raises(NumericError):
        grad_check(lambda: ad.tsum(ad.log(x)), [x])


class _Pair(Module):
    def __init__(self):
        self.first = Parameter(np.array([[0.1, 0.2]]))
        self.stack = [MLP(2, 3, 1, np.random.default_rng(0))]


def test_named_parameters_are_dotted_paths():
    names = [name for name, _ in _Pair().named_parameters()]
    assert names[0] == "first"
    assert "stack.0.fc1.weight" in names


def test_checkpoint_round_trip(tmp_path):
    src, dst = _Pair(), _Pair()
    src.first.data = np.array([[1.0 / 3.0, -2.5e-17]])
    ad.save_parameters(src, tmp_path / "p.json", meta={"tag": 1})
    meta = ad.load_parameters(dst, tmp_path / "p.json")
    assert meta == {"tag": 1}
    for (name, a), (_, b) in zip(src.named_parameters(), dst.named_parameters()):
        assert np.array_equal(a.data, b.data), name


def test_checkpoint_missing_parameter_is_parse_error(tmp_path):
    path = tmp_path / "p.json"
    ad.save_parameters(_Pair(), path)
    payload = json.loads(path.read_text())
    del payload["parameters"]["first"]
    path.write_text(json.dumps(payload))
    with pytest.raises(ParseError, match="first"):
        ad.load_parameters(_Pair(), path)


def test_split_rng_streams_are_reproducible():
    a = [g.random() for g in ad.split_rng(np.random.default_rng(9), 3)]
    b = [g.random() for g in ad.split_rng(np.random.default_rng(9), 3)]
    assert a == b
    assert len(set(a)) == 3
    assert all(math.isfinite(v) for v in a)
