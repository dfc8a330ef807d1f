import math

import numpy as np
import pytest
import torch

from conftest import relative_error
from mixtea_diff import (
    AdamState, DiffCoreError, GradientTape, adam_step, as_tensor, backward, concat_columns, cosine_sim_matrix, elu,
    leaky_relu, matmul, row_l2_distance, row_log_softmax, row_softmax, segment_mean, xavier_init,
)

TOL = 1e-4


def _random(shape, seed, away_from_zero=False):
    gen = torch.Generator().manual_seed(seed)
    t = torch.randn(*shape, dtype=torch.float64, generator=gen)
    if away_from_zero:
        t = t + torch.sign(t) * 0.1
    return t


def _check_grad(op, x, finite_difference, seed=99):
    """Scalar projection: sum(op(x) * fixed random weights)."""
    with torch.no_grad():
        out_shape = op(x).shape
    weights = _random(out_shape, seed)

    def f(v):
        return (op(v) * weights).sum()

    x = x.clone().requires_grad_(True)
    analytic = backward(f(x), {"x": x})["x"]
    numeric = finite_difference(lambda v: f(v).detach(), x)
    assert relative_error(analytic, numeric) < TOL


def test_matmul_gradient(finite_difference):
    b = _random((4, 3), 1)
    _check_grad(lambda a: matmul(a, b), _random((5, 4), 2), finite_difference)
    a = _random((5, 4), 3)
    _check_grad(lambda w: matmul(a, w), _random((4, 3), 4), finite_difference)


@pytest.mark.parametrize("temperature", [1.0, 0.5, 3.0])
def test_row_softmax_gradient(finite_difference, temperature):
    _check_grad(lambda a: row_softmax(a, temperature), _random((3, 5), 5), finite_difference)
    _check_grad(lambda a: row_log_softmax(a, temperature), _random((3, 5), 6), finite_difference)


def test_elementwise_gradients(finite_difference):
    x = _random((4, 3), 7, away_from_zero=True)
    _check_grad(elu, x, finite_difference)
    _check_grad(leaky_relu, x, finite_difference)


def test_concat_columns_gradient(finite_difference):
    other = _random((3, 2), 8)
    _check_grad(lambda a: concat_columns([other, a, 2.0 * a]), _random((3, 4), 9), finite_difference)


def test_segment_mean_gradient_and_values(finite_difference):
    segments = [[0, 1], [], [2, 2, 0]]
    values = torch.tensor([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]], dtype=torch.float64)
    out = segment_mean(values, segments)
    assert torch.allclose(out, torch.tensor([[2.0, 3.0], [0.0, 0.0], [11 / 3, 14 / 3]], dtype=torch.float64))
    _check_grad(lambda v: segment_mean(v, segments), _random((3, 2), 10), finite_difference)


def test_row_l2_distance_gradient(finite_difference):
    b = _random((4, 3), 11)
    _check_grad(lambda a: row_l2_distance(a, b), _random((4, 3), 12), finite_difference)


def test_row_l2_distance_zero_subgradient():
    a = torch.ones(2, 3, dtype=torch.float64, requires_grad=True)
    b = torch.ones(2, 3, dtype=torch.float64)
    grads = backward(row_l2_distance(a, b).sum(), {"a": a})
    assert torch.equal(grads["a"], torch.zeros(2, 3, dtype=torch.float64))


def test_row_l2_distance_autograd_gradcheck():
    a = _random((3, 4), 13).requires_grad_(True)
    b = _random((3, 4), 14)
    assert torch.autograd.gradcheck(lambda x: row_l2_distance(x, b), (a,), eps=1e-6, atol=1e-6)


def test_cosine_sim_matrix_gradient(finite_difference):
    b = _random((3, 4), 15)
    _check_grad(lambda a: cosine_sim_matrix(a, b), _random((2, 4), 16), finite_difference)


def test_cosine_sim_matrix_values_and_zero_rows():
    a = torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=torch.float64)
    b = torch.tensor([[2.0, 0.0], [0.0, -3.0]], dtype=torch.float64)
    sims = cosine_sim_matrix(a, b)
    assert torch.allclose(sims, torch.tensor([[1.0, 0.0], [math.sqrt(0.5), -math.sqrt(0.5)]], dtype=torch.float64))
    with pytest.raises(DiffCoreError, match="zero-norm"):
        cosine_sim_matrix(a, torch.zeros(1, 2, dtype=torch.float64))


def test_shape_and_value_errors():
    with pytest.raises(DiffCoreError, match="matmul"):
        matmul(torch.ones(2, 3, dtype=torch.float64), torch.ones(2, 3, dtype=torch.float64))
    with pytest.raises(DiffCoreError, match="temperature"):
        row_softmax(torch.ones(2, 2, dtype=torch.float64), 0.0)
    with pytest.raises(DiffCoreError, match="non-finite"):
        elu(torch.tensor([[float("nan")]], dtype=torch.float64))
    with pytest.raises(DiffCoreError, match="row mismatch"):
        concat_columns([torch.ones(2, 1, dtype=torch.float64), torch.ones(3, 1, dtype=torch.float64)])
    with pytest.raises(DiffCoreError):
        as_tensor(np.ones((2, 2, 2)))


def test_row_softmax_is_stable_for_large_logits():
    out = row_softmax(torch.tensor([[1000.0, 1000.0, -1000.0]], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([[0.5, 0.5, 0.0]], dtype=torch.float64))


def test_backward_requires_scalar_and_zero_fills_unreached():
    a = torch.ones(2, 2, dtype=torch.float64, requires_grad=True)
    unused = torch.ones(3, 1, dtype=torch.float64, requires_grad=True)
    with pytest.raises(DiffCoreError, match="scalar"):
        backward(a * 2.0, {"a": a})
    grads = backward((a * 3.0).sum(), {"a": a, "unused": unused})
    assert torch.equal(grads["a"], torch.full((2, 2), 3.0, dtype=torch.float64))
    assert torch.equal(grads["unused"], torch.zeros(3, 1, dtype=torch.float64))


def test_tape_records_ops():
    w = torch.ones(2, 2, dtype=torch.float64)
    with GradientTape({"w": w}) as tape:
        loss = row_softmax(matmul(w, w)).sum()
    assert [e.op for e in tape.entries] == ["matmul", "row_softmax"]
    assert tape.entries[0].inputs == ((2, 2), (2, 2))
    assert torch.allclose(tape.gradient(loss)["w"], torch.zeros(2, 2, dtype=torch.float64))
    # outside the context nothing is recorded
    matmul(w, w)
    assert len(tape.entries) == 2


def test_adam_first_step_moves_by_lr():
    w = torch.tensor([[1.0, -2.0, 0.5]], dtype=torch.float64, requires_grad=True)
    state = AdamState({"w": w}, lr=0.01)
    grads = {"w": torch.tensor([[0.3, -4.0, 2.0]], dtype=torch.float64)}
    adam_step({"w": w}, grads, state)
    expected = torch.tensor([[0.99, -1.99, 0.49]], dtype=torch.float64)
    assert torch.allclose(w.detach(), expected, atol=1e-6)
    assert state.step_count == 1
    m, v = state.moments("w")
    assert torch.allclose(m, 0.1 * grads["w"])
    assert torch.allclose(v, 0.001 * grads["w"] ** 2)


def test_adam_step_errors():
    w = torch.zeros(1, 2, dtype=torch.float64, requires_grad=True)
    state = AdamState({"w": w})
    with pytest.raises(DiffCoreError, match="missing gradient"):
        adam_step({"w": w}, {}, state)
    with pytest.raises(DiffCoreError, match="shape"):
        adam_step({"w": w}, {"w": torch.zeros(2, 2, dtype=torch.float64)}, state)
    other = torch.zeros(1, 2, dtype=torch.float64, requires_grad=True)
    with pytest.raises(DiffCoreError, match="not tracked"):
        adam_step({"w": other}, {"w": torch.zeros(1, 2, dtype=torch.float64)}, state)


def test_xavier_init_bound_and_seed():
    a = xavier_init(30, 20, seed=5)
    assert a.dtype == torch.float64
    assert float(a.abs().max()) <= math.sqrt(6.0 / 50)
    assert torch.equal(a, xavier_init(30, 20, seed=5))
    assert not torch.equal(a, xavier_init(30, 20, seed=6))
    with pytest.raises(DiffCoreError):
        xavier_init(0, 3, seed=0)


def test_xavier_init_is_centered():
    a = xavier_init(256, 256, seed=0)
    assert abs(float(a.mean())) < 0.01


def test_adam_zero_gradient_leaves_params_unchanged():
    w = torch.tensor([[1.0, -2.0, 0.5]], dtype=torch.float64, requires_grad=True)
    before = w.detach().clone()
    state = AdamState({"w": w}, lr=0.01)
    for _ in range(3):
        adam_step({"w": w}, {"w": torch.zeros(1, 3, dtype=torch.float64)}, state)
    assert torch.equal(w.detach(), before)
