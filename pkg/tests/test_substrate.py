import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from evgraph.substrate import (DegenerateInputError, DeterminismError, EmptyGradientError, Mlp, MlpSpec,
                               Optimizer, OptimizerState, ShapeError, adam_step, cosine_lr, grad_check,
                               halving_lr, index_param_count, init_params, knn, load_weights, save_weights,
                               sgd_cosine_step, softmax)
from oracles import brute_knn, mp_softmax


def test_identity_linear_layer():
    m = Mlp((4, 4))
    with torch.no_grad():
        m.layers[0].weight.copy_(torch.eye(4))
        m.layers[0].bias.zero_()
    x = torch.randn(3, 4)
    assert torch.equal(m(x), x)


def test_zero_weights_give_bias():
    m = Mlp((3, 5, 2))
    init_params(m, 0, "zeros")
    with torch.no_grad():
        m.layers[-1].bias.copy_(torch.tensor([1.5, -2.0]))
    assert m(torch.randn(7, 3)).tolist() == [[1.5, -2.0]] * 7


def test_mlp_width_mismatch():
    with pytest.raises(ShapeError):
        Mlp((3, 2))(torch.zeros(1, 4))
    with pytest.raises(ValueError):
        MlpSpec((3,))


def test_mlp_gradient_finite_differences():
    torch.manual_seed(0)
    m = Mlp(MlpSpec((4, 6, 3), activation="tanh")).double()
    x = torch.randn(5, 4, dtype=torch.float64)
    err = grad_check(lambda: (m(x) ** 2).sum(), list(m.parameters()), eps=1e-5)
    assert err < 1e-6


def test_softmax_constant_and_shift():
    assert softmax(torch.zeros(4, dtype=torch.float64)).tolist() == [0.25] * 4
    x = torch.randn(6, dtype=torch.float64)
    assert torch.allclose(softmax(x), softmax(x + 100), atol=1e-12, rtol=0)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=12))
def test_softmax_matches_extended_precision(values):
    got = softmax(torch.tensor(values, dtype=torch.float64)).tolist()
    assert all(abs(a - float(b)) < 1e-12 for a, b in zip(got, mp_softmax(values)))


def test_softmax_mask():
    p = softmax(torch.tensor([[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]), mask=torch.tensor([[True, False, True],
                                                                                      [False, False, False]]))
    assert p[0, 1] == 0 and abs(float(p[0].sum()) - 1) < 1e-7
    assert p[1].tolist() == [0.0, 0.0, 0.0]


def test_knn_collinear():
    assert knn(np.array([[0.0], [1.0], [3.0]]), 1).ravel().tolist() == [1, 0, 1]


def test_knn_exhaustive_rows():
    pts = np.random.default_rng(0).normal(size=(9, 3))
    idx = knn(pts, 8)
    for i, row in enumerate(idx):
        assert sorted(row.tolist()) == [j for j in range(9) if j != i]


def test_knn_matches_brute_force_200():
    pts = np.random.default_rng(1).normal(size=(200, 8))
    assert knn(pts, 20).tolist() == brute_knn(pts, 20)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 60), st.integers(1, 6), st.integers(1, 12), st.integers(0, 2**32 - 1), st.booleans())
def test_knn_matches_brute_force_with_ties(n, d, k, seed, lattice):
    rng = np.random.default_rng(seed)
    pts = rng.integers(0, 3, size=(n, d)).astype(float) if lattice else rng.normal(size=(n, d))
    assert knn(pts, k).tolist() == brute_knn(pts, min(k, n - 1))


def test_knn_batched_mask():
    pts = torch.tensor([[[0.0], [1.0], [5.0]], [[0.0], [2.0], [0.0]]])
    mask = torch.tensor([[True, True, True], [True, True, False]])
    idx, valid = knn(pts, 2, mask=mask)
    assert idx[0].tolist() == [[1, 2], [0, 2], [1, 0]]
    assert valid[1].tolist() == [[True, False], [True, False], [False, False]]
    assert idx[1, 0, 0] == 1


def test_knn_degenerate():
    with pytest.raises(DegenerateInputError):
        knn(np.zeros((1, 2)), 1)


def test_grad_check_least_squares():
    torch.manual_seed(1)
    a, b = torch.randn(10, 3, dtype=torch.float64), torch.randn(10, dtype=torch.float64)
    w = torch.randn(3, dtype=torch.float64, requires_grad=True)
    assert grad_check(lambda: ((a @ w - b) ** 2).sum(), [w]) < 1e-8


def test_grad_check_detects_corruption():
    w = torch.randn(4, dtype=torch.float64, requires_grad=True)
    loss = lambda: (w ** 2).sum()
    grads = [2 * (2 * w.detach())]
    assert grad_check(loss, [w], grads=grads) > 0.3


def test_grad_check_rejects_nondeterminism():
    state = {"n": 0}
    w = torch.ones(2, dtype=torch.float64)

    def noisy():
        state["n"] += 1
        return (w * state["n"]).sum()

    with pytest.raises(DeterminismError):
        grad_check(noisy, [w])


def test_cosine_endpoints():
    assert cosine_lr(0, 30) == pytest.approx(1e-1, abs=1e-15)
    assert cosine_lr(30, 30) == pytest.approx(1e-4, abs=1e-15)
    assert OptimizerState(epochs=30).lr(15) == pytest.approx((1e-1 + 1e-4) / 2)


def test_halving_schedule():
    assert [halving_lr(e, 1e-4, 20) for e in (0, 19, 20, 40)] == [1e-4, 1e-4, 5e-5, 2.5e-5]


def test_zero_gradient_leaves_params():
    p = nn.Parameter(torch.tensor([1.0, 2.0]))
    opt = Optimizer([p], OptimizerState(momentum=0.0))
    p.grad = torch.zeros(2)
    sgd_cosine_step(opt)
    assert p.tolist() == [1.0, 2.0]
    with pytest.raises(ValueError):
        adam_step(opt)


def test_step_without_backward():
    with pytest.raises(EmptyGradientError):
        Optimizer([nn.Parameter(torch.zeros(1))], OptimizerState()).step()


def test_adam_quadratic():
    x = nn.Parameter(torch.tensor([5.0], dtype=torch.float64))
    opt = Optimizer([x], OptimizerState(kind="adam", lr_max=0.1, halve_every=10**6))
    losses = []
    for _ in range(100):
        loss = ((x - 2.0) ** 2).sum()
        losses.append(float(loss.detach()))
        loss.backward()
        adam_step(opt)
    assert all(b < a for a, b in zip(losses[5:], losses[6:40]))
    assert abs(float(x.detach()) - 2.0) < 0.1


def test_grad_clip_bounds_update():
    p = nn.Parameter(torch.zeros(3))
    opt = Optimizer([p], OptimizerState(momentum=0.0, lr_max=1.0, lr_min=1.0, grad_clip=1.0))
    p.grad = torch.tensor([30.0, 40.0, 0.0])
    opt.step()
    assert torch.allclose(p.detach(), torch.tensor([-0.6, -0.8, 0.0]))


def test_init_deterministic_and_zeros():
    a, b = init_params(Mlp((5, 7, 2)), 3), init_params(Mlp((5, 7, 2)), 3)
    assert all(torch.equal(x, y) for x, y in zip(a.parameters(), b.parameters()))
    assert all(not p.any() for p in init_params(Mlp((5, 7, 2)), 3, "zeros").parameters())
    with pytest.raises(ValueError):
        init_params(Mlp((2, 2)), 0, "xavier")


@pytest.mark.parametrize("scheme,factor", [("fan_in", 1.0 / 3.0), ("he", 2.0)])
def test_init_variance(scheme, factor):
    fan_in = 50
    w = init_params(nn.Linear(fan_in, 200), 7, scheme).weight.detach().double()
    assert w.numel() == 10_000
    assert abs(float(w.var()) / (factor / fan_in) - 1.0) < 0.1


def test_weight_round_trip(tmp_path):
    m = init_params(Mlp((3, 4, 2)), 1)
    save_weights(m, tmp_path / "w")
    other = init_params(Mlp((3, 4, 2)), 2)
    load_weights(other, tmp_path / "w")
    assert all(torch.equal(x, y) for x, y in zip(m.parameters(), other.parameters()))
    assert index_param_count(tmp_path / "w") == 3 * 4 + 4 + 4 * 2 + 2
    assert (tmp_path / "w.bin").stat().st_size == 4 * 26
