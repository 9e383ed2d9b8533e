import numpy as np
import pytest

from odenet.basis import build_basis
from odenet.data import Batch, Dataset, Trajectory
from odenet.integrate import IntegratorConfig, integrate
from odenet.model import CoefficientMatrix, ODEModel
from odenet.recipes import gradient_check
from odenet.sensitivity import integrate_with_sensitivity, loss_and_gradient
from odenet.systems import generate_dataset, make_lv

TIGHT = IntegratorConfig(atol=1e-10, rtol=1e-10)


def test_exponential_parameter_sensitivity():
    b = build_basis(1, 1)
    model = ODEModel(b, CoefficientMatrix(np.array([[0.0, -1.0]]), np.array([[False, True]])))
    x, s_theta, s_init = integrate_with_sensitivity(model, [1.0], None, [0.0, 1.0], TIGHT)
    assert s_theta[0, 0, 0] == pytest.approx(np.exp(-1), abs=1e-5)
    assert s_init.shape[-1] == 0


def test_no_free_parameters_matches_integrate():
    b = build_basis(2, 1)
    th = CoefficientMatrix(np.array([[0.0, -1.0, 0.5], [0.0, 0.2, -0.3]]), np.zeros((2, 3), bool))
    th.values[:] = 0.0
    model = ODEModel(b, th)
    grid = np.linspace(0, 1, 5)
    x, _, _ = integrate_with_sensitivity(model, [1.0, 2.0], None, grid)
    np.testing.assert_array_equal(x, integrate(model, [1.0, 2.0], grid))


def test_initial_sensitivity_columns():
    model = make_lv("limit_cycle").model
    x, s_theta, s_init = integrate_with_sensitivity(model, [10.0, 10.0], [True, False], [0.0, 1e-9])
    np.testing.assert_allclose(s_init[0, :, 0], [1.0, 0.0], atol=1e-6)


def _lv_batch(eps=0.0):
    sys = make_lv("limit_cycle")
    ds, _ = generate_dataset(sys, horizon=2.0, eps=eps)
    return sys, ds, Batch.from_pieces(ds, [(0, 0), (0, 50), (0, 120)], 5)


def test_perfect_fit_zero_loss():
    sys, ds, batch = _lv_batch()
    model = sys.model.copy()
    res = loss_and_gradient(batch, model, 0.0, TIGHT)
    assert res.loss < 1e-12
    np.testing.assert_allclose(res.grad_theta, 0.0, atol=1e-5)
    res = loss_and_gradient(batch, model, 0.5, TIGHT)
    p = model.theta.get_free()
    assert res.loss == pytest.approx(0.5 * np.abs(p).sum(), abs=1e-9)
    np.testing.assert_allclose(res.grad_theta, 0.5 * np.sign(p), atol=1e-5)


def test_reordering_pieces_leaves_loss_unchanged():
    sys, ds, batch = _lv_batch(0.01)
    model = ODEModel(sys.basis, np.where(sys.model.theta.active, sys.model.theta.values * 1.01, 0.001))
    a = loss_and_gradient(batch, model, 0.1)
    b = loss_and_gradient(batch.permuted([2, 0, 1]), model, 0.1)
    assert a.loss == pytest.approx(b.loss, rel=1e-12)
    np.testing.assert_allclose(a.grad_theta, b.grad_theta, rtol=1e-10)


def test_pruning_does_not_change_surviving_gradients():
    sys, ds, batch = _lv_batch(0.01)
    vals = np.where(sys.model.theta.active, sys.model.theta.values, 0.0)
    vals[0, 0] = 0.0  # an entry that is zero either way
    full = ODEModel(sys.basis, CoefficientMatrix(vals))
    pruned_mask = np.ones_like(vals, bool)
    pruned_mask[0, 0] = False
    pruned = ODEModel(sys.basis, CoefficientMatrix(vals, pruned_mask))
    g_full = loss_and_gradient(batch, full, 0.0).grad_theta
    g_pruned = loss_and_gradient(batch, pruned, 0.0).grad_theta
    np.testing.assert_allclose(g_full[1:], g_pruned, rtol=1e-8)


def test_failed_piece_sentinel():
    b = build_basis(1, 2)
    blow = ODEModel(b, np.array([[0.0, 0.0, 1.0]]))
    ds = Dataset([Trajectory(np.linspace(0, 3, 31), np.ones((31, 1)))])
    res = loss_and_gradient(Batch.from_pieces(ds, [(0, 0)], 30), blow, 0.0)
    assert res.all_failed and res.loss >= 1e6
    assert np.all(res.grad_theta == 0)


def test_hidden_gradient_moves():
    sys = make_lv("limit_cycle")
    ds, _ = generate_dataset(sys, horizon=1.0)
    hidden = Dataset([Trajectory(t.times, t.values, [False, True]) for t in ds])
    batch = Batch.from_pieces(hidden, [(0, 0)], 10)
    res = loss_and_gradient(batch, sys.model, 0.0, hidden_init=np.array([[11.0]]))
    assert abs(res.grad_hidden[0, 0]) > 0


def test_random_gradient_check():
    m = gradient_check(20, seed=3)
    assert m["passed"], m
