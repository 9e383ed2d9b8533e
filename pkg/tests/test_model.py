import numpy as np
import pytest

from odenet.basis import build_basis
from odenet.errors import ConstraintError
from odenet.model import CoefficientMatrix, ODEModel, Tie, apply_threshold, render_equations, zero_model
from odenet.systems import make_lorenz, make_lv


def test_rhs_vanishes_at_fixed_points():
    od = make_lv("over_damped").model
    np.testing.assert_allclose(od.rhs([1.0, 0.5]), [0, 0], atol=1e-15)
    lz = make_lorenz().model
    c = 6 * np.sqrt(2)
    np.testing.assert_allclose(lz.rhs([c, c, 27.0]), [0, 0, 0], atol=1e-12)
    np.testing.assert_array_equal(zero_model(build_basis(3, 2)).rhs([1, 2, 3]), 0)


def test_lv_jacobian_matches_closed_form(rng):
    model = make_lv("spiral").model
    c11, c12, c13, c21, c22, c23 = 2.0, -1.1, -0.1, -1.0, -0.1, 0.9
    x1, x2 = rng.uniform(0, 3, 2)
    expected = [[c11 + c12 * x2 + 2 * c13 * x1, c12 * x1], [c22 * x2, c21 + c22 * x1 + 2 * c23 * x2]]
    np.testing.assert_allclose(model.rhs_jacobian_state([x1, x2]), expected, rtol=1e-14)
    lc = make_lv("limit_cycle").model
    assert lc.rhs_jacobian_state([100 / 3, 20.0])[0, 0] == pytest.approx(0.0, abs=1e-14)


def test_jacobian_matches_finite_differences(rng):
    b = build_basis(3, 2)
    model = ODEModel(b, rng.normal(size=(3, b.size)))
    x = rng.uniform(-1, 1, 3)
    h = 1e-6
    fd = np.stack([(model.rhs(x + h * e) - model.rhs(x - h * e)) / (2 * h) for e in np.eye(3)], axis=1)
    np.testing.assert_allclose(model.rhs_jacobian_state(x), fd, rtol=1e-6, atol=1e-8)


def test_gradient_structure_with_tie():
    b = build_basis(2, 2)
    ties = [Tie((1, j), (0, j), -1.0) for j in range(b.size)]
    model = ODEModel(b, CoefficientMatrix(np.zeros((2, b.size)), None, ties))
    g = model.rhs_gradient_theta([2.0, 3.0])  # (d, K) over free entries
    lam = np.array([1, 2, 3, 4, 6, 9.0])
    np.testing.assert_array_equal(g[0], lam)
    np.testing.assert_array_equal(g[1], -lam)


def test_ties_hold_after_update():
    b = build_basis(2, 1)
    th = CoefficientMatrix(np.zeros((2, 3)), None, [Tie((1, 1), (0, 1), -2.0)])
    th.set_free(np.arange(1.0, th.free_mask.sum() + 1))
    assert th.values[1, 1] == -2.0 * th.values[0, 1]


def test_cyclic_ties_rejected():
    with pytest.raises(ConstraintError):
        CoefficientMatrix(np.zeros((2, 3)), None, [Tie((1, 1), (0, 1)), Tie((0, 1), (1, 1))])


def test_threshold_is_strict_and_permanent():
    th = CoefficientMatrix(np.array([[1.5, 0.0005], [-1.0, 0.002]]))
    assert apply_threshold(th, 0.001) == 1
    assert not th.active[0, 1] and th.values[0, 1] == 0.0
    th2 = CoefficientMatrix(np.array([[0.001, 1.0]]))
    assert apply_threshold(th2, 0.001) == 0
    assert apply_threshold(th, 1e-9) == 0
    th.values[0, 1] = 5.0  # frozen entries stay frozen at zero
    th.set_free(th.get_free())
    assert th.values[0, 1] == 0.0


def test_pruning_source_prunes_targets():
    th = CoefficientMatrix(np.array([[0.0001, 1.0], [-0.0001, -1.0]]), None, [Tie((1, 0), (0, 0), -1.0)])
    th.apply_threshold(0.01)
    assert not th.active[1, 0]


def test_render():
    lines = render_equations(make_lv("limit_cycle").model, 3)
    assert lines == ["dx1/dt = 1*x1 - 0.05*x1*x2", "dx2/dt = -1*x2 + 0.03*x1*x2"]
    empty = ODEModel(build_basis(1, 1), CoefficientMatrix(np.zeros((1, 2)), np.zeros((1, 2), bool)))
    assert render_equations(empty)[0] == "dx1/dt = 0"


def test_json_round_trip_is_bit_exact(rng):
    b = build_basis(3, 2)
    vals = rng.normal(size=(3, b.size))
    model = ODEModel(b, CoefficientMatrix(vals, rng.random((3, b.size)) > 0.3, [Tie((2, 1), (0, 1), -1.0)]))
    back = ODEModel.from_json(model.to_json())
    np.testing.assert_array_equal(back.theta.values, model.theta.values)
    np.testing.assert_array_equal(back.theta.active, model.theta.active)
    assert back.to_json() == model.to_json()
