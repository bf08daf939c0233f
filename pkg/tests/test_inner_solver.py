import numpy as np
import pytest

from errors import InnerSolverDivergenceError, NumericError
from models import LinearModel, initialize_mlp, loss_and_grad_batch
from schemas import CostKind, InnerSolverConfig, LossKind, StepDecay
from services.inner_solver import (
    LossHandle,
    adversarial_perturb,
    adversarial_perturb_batch,
    grid_oracle,
    transport_cost,
    transport_cost_grad,
)


def _inner_objective(model, Z, X, Y, gamma, cost, kind=LossKind.CROSS_ENTROPY):
    values, _, _ = loss_and_grad_batch(model, Z, Y, kind)
    return values - gamma * transport_cost(cost, Z, X)


def test_l2_cost_gradient_is_zero_at_the_anchor():
    X = np.array([[1.0, 2.0]])
    assert np.array_equal(transport_cost_grad(CostKind.L2, X, X), np.zeros_like(X))
    assert np.allclose(transport_cost_grad(CostKind.L2_SQUARED, X + 1.0, X), 2.0)


def test_zero_step_size_leaves_points_in_place(rng):
    model = LinearModel(w=np.array([0.6, 0.8]))
    X = rng.standard_normal((5, 2))
    Z = adversarial_perturb_batch(model, X, np.ones(5), 1.0, CostKind.L2, InnerSolverConfig(alpha=0.0))
    assert np.array_equal(Z, X)


@pytest.mark.parametrize("cost", [CostKind.L2, CostKind.L2_SQUARED])
def test_best_iterate_never_below_starting_point(rng, cost):
    model = initialize_mlp([4, 8, 2], rng)
    X = rng.standard_normal((10, 4))
    Y = rng.choice([-1, 1], size=10)
    cfg = InnerSolverConfig(steps=15, alpha=0.5)
    Z = adversarial_perturb_batch(model, X, Y, 0.5, cost, cfg)
    start = _inner_objective(model, X, X, Y, 0.5, cost)
    assert np.all(_inner_objective(model, Z, X, Y, 0.5, cost) >= start - 1e-12)


def test_trace_has_one_row_per_step(rng):
    model = LinearModel(w=np.array([1.0, 0.0]))
    cfg = InnerSolverConfig(steps=7, alpha=0.1)
    z, trace = adversarial_perturb(model, np.array([0.5, 0.0]), 1, 2.0, CostKind.L2_SQUARED, cfg,
                                   return_trace=True)
    assert z.shape == (2,)
    assert trace.shape == (8,)


def test_constant_step_solves_concave_quadratic():
    center = np.array([2.0, -1.0])

    def pull(Z, Y):
        diff = Z - center
        return -0.5 * np.sum(diff * diff, axis=1), -diff

    cfg = InnerSolverConfig(steps=200, alpha=0.25, step_decay=StepDecay.CONSTANT)
    x = np.array([1.0, 1.0])
    z = adversarial_perturb(None, x, 1, 0.5, CostKind.L2_SQUARED, cfg, loss=LossHandle(function=pull))
    assert np.allclose(z, (center + x) / 2.0, atol=1e-8)


def test_decayed_steps_move_less_than_constant_steps():
    model = LinearModel(w=np.array([1.0]))
    x = np.array([0.2])
    decayed = adversarial_perturb(model, x, 1, 1e-3, CostKind.L2_SQUARED, InnerSolverConfig(steps=5, alpha=0.1))
    constant = adversarial_perturb(model, x, 1, 1e-3, CostKind.L2_SQUARED,
                                   InnerSolverConfig(steps=5, alpha=0.1, step_decay=StepDecay.CONSTANT))
    assert abs(decayed[0] - x[0]) < abs(constant[0] - x[0])


def test_unbounded_inner_problem_hits_radius_cap():
    model = LinearModel(w=np.array([1.0, 0.0]))
    cfg = InnerSolverConfig(steps=15, alpha=10.0, radius_cap=1e3)
    handle = LossHandle(kind=LossKind.SQUARED_MARGIN)
    with pytest.raises(InnerSolverDivergenceError) as info:
        adversarial_perturb(model, np.array([0.5, 0.0]), 1, 1e-7, CostKind.L2, cfg, loss=handle)
    assert info.value.context["cap"] == 1e3
    assert info.value.context["step"] >= 1


def test_non_finite_gradient_reports_step():
    def broken(Z, Y):
        return np.zeros(Z.shape[0]), np.full(Z.shape, np.nan)

    with pytest.raises(NumericError) as info:
        adversarial_perturb(None, np.zeros(2), 1, 1.0, CostKind.L2, InnerSolverConfig(),
                            loss=LossHandle(function=broken))
    assert info.value.context["step"] == 1


def test_zero_one_loss_is_refused_by_gradient_ascent():
    model = LinearModel(w=np.array([1.0]))
    with pytest.raises(ValueError):
        adversarial_perturb(model, np.array([1.0]), 1, 1.0, CostKind.L2, InnerSolverConfig(),
                            loss=LossHandle(kind=LossKind.ZERO_ONE))


def test_grid_oracle_breaks_ties_at_first_grid_point():
    flat = LossHandle(function=lambda Z, Y: (np.zeros(Z.shape[0]), np.zeros_like(Z)))
    x = np.array([0.0, 1.0])
    value, z = grid_oracle(flat, np.array([1.0, 0.0]), x, 1, 0.0, CostKind.L2, grid_range=1.0, grid_step=0.25)
    assert value == 0.0
    assert np.allclose(z, [-1.0, 1.0])


def test_grid_oracle_matches_ascent_on_smooth_linear_loss():
    model = LinearModel(w=np.array([0.0, 1.0]))
    x = np.array([0.3, 0.4])
    handle = LossHandle(kind=LossKind.CROSS_ENTROPY)
    grid_value, _ = grid_oracle(handle, model, x, 1, 2.0, CostKind.L2_SQUARED, grid_range=2.0, grid_step=1e-4)
    cfg = InnerSolverConfig(steps=500, alpha=0.1, step_decay=StepDecay.CONSTANT)
    z = adversarial_perturb(model, x, 1, 2.0, CostKind.L2_SQUARED, cfg, loss=handle)
    ascent_value = _inner_objective(model, z[None, :], x[None, :], np.array([1]), 2.0, CostKind.L2_SQUARED)[0]
    assert ascent_value == pytest.approx(grid_value, abs=1e-4)


@pytest.mark.parametrize("kind", [LossKind.HINGE01_SURROGATE, LossKind.CROSS_ENTROPY])
@pytest.mark.parametrize("cost", [CostKind.L2, CostKind.L2_SQUARED])
@pytest.mark.parametrize("gamma", [0.5, 2.0, 100.0, 1e6])
def test_decayed_ascent_trace_never_decreases(rng, kind, cost, gamma):
    model = LinearModel(w=np.array([0.6, 0.8]))
    X = rng.standard_normal((40, 2))
    Y = rng.choice([-1, 1], size=40)
    Z, trace = adversarial_perturb_batch(model, X, Y, gamma, cost, InnerSolverConfig(),
                                         loss=LossHandle(kind=kind), return_trace=True)
    assert trace.shape == (16, 40)
    assert np.all(np.diff(trace, axis=0) >= 0.0)
    assert np.allclose(trace[-1], _inner_objective(model, Z, X, Y, gamma, cost, kind), rtol=0.0, atol=1e-12)


@pytest.mark.parametrize("y", [1, -1])
def test_strongly_concave_hinge_reaches_the_stationary_point(y):
    w = np.array([0.6, 0.8])
    model = LinearModel(w=w)
    x = 0.5 * y * w + 0.3 * np.array([0.8, -0.6])
    gamma = 100.0
    z = adversarial_perturb(model, x, y, gamma, CostKind.L2_SQUARED, InnerSolverConfig(),
                            loss=LossHandle(kind=LossKind.HINGE01_SURROGATE))
    assert np.allclose(z, x - y * w / (2.0 * gamma), atol=1e-5)


def test_penalty_dominated_points_do_not_move():
    model = LinearModel(w=np.array([0.6, 0.8]))
    X = np.array([[0.3, -0.1], [1.0, 2.0], [-0.4, 0.0]])
    Z = adversarial_perturb_batch(model, X, np.array([1, -1, 1]), 1e6, CostKind.L2, InnerSolverConfig(),
                                  loss=LossHandle(kind=LossKind.HINGE01_SURROGATE))
    assert np.array_equal(Z, X)
