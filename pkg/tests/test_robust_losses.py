import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from errors import NonUnitThetaError
from models import LinearModel
from schemas import CostKind, InnerSolverConfig, LossKind, StepDecay
from services.bounds import robust_gap_bound
from services.gmm_data import general_spec, isotropic_spec, sample_labeled
from services.inner_solver import LossHandle, grid_oracle
from services.robust_losses import (
    labeled_surrogate,
    phi_labeled_closed,
    phi_numeric,
    phi_unlabeled_closed,
    robust_gap_exact,
    unlabeled_surrogate,
    zero_one_loss,
)

ZERO_ONE = LossHandle(kind=LossKind.ZERO_ONE)


def _unit(vector):
    vector = np.asarray(vector, dtype=float)
    return vector / np.linalg.norm(vector)


def test_labeled_closed_form_basic_values():
    theta = np.array([1.0, 0.0])
    assert phi_labeled_closed(theta, np.array([0.5, 3.0]), 1, gamma=1.0) == pytest.approx(0.5)
    assert phi_labeled_closed(theta, np.array([-0.5, 0.0]), 1, gamma=1.0) == 1.0
    assert phi_labeled_closed(theta, np.array([0.0, 1.0]), -1, gamma=1.0) == 1.0
    assert phi_labeled_closed(theta, np.array([2.0, 0.0]), 1, gamma=1.0) == 0.0


def test_unlabeled_closed_form_basic_values():
    theta = np.array([0.0, 1.0])
    assert phi_unlabeled_closed(theta, np.zeros(2), gamma_prime=3.0) == 1.0
    assert phi_unlabeled_closed(theta, np.array([5.0, 0.5]), gamma_prime=4.0) == pytest.approx(0.0)
    assert phi_unlabeled_closed(theta, np.array([0.0, -0.5]), gamma_prime=1.0) == pytest.approx(0.75)


def test_closed_forms_require_unit_theta():
    with pytest.raises(NonUnitThetaError):
        phi_labeled_closed(np.array([2.0, 0.0]), np.ones(2), 1, 1.0)
    with pytest.raises(NonUnitThetaError):
        phi_unlabeled_closed(np.zeros(2), np.ones(2), 1.0)


def test_zero_one_counts_boundary_as_error():
    assert zero_one_loss(np.array([-1.0, 0.0, 1e-12])).tolist() == [1.0, 1.0, 0.0]


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=10_000),
    gamma=st.floats(min_value=0.05, max_value=20.0),
    gamma_prime=st.floats(min_value=0.05, max_value=20.0),
)
def test_margin_surrogates_agree_with_closed_forms(seed, gamma, gamma_prime):
    rng = np.random.default_rng(seed)
    theta = _unit(rng.standard_normal(4))
    X = 2.0 * rng.standard_normal((8, 4))
    Y = rng.choice([-1, 1], size=8)
    labeled, _ = labeled_surrogate(X @ theta, Y, gamma, CostKind.L2)
    unlabeled, _ = unlabeled_surrogate(X @ theta, gamma_prime, CostKind.L2_SQUARED)
    for row in range(8):
        assert labeled[row] == pytest.approx(phi_labeled_closed(theta, X[row], int(Y[row]), gamma), abs=1e-12)
        assert unlabeled[row] == pytest.approx(phi_unlabeled_closed(theta, X[row], gamma_prime), abs=1e-12)


@pytest.mark.parametrize("d", [2, 10])
def test_closed_forms_match_grid_oracle(d):
    rng = np.random.default_rng(d)
    worst = 0.0
    for _ in range(100):
        theta = _unit(rng.standard_normal(d))
        model = LinearModel(w=theta)
        x = rng.standard_normal(d)
        y = int(rng.choice([-1, 1]))
        gamma = float(rng.uniform(0.2, 5.0))
        gamma_prime = float(rng.uniform(0.2, 5.0))
        score = float(theta @ x)

        labeled, _ = grid_oracle(ZERO_ONE, model, x, y, gamma, CostKind.L2,
                                 grid_range=1.0 / gamma + 0.5, grid_step=1e-4)
        worst = max(worst, abs(labeled - phi_labeled_closed(theta, x, y, gamma)))

        self_label = 1 if score >= 0 else -1
        unlabeled, _ = grid_oracle(ZERO_ONE, model, x, self_label, gamma_prime, CostKind.L2_SQUARED,
                                   grid_range=1.0 / math.sqrt(gamma_prime) + 0.5, grid_step=1e-4)
        worst = max(worst, abs(unlabeled - phi_unlabeled_closed(theta, x, gamma_prime)))
    assert worst <= 2e-3


def test_exact_zero_one_sup_matches_closed_forms():
    rng = np.random.default_rng(3)
    inner = InnerSolverConfig()
    for _ in range(50):
        theta = _unit(rng.standard_normal(3))
        model = LinearModel(w=theta)
        x = rng.standard_normal(3)
        y = int(rng.choice([-1, 1]))
        value, z = phi_numeric(ZERO_ONE, model, x, y, 1.5, CostKind.L2, inner)
        assert value == pytest.approx(phi_labeled_closed(theta, x, y, 1.5), abs=1e-12)
        assert z.shape == x.shape

        self_label = 1 if theta @ x >= 0 else -1
        value, _ = phi_numeric(ZERO_ONE, model, x, self_label, 0.7, CostKind.L2_SQUARED, inner)
        assert value == pytest.approx(phi_unlabeled_closed(theta, x, 0.7), abs=1e-12)


def test_numeric_phi_matches_analytic_sup_on_concave_instance():
    center = np.array([1.0, -2.0, 0.5])

    def pull_toward_center(Z, Y):
        diff = Z - center
        return -0.5 * np.sum(diff * diff, axis=1), -diff

    handle = LossHandle(function=pull_toward_center)
    inner = InnerSolverConfig(steps=200, alpha=0.25, step_decay=StepDecay.CONSTANT)
    x = np.array([0.0, 0.0, 0.0])
    gamma = 1.0
    value, z = phi_numeric(handle, None, x, 1, gamma, CostKind.L2_SQUARED, inner)
    expected_z = (center + 2 * gamma * x) / (1 + 2 * gamma)
    expected_value = -gamma / (1 + 2 * gamma) * float(center @ center)
    assert np.allclose(z, expected_z, atol=1e-4)
    assert value == pytest.approx(expected_value, abs=1e-4)


def test_robust_gap_exact_matches_monte_carlo():
    spec = isotropic_spec(d=3, mean_norm=1.0, sigma=1.0, seed=5)
    theta = -spec.mean0 / np.linalg.norm(spec.mean0)
    gamma = 0.8
    sample = sample_labeled(spec, 200_000, rng_seed=6)
    margins = sample.labels * (sample.features @ theta)
    phi = np.clip(1.0 - gamma * margins, 0.0, 1.0)
    estimate = float(np.mean(phi - (margins <= 0)))
    assert robust_gap_exact(theta, gamma, spec) == pytest.approx(estimate, abs=0.006)


def test_gap_bound_at_orthogonal_direction():
    spec = isotropic_spec(d=2, mean_norm=1.0, sigma=1.0, seed=0)
    theta = np.array([-spec.mean0[1], spec.mean0[0]])
    assert robust_gap_bound(theta, 1.0, spec) == pytest.approx(1.0 / (2.0 * math.sqrt(2.0 * math.pi)), rel=1e-12)
    assert robust_gap_bound(theta, 1e9, spec) < 1e-9


@settings(max_examples=200, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=100_000),
    gamma=st.floats(min_value=0.5, max_value=2.0),
    sigma=st.floats(min_value=0.3, max_value=3.0),
)
def test_gap_bound_dominates_exact_gap_for_opposed_directions(seed, gamma, sigma):
    spec = isotropic_spec(d=4, mean_norm=1.5, sigma=sigma, seed=seed)
    theta = _unit(np.random.default_rng(seed).standard_normal(4))
    if theta @ spec.mean0 > -sigma / 2:
        theta = _unit(theta - spec.mean0 * (theta @ spec.mean0 + sigma) / float(spec.mean0 @ spec.mean0))
    if theta @ spec.mean0 > 0:
        theta = -spec.mean0 / np.linalg.norm(spec.mean0)
    assert robust_gap_exact(theta, gamma, spec) <= robust_gap_bound(theta, gamma, spec) + 1e-12


def test_general_gap_bound_dominates_for_opposed_direction():
    spec = general_spec([1.0, 0.5, 0.0], [0.5, 1.0, 2.0], seed=3)
    theta = -spec.mean0 / np.linalg.norm(spec.mean0)
    for gamma in (0.5, 1.0, 2.0):
        assert robust_gap_exact(theta, gamma, spec) <= robust_gap_bound(theta, gamma, spec)


def test_gap_bound_fails_for_aligned_direction():
    spec = isotropic_spec(d=2, mean_norm=2.0, sigma=1.0, seed=1)
    theta = spec.mean0 / np.linalg.norm(spec.mean0)
    assert robust_gap_exact(theta, 1.0, spec) > robust_gap_bound(theta, 1.0, spec)


@pytest.mark.slow
def test_gap_bound_dominates_monte_carlo_gap():
    dominated = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        d = int(rng.integers(2, 20))
        sigma = float(rng.uniform(0.5, 2.0))
        gamma = float(rng.uniform(0.5, 2.0))
        spec = isotropic_spec(d=d, mean_norm=float(rng.uniform(0.5, 3.0)), sigma=sigma, seed=trial)
        theta = _unit(rng.standard_normal(d))
        if theta @ spec.mean0 > 0:
            theta = -theta
        sample = sample_labeled(spec, 100_000, rng_seed=10_000 + trial)
        margins = sample.labels * (sample.features @ theta)
        gap = float(np.mean(np.clip(1.0 - gamma * margins, 0.0, 1.0) - (margins <= 0)))
        dominated += gap <= robust_gap_bound(theta, gamma, spec)
    assert dominated >= 99


CONVERGED = InnerSolverConfig(steps=60, alpha=0.5, step_decay=StepDecay.CONSTANT)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(min_value=0, max_value=10_000))
def test_phi_does_not_increase_with_gamma(seed):
    rng = np.random.default_rng(seed)
    theta = _unit(rng.standard_normal(3))
    model = LinearModel(w=theta)
    x = 2.0 * rng.standard_normal(3)
    y = int(rng.choice([-1, 1]))
    cross_entropy = LossHandle(kind=LossKind.CROSS_ENTROPY)
    previous = None
    for gamma in (0.05, 0.2, 1.0, 2.0, 8.0, 50.0):
        current = (
            phi_labeled_closed(theta, x, y, gamma),
            phi_unlabeled_closed(theta, x, gamma),
            phi_numeric(ZERO_ONE, model, x, y, gamma, CostKind.L2, InnerSolverConfig())[0],
        )
        if gamma >= 1.0:
            current += (phi_numeric(cross_entropy, model, x, y, gamma, CostKind.L2_SQUARED, CONVERGED)[0],)
        if previous is not None:
            for later, earlier in zip(current, previous):
                assert later <= earlier + 1e-9
        previous = current


@settings(max_examples=100, deadline=None)
@given(
    seed=st.integers(min_value=0, max_value=10_000),
    gamma=st.floats(min_value=0.05, max_value=50.0),
)
def test_phi_dominates_the_loss_at_the_unperturbed_point(seed, gamma):
    rng = np.random.default_rng(seed)
    theta = _unit(rng.standard_normal(4))
    model = LinearModel(w=theta)
    x = 2.0 * rng.standard_normal(4)
    y = int(rng.choice([-1, 1]))
    score = float(theta @ x)
    self_label = 1 if score >= 0 else -1
    assert phi_labeled_closed(theta, x, y, gamma) >= zero_one_loss(np.array([y * score]))[0]
    assert phi_unlabeled_closed(theta, x, gamma) >= zero_one_loss(np.array([self_label * score]))[0]
    for kind in (LossKind.HINGE01_SURROGATE, LossKind.CROSS_ENTROPY, LossKind.SQUARED_MARGIN):
        handle = LossHandle(kind=kind)
        unperturbed = handle.values(model, x[None, :], np.array([y]))[0]
        for cost in (CostKind.L2, CostKind.L2_SQUARED):
            value, _ = phi_numeric(handle, model, x, y, gamma, cost, InnerSolverConfig())
            assert value >= unperturbed - 1e-12


def test_squared_norm_loss_has_analytic_sup():
    def squared_norm(Z, Y):
        return np.sum(Z * Z, axis=1), 2.0 * Z

    inner = InnerSolverConfig(steps=30, alpha=0.4, step_decay=StepDecay.CONSTANT)
    value, z = phi_numeric(LossHandle(function=squared_norm), None, np.array([1.0, 0.0]), 1, 2.0,
                           CostKind.L2_SQUARED, inner)
    assert np.allclose(z, [2.0, 0.0], atol=1e-6)
    assert value == pytest.approx(2.0, abs=1e-8)


@pytest.mark.parametrize("kind,cost", [
    (LossKind.HINGE01_SURROGATE, CostKind.L2),
    (LossKind.CROSS_ENTROPY, CostKind.L2_SQUARED),
    (LossKind.CROSS_ENTROPY, CostKind.L2),
    (LossKind.SQUARED_MARGIN, CostKind.L2_SQUARED),
])
def test_huge_penalty_pins_the_adversary_to_the_input(kind, cost):
    model = LinearModel(w=np.array([0.6, 0.8]))
    x = np.array([0.3, -0.1])
    handle = LossHandle(kind=kind)
    value, z = phi_numeric(handle, model, x, 1, 1e6, cost, InnerSolverConfig())
    assert np.allclose(z, x, atol=1e-5)
    assert value == pytest.approx(handle.values(model, x[None, :], np.array([1]))[0], abs=1e-5)


@pytest.mark.parametrize("d", [2, 10])
def test_numeric_phi_agrees_with_closed_forms_and_line_search(d):
    rng = np.random.default_rng(100 + d)
    cross_entropy = LossHandle(kind=LossKind.CROSS_ENTROPY)
    worst_closed = 0.0
    worst_ascent = 0.0
    for _ in range(500):
        theta = _unit(rng.standard_normal(d))
        model = LinearModel(w=theta)
        x = rng.standard_normal(d)
        y = int(rng.choice([-1, 1]))
        gamma = float(rng.uniform(1.0, 5.0))
        self_label = 1 if theta @ x >= 0 else -1

        labeled, _ = phi_numeric(ZERO_ONE, model, x, y, gamma, CostKind.L2, InnerSolverConfig())
        unlabeled, _ = phi_numeric(ZERO_ONE, model, x, self_label, gamma, CostKind.L2_SQUARED, InnerSolverConfig())
        worst_closed = max(worst_closed, abs(labeled - phi_labeled_closed(theta, x, y, gamma)),
                           abs(unlabeled - phi_unlabeled_closed(theta, x, gamma)))

        ascent, _ = phi_numeric(cross_entropy, model, x, y, gamma, CostKind.L2_SQUARED, CONVERGED)
        exhaustive, _ = grid_oracle(cross_entropy, model, x, y, gamma, CostKind.L2_SQUARED,
                                    grid_range=1.0, grid_step=1e-4)
        assert exhaustive >= ascent - 1e-6
        worst_ascent = max(worst_ascent, abs(ascent - exhaustive))
    assert worst_closed <= 1e-4
    assert worst_ascent <= 1e-4
