"""Robust surrogate loss phi_gamma(x, y; theta) = sup_z loss(z, y; theta) - gamma * c(z, x).

Closed forms hold for the zero-one loss with a unit-norm linear classifier:
labeled points use the L2 cost, self-labeled points the squared L2 cost.
The dual additive term gamma * epsilon is dropped everywhere (fixed gamma).
Misclassification follows the risk convention y <theta, x> <= 0.
"""
import logging
from typing import Optional, Tuple

import numpy as np
from scipy.stats import norm

from errors import NonUnitThetaError
from models import LinearModel, Model
from schemas import CostKind, GmmSpec, InnerSolverConfig
from services.inner_solver import LossHandle, adversarial_perturb_batch, transport_cost

logger = logging.getLogger(__name__)

UNIT_TOL = 1e-9


def check_unit(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    length = float(np.linalg.norm(theta))
    if length == 0.0:
        raise NonUnitThetaError("theta must be nonzero")
    if abs(length - 1.0) > UNIT_TOL:
        raise NonUnitThetaError("closed forms assume ||theta|| = 1", norm=length)
    return theta


def zero_one_loss(margins: np.ndarray) -> np.ndarray:
    """1 where y <theta, x> <= 0."""
    return (np.asarray(margins) <= 0).astype(float)


def phi_labeled_closed(theta: np.ndarray, x: np.ndarray, y: int, gamma: float) -> float:
    """min{1, max{0, 1 - gamma * y <theta, x>}} for the L2 cost."""
    theta = check_unit(theta)
    margin = y * float(np.dot(theta, x))
    return float(min(1.0, max(0.0, 1.0 - gamma * margin)))


def phi_unlabeled_closed(theta: np.ndarray, x: np.ndarray, gamma_prime: float) -> float:
    """max{0, 1 - gamma' <theta, x>^2} for the squared L2 cost and self-label sign(<theta, x>)."""
    theta = check_unit(theta)
    score = float(np.dot(theta, x))
    return float(max(0.0, 1.0 - gamma_prime * score * score))


def labeled_surrogate(margins: np.ndarray, labels: np.ndarray, gamma: float,
                      cost: CostKind = CostKind.L2) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form labeled term on raw margins and its derivative in the margin.

    With a unit-norm model this is phi_labeled_closed row by row; with
    unnormalized weights it is the linear training loss. Kinks get 0.
    """
    ys = labels * margins
    if cost == CostKind.L2:
        slack = 1.0 - gamma * ys
        values = np.clip(slack, 0.0, 1.0)
        active = (slack > 0.0) & (slack < 1.0)
        return values, np.where(active, -gamma * labels, 0.0)
    positive = ys > 0
    slack = 1.0 - gamma * ys * ys
    values = np.where(positive, np.maximum(slack, 0.0), 1.0)
    active = positive & (slack > 0.0)
    return values, np.where(active, -2.0 * gamma * ys * labels, 0.0)


def unlabeled_surrogate(margins: np.ndarray, gamma_prime: float,
                        cost: CostKind = CostKind.L2_SQUARED) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form self-labeled term on raw margins and its derivative in the margin."""
    if cost == CostKind.L2_SQUARED:
        slack = 1.0 - gamma_prime * margins * margins
        active = slack > 0.0
        return np.maximum(slack, 0.0), np.where(active, -2.0 * gamma_prime * margins, 0.0)
    magnitude = np.abs(margins)
    slack = 1.0 - gamma_prime * magnitude
    active = (slack > 0.0) & (magnitude > 0.0)
    return np.maximum(slack, 0.0), np.where(active, -gamma_prime * np.sign(margins), 0.0)


def _zero_one_line_sup(model: LinearModel, X: np.ndarray, Y: np.ndarray, gamma: float,
                       cost: CostKind) -> Tuple[np.ndarray, np.ndarray]:
    """Exact sup for the zero-one loss: stay at x, or move to the decision boundary."""
    margins = model.margins(X)
    ys = Y * margins
    weight_norm = float(np.linalg.norm(model.w))
    distance = np.maximum(ys, 0.0) / weight_norm
    penalty = distance if cost == CostKind.L2 else distance ** 2
    move = (ys > 0) & (1.0 - gamma * penalty > 0.0)
    values = np.where(ys <= 0, 1.0, np.where(move, 1.0 - gamma * penalty, 0.0))
    shift = (margins / weight_norm ** 2)[:, None] * model.w[None, :]
    Z = np.where(move[:, None], X - shift, X)
    return values, Z


def phi_numeric_batch(loss: LossHandle, model: Optional[Model], X: np.ndarray, Y: np.ndarray,
                      gamma: float, cost: CostKind,
                      inner: InnerSolverConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise phi values and perturbed points."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y)
    if not loss.differentiable:
        if not isinstance(model, LinearModel):
            raise ValueError("the zero-one loss is only supported for linear models")
        return _zero_one_line_sup(model, X, Y, gamma, cost)
    Z = adversarial_perturb_batch(model, X, Y, gamma, cost, inner, loss=loss)
    values = loss.values(model, Z, Y) - gamma * transport_cost(cost, Z, X)
    return values, Z


def phi_numeric(loss: LossHandle, theta: Optional[Model], x: np.ndarray, y: int, gamma: float,
                cost: CostKind, inner: InnerSolverConfig) -> Tuple[float, np.ndarray]:
    """phi_gamma(x, y; theta) and the maximizing point z*.

    The trainer differentiates loss(z*, y; theta) in theta with z* held fixed.
    """
    values, Z = phi_numeric_batch(loss, theta, np.asarray(x, dtype=float)[None, :], np.array([y]),
                                  gamma, cost, inner)
    return float(values[0]), Z[0]


def robust_gap_exact(theta: np.ndarray, gamma: float, spec: GmmSpec) -> float:
    """E[phi_gamma] - E[zero-one] for the labeled closed form under P0.

    The gap is E[(1 - gamma u) 1(0 < u < 1/gamma)] with u = y <theta, X>
    distributed N(<theta, mu0>, theta' Sigma0 theta).
    """
    theta = check_unit(theta)
    mean = float(theta @ spec.mean0)
    scale = float(np.sqrt(theta @ spec.covariance0 @ theta))
    lower = (0.0 - mean) / scale
    upper = (1.0 / gamma - mean) / scale
    mass = norm.cdf(upper) - norm.cdf(lower)
    return float((1.0 - gamma * mean) * mass - gamma * scale * (norm.pdf(lower) - norm.pdf(upper)))

