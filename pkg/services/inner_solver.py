import logging
from typing import Callable, Optional, Tuple, Union

import numpy as np

from errors import InnerSolverDivergenceError, NumericError
from models import LinearModel, Model, loss_and_grad_batch
from schemas import CostKind, InnerSolverConfig, LossKind, StepDecay

logger = logging.getLogger(__name__)

MAX_HALVINGS = 40
SUFFICIENT_INCREASE = 0.5

# function(Z, Y) -> (per-row values, per-row input gradients)
InputLoss = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


class LossHandle:
    """Per-sample loss the adversary maximizes.

    Wraps a model loss kind, or an arbitrary ``function(Z, Y)`` returning
    values and input gradients (the model is then ignored).
    """

    def __init__(self, kind: LossKind = LossKind.CROSS_ENTROPY, margin_scale: float = 1.0,
                 function: Optional[InputLoss] = None):
        self.kind = kind
        self.margin_scale = margin_scale
        self.function = function

    @property
    def differentiable(self) -> bool:
        return self.function is not None or self.kind != LossKind.ZERO_ONE

    def values_and_input_grads(self, model: Optional[Model], Z: np.ndarray, Y: np.ndarray):
        if self.function is not None:
            return self.function(Z, Y)
        values, _, grad_z = loss_and_grad_batch(model, Z, Y, self.kind, self.margin_scale)
        return values, grad_z

    def values(self, model: Optional[Model], Z: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return self.values_and_input_grads(model, Z, Y)[0]

    def __repr__(self) -> str:
        target = "custom" if self.function is not None else self.kind.value
        return f"LossHandle({target}, margin_scale={self.margin_scale})"


def transport_cost(cost: CostKind, Z: np.ndarray, X: np.ndarray) -> np.ndarray:
    diff = Z - X
    if cost == CostKind.L2:
        return np.linalg.norm(diff, axis=-1)
    return np.sum(diff * diff, axis=-1)


def transport_cost_grad(cost: CostKind, Z: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Gradient in Z; the L2 cost uses 0 at Z = X."""
    diff = Z - X
    if cost == CostKind.L2_SQUARED:
        return 2.0 * diff
    norms = np.linalg.norm(diff, axis=-1, keepdims=True)
    safe = np.where(norms > 0, norms, 1.0)
    return np.where(norms > 0, diff / safe, 0.0)


def _step_size(cfg: InnerSolverConfig, step: int) -> float:
    if cfg.step_decay == StepDecay.DIVIDE_BY_STEP:
        return cfg.alpha / step
    return cfg.alpha


def _inner_objective(loss: LossHandle, model: Optional[Model], Z: np.ndarray, X: np.ndarray,
                     Y: np.ndarray, gamma: float, cost: CostKind) -> Tuple[np.ndarray, np.ndarray]:
    values, grad_z = loss.values_and_input_grads(model, Z, Y)
    return values - gamma * transport_cost(cost, Z, X), np.array(grad_z, dtype=float)


def adversarial_perturb_batch(model: Optional[Model], X: np.ndarray, Y: np.ndarray, gamma: float,
                              cost: CostKind, cfg: InnerSolverConfig,
                              loss: Optional[LossHandle] = None, return_trace: bool = False):
    """Gradient ascent on z -> loss(z, y) - gamma * c(z, x), one trajectory per row.

    Each step starts at alpha / t (t = 1..steps under ``divide_by_step``) and
    is halved per row until the objective rises by at least half of the
    first-order prediction. Rows where no halving succeeds are stationary
    and stop moving. Accepted steps never lower the objective, so the
    returned point is the best iterate and never ends below z = x.
    """
    loss = loss or LossHandle()
    if not loss.differentiable:
        raise ValueError("gradient ascent needs a differentiable loss; use grid_oracle for zero-one")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y)
    caps = cfg.radius_cap
    if caps is None:
        caps = 100.0 * np.maximum(np.linalg.norm(X, axis=1), 1.0)
    else:
        caps = np.full(X.shape[0], float(caps))

    Z = X.copy()
    objective, grad_z = _inner_objective(loss, model, Z, X, Y, gamma, cost)
    moving = np.ones(X.shape[0], dtype=bool)
    trace = [objective.copy()]

    for step in range(1, cfg.steps + 1):
        ascent = grad_z - gamma * transport_cost_grad(cost, Z, X)
        if not np.all(np.isfinite(ascent)):
            raise NumericError("non-finite gradient in adversarial ascent", step=step)
        rows = np.flatnonzero(moving & np.any(ascent != 0.0, axis=1))
        eta = _step_size(cfg, step)
        for _ in range(MAX_HALVINGS + 1):
            if rows.size == 0:
                break
            trial = Z[rows] + eta * ascent[rows]
            trial_objective, trial_grad = _inner_objective(loss, model, trial, X[rows], Y[rows], gamma, cost)
            predicted = eta * np.sum(ascent[rows] * ascent[rows], axis=1)
            gain = trial_objective - objective[rows]
            accepted = np.isfinite(trial_objective) & (gain >= SUFFICIENT_INCREASE * predicted)
            taken = rows[accepted]
            Z[taken] = trial[accepted]
            objective[taken] = trial_objective[accepted]
            grad_z[taken] = trial_grad[accepted]
            rows = rows[~accepted]
            eta *= 0.5
        if rows.size:
            logger.debug(f"{rows.size} rows stationary at step {step}")
        moving[rows] = False

        radius = np.linalg.norm(Z - X, axis=1)
        if np.any(radius > caps):
            worst = int(np.argmax(radius - caps))
            raise InnerSolverDivergenceError(
                "adversarial ascent kept increasing the objective past the radius cap; "
                "the inner problem is unbounded for this gamma",
                step=step, radius=float(radius[worst]), cap=float(caps[worst]),
            )
        trace.append(objective.copy())

    if return_trace:
        return Z, np.vstack(trace)
    return Z


def adversarial_perturb(model: Optional[Model], x: np.ndarray, y_target: int, gamma: float,
                        cost: CostKind, cfg: InnerSolverConfig,
                        loss: Optional[LossHandle] = None, return_trace: bool = False):
    """Single-sample form of :func:`adversarial_perturb_batch`."""
    x = np.asarray(x, dtype=float)
    result = adversarial_perturb_batch(
        model, x[None, :], np.array([y_target]), gamma, cost, cfg, loss=loss, return_trace=return_trace
    )
    if return_trace:
        z, trace = result
        return z[0], trace[:, 0]
    return result[0]


def grid_oracle(loss: LossHandle, theta: Union[LinearModel, np.ndarray], x: np.ndarray, y: int,
                gamma: float, cost: CostKind, grid_range: float,
                grid_step: float) -> Tuple[float, np.ndarray]:
    """Exhaustive max of loss(z, y) - gamma * c(z, x) over z = x + t * theta_hat.

    For linear models the loss depends on z only through <theta, z>, so the
    supremum lies on this line. Ties go to the first grid point.
    """
    model = theta if isinstance(theta, LinearModel) else LinearModel(w=theta, normalize=False)
    norm = float(np.linalg.norm(model.w))
    if norm == 0.0:
        raise ValueError("theta must be nonzero")
    direction = model.w / norm
    count = int(np.floor(grid_range / grid_step))
    ts = grid_step * np.arange(-count, count + 1)
    x = np.asarray(x, dtype=float)
    Z = x[None, :] + ts[:, None] * direction[None, :]
    distance = np.abs(ts)
    penalty = distance if cost == CostKind.L2 else distance ** 2
    objective = loss.values(model, Z, np.full(ts.shape[0], y)) - gamma * penalty
    best = int(np.argmax(objective))
    return float(objective[best]), Z[best]
