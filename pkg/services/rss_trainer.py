"""RSS training: labeled robust risk plus a lambda-weighted self-labeled robust penalty.

The loop pairs labeled and unlabeled mini-batches (cycling the shorter
stream). For each pair it freezes hard self-labels for the unlabeled batch,
evaluates both robust terms, and takes one optimizer step on
``labeled + lambda * unlabeled``. On the numeric path the parameter gradient
is the loss gradient at the fixed perturbed points (envelope theorem).
"""
import logging
import math
import time
from typing import List, Optional, Tuple

import numpy as np

from errors import NumericError, TrainingDivergenceError
from models import LinearModel, Model, accuracy, build_model, loss_and_grad_batch, margin_gradient, predict_labels
from schemas import (
    LabeledSet,
    LossKind,
    Method,
    RobustConfig,
    Surrogate,
    TrainConfig,
    TrainReport,
    UnlabeledSet,
    OptimizerKind,
)
from services.inner_solver import LossHandle
from services.robust_losses import labeled_surrogate, phi_numeric_batch, unlabeled_surrogate

logger = logging.getLogger(__name__)


def _uses_closed_form(model: Model, cfg: RobustConfig) -> bool:
    return isinstance(model, LinearModel) and cfg.surrogate == Surrogate.CLOSED_FORM


def _loss_handle(cfg: RobustConfig) -> LossHandle:
    return LossHandle(kind=cfg.loss_kind, margin_scale=cfg.margin_scale)


def _labeled_term(model: Model, X: np.ndarray, Y: np.ndarray, cfg: RobustConfig) -> Tuple[float, np.ndarray]:
    if _uses_closed_form(model, cfg):
        values, dmargin = labeled_surrogate(model.margins(X), Y, cfg.gamma, cfg.labeled_cost)
        return float(values.mean()), margin_gradient(model, X, dmargin)
    handle = _loss_handle(cfg)
    values, Z = phi_numeric_batch(handle, model, X, Y, cfg.gamma, cfg.labeled_cost, cfg.inner)
    _, grad, _ = loss_and_grad_batch(model, Z, Y, handle.kind, handle.margin_scale)
    return float(values.mean()), grad


def _unlabeled_term(model: Model, X: np.ndarray, cfg: RobustConfig) -> Tuple[float, np.ndarray]:
    if X.shape[0] == 0:
        return 0.0, np.zeros(model.n_params)
    if _uses_closed_form(model, cfg):
        values, dmargin = unlabeled_surrogate(model.margins(X), cfg.gamma_prime, cfg.unlabeled_cost)
        return float(values.mean()), margin_gradient(model, X, dmargin)
    pseudo = predict_labels(model, X)
    handle = _loss_handle(cfg)
    values, Z = phi_numeric_batch(handle, model, X, pseudo, cfg.gamma_prime, cfg.unlabeled_cost, cfg.inner)
    _, grad, _ = loss_and_grad_batch(model, Z, pseudo, handle.kind, handle.margin_scale)
    return float(values.mean()), grad


def rss_objective(model: Model, labeled: LabeledSet, unlabeled: UnlabeledSet,
                  cfg: RobustConfig) -> Tuple[float, float, float]:
    """(total, labeled term, unlabeled term); self-labels come from ``model``."""
    if labeled.m == 0:
        raise ValueError("labeled set must not be empty")
    if unlabeled.n == 0 and cfg.lam > 0:
        raise ValueError("an empty unlabeled set requires lambda = 0")
    if unlabeled.n and unlabeled.d != labeled.d:
        raise ValueError("labeled and unlabeled widths differ")
    labeled_value, _ = _labeled_term(model, labeled.features, labeled.labels, cfg)
    unlabeled_value, _ = _unlabeled_term(model, unlabeled.features, cfg)
    return labeled_value + cfg.lam * unlabeled_value, labeled_value, unlabeled_value


def constrained_view_check(model: Model, unlabeled: UnlabeledSet, gamma_prime: float, s: float,
                           cfg: Optional[RobustConfig] = None) -> bool:
    """True iff the mean self-labeled robust loss is at most ``s``."""
    if s < 0:
        raise ValueError("s must be nonnegative")
    robust = (cfg or RobustConfig()).model_copy(update={"gamma_prime": gamma_prime})
    value, _ = _unlabeled_term(model, unlabeled.features, robust)
    return value <= s


class _Optimizer:
    """Plain SGD or bias-corrected Adam; weight decay is added to the gradient."""

    def __init__(self, cfg: TrainConfig, size: int):
        self.kind = cfg.optimizer
        self.learning_rate = cfg.learning_rate
        self.weight_decay = cfg.weight_decay
        self.first = np.zeros(size)
        self.second = np.zeros(size)
        self.count = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        grad = grad + self.weight_decay * params
        if self.kind == OptimizerKind.SGD:
            return params - self.learning_rate * grad
        self.count += 1
        self.first = 0.9 * self.first + 0.1 * grad
        self.second = 0.999 * self.second + 0.001 * grad * grad
        first_hat = self.first / (1 - 0.9 ** self.count)
        second_hat = self.second / (1 - 0.999 ** self.count)
        return params - self.learning_rate * first_hat / (np.sqrt(second_hat) + 1e-8)


def _batches(order: np.ndarray, size: int) -> List[np.ndarray]:
    return [order[start: start + size] for start in range(0, order.shape[0], size)]


def _streams(seed: int):
    init_seq, labeled_seq, unlabeled_seq = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init_seq), np.random.default_rng(labeled_seq),
            np.random.default_rng(unlabeled_seq))


def _fit(labeled: LabeledSet, unlabeled: UnlabeledSet, cfg: TrainConfig, lam: float,
         plain_loss: Optional[LossKind], init_model: Optional[Model],
         test: Optional[LabeledSet], method: Method) -> TrainReport:
    if labeled.m == 0:
        raise ValueError("labeled set must not be empty")
    started = time.perf_counter()
    init_rng, labeled_rng, unlabeled_rng = _streams(cfg.seed)
    model = init_model if init_model is not None else build_model(cfg, labeled.d, init_rng)
    project = isinstance(model, LinearModel) and cfg.projects_to_sphere
    if project:
        model = model.model_copy(update={"normalize": True}).projected()
    robust = cfg.robust.model_copy(update={"lam": lam})
    params = model.flat()
    optimizer = _Optimizer(cfg, params.shape[0])

    use_unlabeled = lam > 0 and unlabeled.n > 0
    labeled_size = math.ceil(labeled.m / cfg.batch_fraction)
    unlabeled_size = math.ceil(unlabeled.n / cfg.batch_fraction) if use_unlabeled else 0

    labeled_trace, unlabeled_trace, total_trace = [], [], []
    for epoch in range(1, cfg.epochs + 1):
        labeled_batches = _batches(labeled_rng.permutation(labeled.m), labeled_size)
        unlabeled_batches = (
            _batches(unlabeled_rng.permutation(unlabeled.n), unlabeled_size) if use_unlabeled else []
        )
        steps = max(len(labeled_batches), len(unlabeled_batches))
        labeled_sum = unlabeled_sum = 0.0
        labeled_rows = unlabeled_rows = 0
        for batch in range(steps):
            rows = labeled_batches[batch % len(labeled_batches)]
            X, Y = labeled.features[rows], labeled.labels[rows]
            unlabeled_batch = unlabeled_batches[batch % len(unlabeled_batches)] if use_unlabeled else None
            try:
                if plain_loss is not None:
                    values, labeled_grad, _ = loss_and_grad_batch(model, X, Y, plain_loss, robust.margin_scale)
                    labeled_value = float(values.mean())
                else:
                    labeled_value, labeled_grad = _labeled_term(model, X, Y, robust)
                grad = labeled_grad
                unlabeled_value = 0.0
                if unlabeled_batch is not None:
                    unlabeled_value, unlabeled_grad = _unlabeled_term(model, unlabeled.features[unlabeled_batch],
                                                                      robust)
                    grad = grad + lam * unlabeled_grad
            except NumericError as e:
                logger.error(f"{method.value} training diverged at epoch {epoch}, batch {batch + 1}: {e}")
                raise TrainingDivergenceError(f"training objective is not finite: {e.detail}",
                                              epoch=epoch, batch=batch + 1) from e
            total = labeled_value + lam * unlabeled_value
            if not (math.isfinite(total) and np.all(np.isfinite(grad))):
                logger.error(f"{method.value} training diverged at epoch {epoch}, batch {batch + 1}")
                raise TrainingDivergenceError("training objective is not finite", epoch=epoch, batch=batch + 1)
            labeled_sum += labeled_value * rows.shape[0]
            if unlabeled_batch is not None:
                unlabeled_sum += unlabeled_value * unlabeled_batch.shape[0]
                unlabeled_rows += unlabeled_batch.shape[0]
            labeled_rows += rows.shape[0]

            params = optimizer.step(params, grad)
            model = model.with_flat(params)
            if project:
                model = model.projected()
                params = model.flat()

        labeled_mean = labeled_sum / labeled_rows
        unlabeled_mean = unlabeled_sum / unlabeled_rows if unlabeled_rows else 0.0
        labeled_trace.append(labeled_mean)
        unlabeled_trace.append(unlabeled_mean)
        total_trace.append(labeled_mean + lam * unlabeled_mean)
        logger.debug(f"{method.value} epoch {epoch}: labeled={labeled_mean:.6f} "
                     f"unlabeled={unlabeled_mean:.6f} total={total_trace[-1]:.6f}")

    return TrainReport(
        method=method,
        model=model,
        labeled_objective=labeled_trace,
        unlabeled_objective=unlabeled_trace,
        total_objective=total_trace,
        wall_clock_seconds=time.perf_counter() - started,
        train_accuracy=accuracy(model, labeled.features, labeled.labels),
        test_accuracy=accuracy(model, test.features, test.labels) if test is not None else None,
        config=cfg.model_dump(mode="json", by_alias=True),
    )


def train_erm(labeled: LabeledSet, cfg: TrainConfig, test: Optional[LabeledSet] = None,
              init_model: Optional[Model] = None) -> TrainReport:
    """Plain-loss ERM on the labeled set (``cfg.erm_loss``, no perturbation, lambda = 0)."""
    logger.debug(f"Training ERM on m={labeled.m}")
    return _fit(labeled, UnlabeledSet.empty(labeled.d), cfg, 0.0, cfg.erm_loss, init_model, test, Method.ERM)


def train_rss(labeled: LabeledSet, unlabeled: UnlabeledSet, cfg: TrainConfig,
              test: Optional[LabeledSet] = None, init_model: Optional[Model] = None) -> TrainReport:
    """Minimize the RSS objective.

    With ``cfg.warm_start`` and no ``init_model`` the run starts from the
    ERM solution on the labeled set.
    """
    if unlabeled.n and unlabeled.d != labeled.d:
        raise ValueError("labeled and unlabeled widths differ")
    if unlabeled.n == 0 and cfg.robust.lam > 0:
        raise ValueError("an empty unlabeled set requires lambda = 0")
    if init_model is None and cfg.warm_start:
        init_model = train_erm(labeled, cfg).model
    logger.debug(f"Training RSS on m={labeled.m}, n={unlabeled.n}, lambda={cfg.robust.lam}")
    return _fit(labeled, unlabeled, cfg, cfg.robust.lam, None, init_model, test, Method.RSS)


def robust_erm(labeled: LabeledSet, cfg: TrainConfig, test: Optional[LabeledSet] = None,
               init_model: Optional[Model] = None) -> TrainReport:
    """Labeled-only robust ERM: the RSS objective with lambda = 0."""
    if init_model is None and cfg.warm_start:
        init_model = train_erm(labeled, cfg).model
    return _fit(labeled, UnlabeledSet.empty(labeled.d), cfg, 0.0, None, init_model, test, Method.ROBUST_ERM)


def evaluate_accuracy(model: Model, labeled: LabeledSet) -> float:
    return accuracy(model, labeled.features, labeled.labels)
