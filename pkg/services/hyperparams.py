"""Prescribed hyperparameters and the random-search harness.

Every O(.) in the prescriptions is instantiated with constant 1. Plug-in
estimates come from a held-out half of the unlabeled data, never from the
half the model trains on.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List, NamedTuple, Optional

import numpy as np

from errors import DegenerateSpectrumError, SearchError
from schemas import (
    CostKind,
    GeneralPrescription,
    IsotropicPrescription,
    SearchResult,
    SearchSpace,
    SpectralEstimate,
    TrainConfig,
    TrialRecord,
    UnlabeledSet,
)
from services.bounds import covariance_constants, exp_or_inf
from services.robust_losses import unlabeled_surrogate

logger = logging.getLogger(__name__)

HELDOUT_PREFIX = "heldout"
POWER_TOLERANCE = 1e-8

LAMBDA_NOTE = (
    "lambda has no closed-form prescription; it is chosen by random search and "
    "(gamma_prime, s) is its constrained-form surrogate"
)


class UnlabeledSplit(NamedTuple):
    train: UnlabeledSet
    heldout: UnlabeledSet
    split_id: str


def split_unlabeled(unlabeled: UnlabeledSet, seed: int) -> UnlabeledSplit:
    """Seeded half split: (training part, held-out part for plug-in estimates, held-out id)."""
    if unlabeled.n < 2:
        raise ValueError("need at least 2 unlabeled rows to split")
    order = np.random.default_rng(seed).permutation(unlabeled.n)
    half = unlabeled.n // 2
    heldout = UnlabeledSet(features=unlabeled.features[order[:half]])
    train = UnlabeledSet(features=unlabeled.features[order[half:]])
    return UnlabeledSplit(train=train, heldout=heldout, split_id=f"{HELDOUT_PREFIX}-seed{seed}-n{unlabeled.n}")


def estimate_spectrum(unlabeled: UnlabeledSet, iterations: int = 1000, seed: int = 0,
                      split_id: str = "full") -> SpectralEstimate:
    """Power iteration on the uncentered second moment (1/n) sum x x'.

    Stops when the Rayleigh quotient changes by less than 1e-8 relative or
    after ``iterations`` rounds. The trace is exact.
    """
    if unlabeled.n < 2:
        raise ValueError("spectrum estimation needs n >= 2")
    X = unlabeled.features
    n = unlabeled.n
    trace = float(np.sum(X * X)) / n
    if trace == 0.0:
        raise DegenerateSpectrumError("all unlabeled rows are zero")

    vector = np.random.default_rng(seed).standard_normal(unlabeled.d)
    vector /= np.linalg.norm(vector)
    eigenvalue = 0.0
    used = 0
    for used in range(1, iterations + 1):
        image = X.T @ (X @ vector) / n
        length = float(np.linalg.norm(image))
        if length == 0.0:
            raise DegenerateSpectrumError("power iteration collapsed to the null space")
        updated = float(vector @ image)
        vector = image / length
        if abs(updated - eigenvalue) <= POWER_TOLERANCE * abs(updated):
            eigenvalue = updated
            break
        eigenvalue = updated
    eigenvalue = min(float(vector @ (X.T @ (X @ vector))) / n, trace)
    logger.debug(f"Power iteration converged to {eigenvalue:.6f} after {used} rounds (split {split_id})")
    return SpectralEstimate(
        lambda_max_hat=eigenvalue,
        trace_hat=trace,
        n_used=n,
        split_id=split_id,
        iterations_used=used,
        top_vector=vector.tolist(),
    )


def prescribe_isotropic(estimate: SpectralEstimate, m: int, n: int, d: int, delta: float,
                        sigma0_hat: float, alpha: float = 0.0) -> IsotropicPrescription:
    """gamma' = 1/(lambda log n + d/n), s = 1 - gamma'(lambda (1 - alpha) - 3 sqrt(d/n)),
    and gamma from the non-robust bound for the isotropic mixture."""
    if n < 2:
        raise ValueError("n must be at least 2")
    if min(m, d, sigma0_hat, estimate.lambda_max_hat) <= 0 or not 0 < delta < 1:
        raise ValueError("m, d, sigma0_hat, lambda_max must be positive and delta in (0, 1)")
    lam = estimate.lambda_max_hat
    gamma_prime = 1.0 / (lam * math.log(n) + d / n)
    s = 1.0 - gamma_prime * (lam * (1.0 - alpha) - 3.0 * math.sqrt(d / n))

    log_term = math.log(1.0 / delta)
    prefactor = math.exp(-lam / (4.0 * sigma0_hat ** 2)) / math.sqrt(2.0 * sigma0_hat * math.sqrt(2.0 * math.pi))
    rate = math.sqrt((2.0 * d / m) * (alpha * lam + math.sqrt((2.0 * d + 2.0 * log_term) / (2.0 * n + m))))
    rate += math.sqrt(2.0 * log_term / m)
    gamma = prefactor * rate ** -0.25

    feasible = 0.0 <= s <= 1.0
    if not feasible:
        logger.warning(f"Prescribed s={s:.6f} lies outside [0, 1]; fall back to random search")
    return IsotropicPrescription(gamma=gamma, gamma_prime=gamma_prime, s=s, feasible=feasible,
                                 lambda_note=LAMBDA_NOTE)


def estimate_general_constants(heldout: UnlabeledSet, estimate: SpectralEstimate):
    """Plug-in (mu1_hat, Sigma1_hat) from the held-out split.

    Rows are self-labeled by the sign of their projection on the top
    eigenvector; mu1_hat is the mean of sign * x and Sigma1_hat the second
    moment minus mu1_hat mu1_hat'.
    """
    if estimate.top_vector is None:
        raise ValueError("estimate carries no eigenvector")
    X = heldout.features
    signs = np.where(X @ np.asarray(estimate.top_vector) >= 0, 1.0, -1.0)
    mu1_hat = (signs[:, None] * X).mean(axis=0)
    second_moment = X.T @ X / X.shape[0]
    cov1_hat = second_moment - np.outer(mu1_hat, mu1_hat)
    return mu1_hat, 0.5 * (cov1_hat + cov1_hat.T)


def general_gamma_prime(lambda_max: float, beta: float = 1.0) -> float:
    return 2.0 * math.exp(-(beta / 2.0) * math.sqrt(lambda_max))


def isotropic_scale_hat(estimate: SpectralEstimate, d: int) -> float:
    """sigma0_hat from the spectrum tail: (trace - lambda_max) / (d - 1) estimates sigma^2."""
    if d < 2:
        raise ValueError("the scale estimate needs d >= 2")
    tail = (estimate.trace_hat - estimate.lambda_max_hat) / (d - 1)
    if tail <= 0:
        raise DegenerateSpectrumError("second moment has no mass outside its top direction", d=d)
    return math.sqrt(tail)


def prescribe_general(estimate: SpectralEstimate, inf_empirical_term: float, alpha: float, beta: float,
                      n: int, d: int, delta: float, m: int, mu1_hat: np.ndarray,
                      cov1_hat: np.ndarray) -> GeneralPrescription:
    """gamma', s, and gamma for the general-covariance mixture from held-out plug-ins."""
    if not estimate.split_id.startswith(HELDOUT_PREFIX):
        raise ValueError("plug-in estimates must come from the held-out split")
    if not 0 < delta < 1 or n < 1 or m < 1:
        raise ValueError("delta must lie in (0, 1) and counts be positive")
    constants = covariance_constants(np.asarray(cov1_hat, dtype=float))
    lam = estimate.lambda_max_hat
    log_term = math.log(1.0 / delta)

    gamma_prime = general_gamma_prime(lam, beta)
    s = (inf_empirical_term + 12.0 * gamma_prime * estimate.trace_hat / math.sqrt(n)
         + 2.0 * math.sqrt(log_term / n) + 16.0 * math.sqrt(d / n) + alpha)

    mu1_hat = np.asarray(mu1_hat, dtype=float)
    quad = float(mu1_hat @ np.linalg.solve(cov1_hat, mu1_hat))
    conditioning = d * constants["kappa1"] * constants["kappa1_prime"] / constants["gap"]
    bracket = (18.0 * gamma_prime ** 2 * (float(np.trace(cov1_hat)) + float(mu1_hat @ mu1_hat))
               + 5.0 * gamma_prime * math.sqrt(log_term) + 24.0 * math.sqrt(d)
               + 4.0 * alpha * math.sqrt(n * gamma_prime))
    log_t_prime = 0.5 * (math.log(conditioning) + quad / 2.0 + math.log(bracket) - math.log(2.0 * math.sqrt(n)))
    t_prime = exp_or_inf(log_t_prime)
    gamma = exp_or_inf(0.5 * (0.5 * math.log(m) - math.log(2.0) - log_t_prime - math.log(lam)))

    feasible = 0.0 <= s <= 1.0 and math.isfinite(t_prime)
    if not math.isfinite(t_prime):
        logger.warning(f"t' overflows (mu1' Sigma1^-1 mu1 = {quad:.3f}); fall back to random search")
    elif not feasible:
        logger.warning(f"Prescribed s={s:.6f} lies outside [0, 1]; fall back to random search")
    return GeneralPrescription(gamma_prime=gamma_prime, s=s, gamma=gamma, t_prime=t_prime, feasible=feasible)


def unlabeled_infimum(heldout: UnlabeledSet, gamma_prime: float, estimate: Optional[SpectralEstimate] = None,
                      cost: CostKind = CostKind.L2_SQUARED, steps: int = 500,
                      learning_rate: float = 0.1, seed: int = 0) -> float:
    """Approximate inf over unit theta of the mean self-labeled robust loss.

    Projected gradient descent on the unlabeled term alone, started from the
    top eigenvector when available.
    """
    X = heldout.features
    if estimate is not None and estimate.top_vector is not None:
        theta = np.asarray(estimate.top_vector, dtype=float)
    else:
        theta = np.random.default_rng(seed).standard_normal(heldout.d)
    theta = theta / np.linalg.norm(theta)
    best = float("inf")
    for _ in range(steps):
        values, dmargin = unlabeled_surrogate(X @ theta, gamma_prime, cost)
        best = min(best, float(values.mean()))
        theta = theta - learning_rate * (dmargin @ X) / X.shape[0]
        theta = theta / np.linalg.norm(theta)
    values, _ = unlabeled_surrogate(X @ theta, gamma_prime, cost)
    return min(best, float(values.mean()))


def sample_exponents(space: SearchSpace, trials: int, seed: int) -> List[Dict[str, int]]:
    rng = np.random.default_rng(seed)
    return [
        {name: int(rng.integers(low, high + 1)) for name, (low, high) in space.exponents.items()}
        for _ in range(trials)
    ]


def _evaluate(index: int, exponents: Dict[str, int],
              objective: Callable[[Dict[str, float]], float]) -> TrialRecord:
    hyper = {name: 10.0 ** exponent for name, exponent in exponents.items()}
    try:
        score = float(objective(hyper))
        if not math.isfinite(score):
            raise ValueError(f"non-finite validation score {score}")
        return TrialRecord(index=index, exponents=exponents, hyperparameters=hyper, score=score)
    except Exception as e:
        logger.warning(f"Search trial {index} failed: {e}")
        return TrialRecord(index=index, exponents=exponents, hyperparameters=hyper, status=f"failed: {e}")


def random_search(space: SearchSpace, trials: int, objective: Callable[[Dict[str, float]], float],
                  seed: int, max_workers: int = 1) -> SearchResult:
    """Evaluate ``trials`` configurations drawn from the integer exponent grids.

    Configurations are drawn up front, so the result does not depend on
    ``max_workers``. The best score wins; ties go to the earliest trial.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    draws = sample_exponents(space, trials, seed)
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            records = list(pool.map(lambda item: _evaluate(item[0], item[1], objective), enumerate(draws)))
    else:
        records = [_evaluate(index, exponents, objective) for index, exponents in enumerate(draws)]

    best: Optional[TrialRecord] = None
    for record in records:
        if record.score is not None and (best is None or record.score > best.score):
            best = record
    if best is None:
        raise SearchError("every search trial failed", trials=trials)
    logger.info(f"Random search best trial {best.index} with validation score {best.score:.4f}")
    return SearchResult(
        best_index=best.index,
        best_hyperparameters=best.hyperparameters,
        best_exponents=best.exponents,
        best_score=best.score,
        trials=records,
    )


def apply_hyperparameters(base: TrainConfig, hyper: Dict[str, float]) -> TrainConfig:
    """TrainConfig with the searched values (learning rate, weight decay, lambda, alpha, gamma, gamma')."""
    data = base.model_dump()
    robust = data["robust"]
    if "learning_rate" in hyper:
        data["learning_rate"] = hyper["learning_rate"]
    if "weight_decay" in hyper:
        data["weight_decay"] = hyper["weight_decay"]
    if "lambda" in hyper:
        robust["lam"] = hyper["lambda"]
    if "gamma" in hyper:
        robust["gamma"] = hyper["gamma"]
    if "gamma_prime" in hyper:
        robust["gamma_prime"] = hyper["gamma_prime"]
    if "alpha" in hyper:
        robust["inner"]["alpha"] = hyper["alpha"]
    data["inner"] = robust["inner"]
    return TrainConfig.model_validate(data)
