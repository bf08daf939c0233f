"""Generalization-bound residuals for the Gaussian-mixture setting.

Each O(.) is evaluated with constant 1, so only comparisons and monotone
trends are meaningful; every report carries that note.
"""
import logging
import math
import sys
from fractions import Fraction
from typing import Dict, Optional

import numpy as np

from errors import DegenerateGapError, InvalidSpecError
from schemas import BoundInputs, BoundReport, GmmSpec
from services.robust_losses import check_unit

logger = logging.getLogger(__name__)

EIGEN_GAP_TOL = 1e-8
LOG_FLOAT_MAX = math.log(sys.float_info.max)


def exp_or_inf(exponent: float) -> float:
    """exp(exponent), or inf once the result would overflow a float."""
    return math.exp(exponent) if exponent < LOG_FLOAT_MAX else math.inf


def _isotropic_scales(inp: BoundInputs):
    if inp.sigma0 is None or inp.sigma1 is None:
        raise InvalidSpecError("isotropic bounds need sigma0 and sigma1")
    return inp.sigma0, inp.sigma1


def thm1_residual(inp: BoundInputs) -> BoundReport:
    """Robust-loss residual for the isotropic mixture.

    gamma * sqrt((2d/m)(alpha(|mu0|^2 + sigma0^2) + sqrt(2d/(2n+m)) + sqrt(2L/(2n+m)))) + sqrt(2L/m),
    with L = log(1/delta).
    """
    sigma0, _ = _isotropic_scales(inp)
    log_term = math.log(1.0 / inp.delta)
    pooled = 2 * inp.n + inp.m
    alpha_term = inp.alpha * (float(inp.mean0 @ inp.mean0) + sigma0 ** 2)
    n_term = math.sqrt(2.0 * inp.d / pooled) + math.sqrt(2.0 * log_term / pooled)
    m_term = math.sqrt(2.0 * log_term / inp.m)
    main = inp.gamma * math.sqrt((2.0 * inp.d / inp.m) * (alpha_term + n_term))
    return BoundReport(
        theorem="thm1",
        residual=main + m_term,
        components={"alpha_term": alpha_term, "n_term": n_term, "m_term": m_term, "main": main},
    )


def thm2_residual(inp: BoundInputs) -> BoundReport:
    """Zero-one excess-risk residual for the isotropic mixture."""
    sigma0, sigma1 = _isotropic_scales(inp)
    log_term = math.log(1.0 / inp.delta)
    pooled = 2 * inp.n + inp.m
    mean0_sq = float(inp.mean0 @ inp.mean0)
    mean1_sq = float(inp.mean1 @ inp.mean1)
    prefactor = math.exp(-mean0_sq / (4.0 * sigma0 ** 2)) / math.sqrt(2.0 * sigma0 * math.sqrt(2.0 * math.pi))
    alpha_term = (mean1_sq + sigma1 ** 2) * 2.0 * inp.d * inp.alpha / inp.m
    n_term = (4.0 * inp.d / inp.m) * math.sqrt((2.0 * inp.d + 2.0 * log_term) / pooled)
    inner = alpha_term + n_term
    m_term = math.sqrt(2.0 * log_term / inp.m)
    return BoundReport(
        theorem="thm2",
        residual=prefactor * inner ** 0.25 + m_term,
        components={"prefactor": prefactor, "alpha_term": alpha_term, "n_term": n_term,
                    "inner": inner, "m_term": m_term},
    )


def corollary1_check(m: int, n: int, d: int, alpha: float) -> Dict[str, bool]:
    """advantage: alpha <= d/m and n >= m^2/d; dim_free: alpha <= 1/d and n >= d^3.

    alpha is read as the decimal it prints as and every threshold is compared
    in rational arithmetic.
    """
    if min(m, n, d) < 1 or alpha < 0:
        raise ValueError("m, n, d must be positive and alpha nonnegative")
    a = Fraction(repr(float(alpha)))
    advantage = a <= Fraction(d, m) and n >= Fraction(m * m, d)
    dim_free = a <= Fraction(1, d) and n >= d ** 3
    return {"advantage": bool(advantage), "dim_free": bool(dim_free)}


def covariance_constants(cov: np.ndarray, tol: float = EIGEN_GAP_TOL) -> Dict[str, float]:
    """lambda_min, lambda_max, the minimum gap between distinct eigenvalues, kappa1, kappa1'.

    Eigenvalues closer than ``tol * lambda_max`` count as equal.
    """
    values = np.linalg.eigvalsh(np.asarray(cov, dtype=float))
    smallest, largest = float(values[0]), float(values[-1])
    if smallest <= 0:
        raise InvalidSpecError("covariance is not positive definite", smallest=smallest)
    diffs = np.diff(values)
    distinct = diffs[diffs > tol * largest]
    if distinct.size == 0:
        raise DegenerateGapError("covariance has a single repeated eigenvalue; the eigen-gap is undefined",
                                 eigenvalue=largest)
    gap = float(distinct.min())
    return {
        "lambda_min": smallest,
        "lambda_max": largest,
        "gap": gap,
        "kappa1": largest / smallest,
        "kappa1_prime": largest / gap,
    }


def shift_constants(mu0: np.ndarray, cov0: np.ndarray, mu1: np.ndarray, cov1: np.ndarray) -> Dict[str, float]:
    """vartheta, C, kappa1, kappa1', the eigen-gap, lambda_min and lambda_max of Sigma1."""
    mu0 = np.asarray(mu0, dtype=float)
    mu1 = np.asarray(mu1, dtype=float)
    cov0 = np.asarray(cov0, dtype=float)
    cov1 = np.asarray(cov1, dtype=float)
    constants = covariance_constants(cov1)
    quad0 = float(mu0 @ np.linalg.solve(cov0, mu0))
    quad1 = float(mu1 @ np.linalg.solve(cov1, mu1))
    smallest = constants["lambda_min"]
    mean0_norm = float(np.linalg.norm(mu0))
    constants["vartheta"] = abs(quad1 - quad0)
    constants["C"] = (mean0_norm ** 2 + smallest * mean0_norm) / smallest ** 2
    return constants


def thm3_residual(inp: BoundInputs) -> BoundReport:
    """Residual for the general-covariance mixture.

    e^{vartheta^2} (sqrt((|mu1|^2 + Tr Sigma1)/m) (C alpha + sqrt(L/(2n+m))) d kappa1 kappa1' / gap)^{1/2}
    + sqrt(L/m).
    """
    cov0 = _covariance(inp.cov0, inp.sigma0, inp.d)
    cov1 = _covariance(inp.cov1, inp.sigma1, inp.d)
    constants = shift_constants(inp.mean0, cov0, inp.mean1, cov1)
    log_term = math.log(1.0 / inp.delta)
    spread = math.sqrt((float(inp.mean1 @ inp.mean1) + float(np.trace(cov1))) / inp.m)
    rate = constants["C"] * inp.alpha + math.sqrt(log_term / (2 * inp.n + inp.m))
    conditioning = inp.d * constants["kappa1"] * constants["kappa1_prime"] / constants["gap"]
    vartheta = constants["vartheta"]
    log_main = vartheta * vartheta + 0.5 * math.log(spread * rate * conditioning)
    amplification = exp_or_inf(vartheta * vartheta)
    m_term = math.sqrt(log_term / inp.m)
    main = exp_or_inf(log_main)
    if math.isinf(main):
        logger.warning(f"Residual overflows for vartheta={vartheta:.3f}; reporting inf")
    components = dict(constants)
    components.update({"spread": spread, "rate": rate, "conditioning": conditioning,
                       "amplification": amplification, "log_main": log_main, "m_term": m_term, "main": main})
    beta_holds = float(np.linalg.norm(inp.mean1)) >= inp.beta * constants["lambda_max"]
    if not beta_holds:
        logger.debug("Mean-norm condition |mu1| >= beta * lambda_max fails for these inputs")
    return BoundReport(theorem="thm3", residual=main + m_term, components=components,
                       flags={"mean_norm_condition": beta_holds})


def _covariance(cov: Optional[list], sigma: Optional[float], d: int) -> np.ndarray:
    if cov is not None:
        return np.asarray(cov, dtype=float)
    if sigma is None:
        raise InvalidSpecError("bound inputs need a covariance or a scale")
    return sigma ** 2 * np.eye(d)


def robust_gap_bound(theta: np.ndarray, gamma: float, spec: GmmSpec) -> float:
    """Upper bound on E[phi_gamma] - E[zero-one] under P0 for a unit theta.

    Isotropic: exp(-<theta, mu>^2 / 2 sigma^2) / (2 gamma sigma sqrt(2 pi)).
    General: exp(-<theta, mu0>^2 / 2 theta' Sigma0 theta) / (2 gamma).
    The inequality relies on <theta, mu0> <= 0; for aligned theta the exact
    gap (robust_gap_exact) can exceed it.
    """
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    theta = check_unit(theta)
    projection = float(theta @ spec.mean0)
    if spec.is_isotropic:
        sigma = spec.sigma0
        return math.exp(-projection ** 2 / (2.0 * sigma ** 2)) / (2.0 * gamma * sigma * math.sqrt(2.0 * math.pi))
    variance = float(theta @ spec.covariance0 @ theta)
    return math.exp(-projection ** 2 / (2.0 * variance)) / (2.0 * gamma)
