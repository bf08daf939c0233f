"""Samplers for the two-component Gaussian mixtures and their analytic risks.

Every sampler takes an integer seed and builds its own generator, so calls
are independent and safe to run concurrently.
"""
import logging
from typing import Optional, Sequence

import numpy as np
from scipy.stats import norm, ortho_group

from errors import InvalidSpecError, NonUnitThetaError
from schemas import GmmSpec, LabeledSet, UnlabeledSet

logger = logging.getLogger(__name__)


def _noise_factor(covariance: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(covariance)
    except np.linalg.LinAlgError as e:
        raise InvalidSpecError(f"covariance is not positive definite: {e}") from e


def _gaussian_noise(spec: GmmSpec, rows: int, rng: np.random.Generator, labeled: bool) -> np.ndarray:
    white = rng.standard_normal((rows, spec.d))
    if spec.is_isotropic:
        return (spec.sigma0 if labeled else spec.sigma1) * white
    factor = _noise_factor(spec.covariance0 if labeled else spec.covariance1)
    return white @ factor.T


def _random_signs(rng: np.random.Generator, count: int) -> np.ndarray:
    return rng.choice(np.array([-1, 1]), size=count)


def sample_labeled(spec: GmmSpec, m: int, rng_seed: int) -> LabeledSet:
    """y uniform on {-1, +1}, X ~ N(y * mu0, Sigma0)."""
    if m < 1:
        raise ValueError("m must be at least 1")
    rng = np.random.default_rng(rng_seed)
    labels = _random_signs(rng, m)
    features = labels[:, None] * spec.mean0[None, :] + _gaussian_noise(spec, m, rng, labeled=True)
    return LabeledSet(features=features, labels=labels)


def sample_test_set(spec: GmmSpec, size: int, rng_seed: int) -> LabeledSet:
    """Exactly balanced labeled sample (size // 2 per class, remainder positive), shuffled."""
    if size < 2:
        raise ValueError("a balanced test set needs at least 2 rows")
    rng = np.random.default_rng(rng_seed)
    positives = size - size // 2
    labels = np.concatenate([np.ones(positives, dtype=int), -np.ones(size // 2, dtype=int)])
    labels = labels[rng.permutation(size)]
    features = labels[:, None] * spec.mean0[None, :] + _gaussian_noise(spec, size, rng, labeled=True)
    return LabeledSet(features=features, labels=labels)


def sample_unlabeled(spec: GmmSpec, n: int, rng_seed: int) -> UnlabeledSet:
    """Rows from 1/2 N(mu1, Sigma1) + 1/2 N(-mu1, Sigma1)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(rng_seed)
    components = _random_signs(rng, n)
    features = components[:, None] * spec.mean1[None, :] + _gaussian_noise(spec, n, rng, labeled=False)
    return UnlabeledSet(features=features)


def random_unit_vector(d: int, rng: np.random.Generator) -> np.ndarray:
    vector = rng.standard_normal(d)
    return vector / np.linalg.norm(vector)


def make_shifted_spec(base: GmmSpec, alpha: float, direction_seed: int) -> GmmSpec:
    """mu1 = mu0 + alpha * v for a uniformly random unit v; covariances unchanged."""
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    direction = random_unit_vector(base.d, np.random.default_rng(direction_seed))
    mu1 = base.mean0 + alpha * direction
    return GmmSpec(
        d=base.d,
        mu0=list(base.mu0),
        mu1=mu1.tolist(),
        sigma0=base.sigma0,
        sigma1=base.sigma0,
        cov0=base.cov0,
        cov1=base.cov0,
        alpha=alpha,
    )


def isotropic_spec(d: int, mean_norm: float = 1.0, sigma: float = 1.0, seed: int = 0) -> GmmSpec:
    """Unshifted isotropic spec with a random mean of the given norm."""
    mu0 = mean_norm * random_unit_vector(d, np.random.default_rng(seed))
    return GmmSpec(d=d, mu0=mu0.tolist(), mu1=mu0.tolist(), sigma0=sigma, sigma1=sigma, alpha=0.0)


def general_spec(mu0: Sequence[float], eigenvalues: Sequence[float], seed: int = 0,
                 alpha: float = 0.0, mu1: Optional[Sequence[float]] = None) -> GmmSpec:
    """Covariance Q diag(eigenvalues) Q' with a seeded random orthogonal Q (shared by P0 and P1)."""
    values = np.asarray(eigenvalues, dtype=float)
    d = values.shape[0]
    if np.any(values <= 0):
        raise InvalidSpecError("eigenvalues must be positive")
    basis = np.eye(1) if d == 1 else ortho_group.rvs(dim=d, random_state=seed)
    covariance = basis @ np.diag(values) @ basis.T
    covariance = 0.5 * (covariance + covariance.T)
    mu0 = [float(v) for v in mu0]
    mu1 = mu0 if mu1 is None else [float(v) for v in mu1]
    return GmmSpec(d=d, mu0=mu0, mu1=mu1, cov0=covariance.tolist(), cov1=covariance.tolist(), alpha=alpha)


def analytic_risk(theta: np.ndarray, spec: GmmSpec) -> float:
    """Zero-one risk of sign(<theta, .>) under P0: Q(<theta, mu0> / sqrt(theta' Sigma0 theta))."""
    theta = np.asarray(theta, dtype=float)
    length = float(np.linalg.norm(theta))
    if length == 0.0:
        raise NonUnitThetaError("theta must be nonzero")
    if abs(length - 1.0) > 1e-9:
        raise NonUnitThetaError("analytic risk expects a unit theta", norm=length)
    spread = float(np.sqrt(theta @ spec.covariance0 @ theta))
    return float(norm.sf(float(theta @ spec.mean0) / spread))


def optimal_theta(spec: GmmSpec) -> np.ndarray:
    """Bayes direction: mu0 (isotropic) or Sigma0^{-1} mu0 (general), normalized."""
    if spec.is_isotropic:
        direction = spec.mean0
    else:
        direction = np.linalg.solve(spec.covariance0, spec.mean0)
    length = np.linalg.norm(direction)
    if length == 0.0:
        raise InvalidSpecError("mu0 = 0 has no optimal direction")
    return direction / length


def empirical_risk(theta: np.ndarray, labeled: LabeledSet) -> float:
    """Fraction of rows with y <theta, x> <= 0."""
    margins = labeled.labels * (labeled.features @ np.asarray(theta, dtype=float))
    return float(np.mean(margins <= 0))
