import math
import os
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from errors import InvalidSpecError

# Mean shift and variance shift are bounded by K * alpha with K fixed to 1.
SHIFT_CONSTANT = 1.0
_SHIFT_TOL = 1e-9


class CostKind(str, Enum):
    L2 = "l2"
    L2_SQUARED = "l2_squared"


class LossKind(str, Enum):
    HINGE01_SURROGATE = "hinge01_surrogate"
    CROSS_ENTROPY = "cross_entropy"
    SQUARED_MARGIN = "squared_margin"
    # zero-gradient a.e.; only the exact line search and the grid oracle accept it
    ZERO_ONE = "zero_one"


class StepDecay(str, Enum):
    CONSTANT = "constant"
    DIVIDE_BY_STEP = "divide_by_step"


class Surrogate(str, Enum):
    CLOSED_FORM = "closed_form"
    NUMERIC = "numeric"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    ADAM = "adam"


class ModelKind(str, Enum):
    LINEAR = "linear"
    MLP = "mlp"


class ScenarioMode(str, Enum):
    SIMULATED_ISO = "simulated-iso"
    SIMULATED_GENERAL = "simulated-general"
    EMBEDDINGS = "embeddings"


class Method(str, Enum):
    ERM = "ERM"
    ROBUST_ERM = "ROBUST_ERM"
    RSS = "RSS"


# ---------------------------------------------------------------------------
# Gaussian mixture specification and datasets
# ---------------------------------------------------------------------------

class GmmSpec(BaseModel):
    """Labeled distribution P0 and the shifted unlabeled marginal P1.

    P0: y uniform on {-1, +1}, X ~ N(y * mu0, Sigma0).
    P1: X ~ 1/2 N(mu1, Sigma1) + 1/2 N(-mu1, Sigma1).

    Isotropic mode sets ``sigma0``/``sigma1`` (Sigma = sigma^2 I), general
    mode sets ``cov0``/``cov1``.
    """
    model_config = ConfigDict(frozen=True)

    d: int = Field(ge=1)
    mu0: List[float]
    mu1: List[float]
    sigma0: Optional[float] = Field(default=None, gt=0)
    sigma1: Optional[float] = Field(default=None, gt=0)
    cov0: Optional[List[List[float]]] = None
    cov1: Optional[List[List[float]]] = None
    alpha: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def _check_consistency(self):
        if len(self.mu0) != self.d or len(self.mu1) != self.d:
            raise InvalidSpecError(f"means must have length d={self.d}", mu0=len(self.mu0), mu1=len(self.mu1))
        isotropic = self.sigma0 is not None or self.sigma1 is not None
        general = self.cov0 is not None or self.cov1 is not None
        if isotropic == general:
            raise InvalidSpecError("spec must set either sigma0/sigma1 (isotropic) or cov0/cov1 (general)")
        if isotropic and (self.sigma0 is None or self.sigma1 is None):
            raise InvalidSpecError("isotropic spec needs both sigma0 and sigma1")
        if general and (self.cov0 is None or self.cov1 is None):
            raise InvalidSpecError("general spec needs both cov0 and cov1")

        bound = SHIFT_CONSTANT * self.alpha + _SHIFT_TOL * (1.0 + self.alpha)
        mean_shift = float(np.linalg.norm(self.mean0 - self.mean1))
        if mean_shift > bound:
            raise InvalidSpecError(
                f"mean shift {mean_shift:.6g} exceeds K*alpha={SHIFT_CONSTANT * self.alpha:.6g}"
            )
        if isotropic:
            if abs(self.sigma0 - self.sigma1) > bound:
                raise InvalidSpecError("|sigma0 - sigma1| exceeds K*alpha")
        else:
            for name in ("cov0", "cov1"):
                matrix = np.asarray(getattr(self, name), dtype=float)
                if matrix.shape != (self.d, self.d):
                    raise InvalidSpecError(f"{name} must be {self.d}x{self.d}", shape=matrix.shape)
                if not np.allclose(matrix, matrix.T, atol=1e-12):
                    raise InvalidSpecError(f"{name} is not symmetric")
                smallest = float(np.linalg.eigvalsh(matrix)[0])
                if smallest <= 0:
                    raise InvalidSpecError(
                        f"{name} is not positive definite (smallest eigenvalue {smallest:.3g})"
                    )
            spectral_shift = float(np.linalg.norm(self.covariance0 - self.covariance1, ord=2))
            if spectral_shift > bound:
                raise InvalidSpecError("spectral norm of cov1 - cov0 exceeds K*alpha")
        return self

    @property
    def is_isotropic(self) -> bool:
        return self.sigma0 is not None

    @property
    def mean0(self) -> np.ndarray:
        return np.asarray(self.mu0, dtype=float)

    @property
    def mean1(self) -> np.ndarray:
        return np.asarray(self.mu1, dtype=float)

    @property
    def covariance0(self) -> np.ndarray:
        if self.is_isotropic:
            return self.sigma0 ** 2 * np.eye(self.d)
        return np.asarray(self.cov0, dtype=float)

    @property
    def covariance1(self) -> np.ndarray:
        if self.is_isotropic:
            return self.sigma1 ** 2 * np.eye(self.d)
        return np.asarray(self.cov1, dtype=float)


class LabeledSet(BaseModel):
    """Feature rows with +/-1 labels."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray
    labels: np.ndarray

    @field_validator("features", mode="before")
    @classmethod
    def _as_matrix(cls, value):
        matrix = np.asarray(value, dtype=float)
        if matrix.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("feature rows must be finite")
        return matrix

    @field_validator("labels", mode="before")
    @classmethod
    def _as_signs(cls, value):
        labels = np.asarray(value)
        if labels.ndim != 1:
            raise ValueError("labels must be a vector")
        if labels.size and not np.all(np.isin(labels, (-1, 1))):
            raise ValueError("labels must be -1 or +1")
        return labels.astype(np.int64)

    @model_validator(mode="after")
    def _check_rows(self):
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )
        return self

    @property
    def m(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def subset(self, index) -> "LabeledSet":
        return LabeledSet(features=self.features[index], labels=self.labels[index])


class UnlabeledSet(BaseModel):
    """Feature rows without labels. May be empty (shape (0, d))."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    features: np.ndarray

    @field_validator("features", mode="before")
    @classmethod
    def _as_matrix(cls, value):
        matrix = np.asarray(value, dtype=float)
        if matrix.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if not np.all(np.isfinite(matrix)):
            raise ValueError("feature rows must be finite")
        return matrix

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    @classmethod
    def empty(cls, d: int) -> "UnlabeledSet":
        return cls(features=np.zeros((0, d)))


# ---------------------------------------------------------------------------
# Robust objective and training configuration
# ---------------------------------------------------------------------------

class InnerSolverConfig(BaseModel):
    """Gradient-ascent settings for the adversarial perturbation.

    ``alpha = 0`` is accepted and leaves every point in place.
    ``radius_cap = None`` means ``100 * max(||x||, 1)`` per sample.
    """
    model_config = ConfigDict(frozen=True)

    steps: int = Field(default=15, ge=1)
    alpha: float = Field(default=0.1, ge=0)
    step_decay: StepDecay = StepDecay.DIVIDE_BY_STEP
    radius_cap: Optional[float] = Field(default=None, gt=0)


class RobustConfig(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    gamma: float = Field(default=1.0, gt=0)
    gamma_prime: float = Field(default=1.0, gt=0)
    lam: float = Field(default=1.0, ge=0, alias="lambda")
    labeled_cost: CostKind = CostKind.L2
    unlabeled_cost: CostKind = CostKind.L2_SQUARED
    inner: InnerSolverConfig = Field(default_factory=InnerSolverConfig)
    surrogate: Surrogate = Surrogate.CLOSED_FORM
    # numeric path only
    loss_kind: LossKind = LossKind.CROSS_ENTROPY
    margin_scale: float = Field(default=1.0, gt=0)

    @field_validator("loss_kind")
    @classmethod
    def _differentiable(cls, value: LossKind):
        if value == LossKind.ZERO_ONE:
            raise ValueError("the numeric surrogate needs a differentiable loss")
        return value


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    epochs: int = Field(default=100, ge=1)
    # k: batch size = ceil(set size / k)
    batch_fraction: int = Field(default=2, ge=1)
    learning_rate: float = Field(default=1e-2, gt=0)
    weight_decay: float = Field(default=0.0, ge=0)
    robust: RobustConfig = Field(default_factory=RobustConfig)
    inner: Optional[InnerSolverConfig] = None
    seed: int = 0
    optimizer: OptimizerKind = OptimizerKind.ADAM
    model: ModelKind = ModelKind.LINEAR
    hidden_widths: List[int] = Field(default_factory=lambda: [64, 64])
    leaky_slope: float = Field(default=0.01, ge=0)
    bias: bool = False
    # None: project to the unit sphere for linear models on the closed-form path
    normalize: Optional[bool] = None
    init_scale: float = Field(default=1e-3, gt=0)
    erm_loss: LossKind = LossKind.CROSS_ENTROPY
    warm_start: bool = True

    @model_validator(mode="after")
    def _sync_inner(self):
        if self.inner is None:
            object.__setattr__(self, "inner", self.robust.inner)
        elif self.inner != self.robust.inner:
            object.__setattr__(self, "robust", self.robust.model_copy(update={"inner": self.inner}))
        if self.model == ModelKind.MLP and self.robust.surrogate == Surrogate.CLOSED_FORM:
            object.__setattr__(
                self, "robust", self.robust.model_copy(update={"surrogate": Surrogate.NUMERIC})
            )
        if self.erm_loss == LossKind.ZERO_ONE:
            raise ValueError("erm_loss must be differentiable")
        return self

    @property
    def projects_to_sphere(self) -> bool:
        if self.normalize is not None:
            return self.normalize
        return self.model == ModelKind.LINEAR and self.robust.surrogate == Surrogate.CLOSED_FORM


class TrainReport(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    method: Method
    model: Any
    labeled_objective: List[float]
    unlabeled_objective: List[float]
    total_objective: List[float]
    wall_clock_seconds: float
    test_accuracy: Optional[float] = None
    train_accuracy: Optional[float] = None
    config: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _trace_lengths(self):
        lengths = {len(self.labeled_objective), len(self.unlabeled_objective), len(self.total_objective)}
        if len(lengths) != 1:
            raise ValueError("objective traces must have one entry per epoch")
        return self

    @property
    def epochs(self) -> int:
        return len(self.total_objective)


# ---------------------------------------------------------------------------
# Hyperparameter prescriptions and search
# ---------------------------------------------------------------------------

class SpectralEstimate(BaseModel):
    model_config = ConfigDict(frozen=True)

    lambda_max_hat: float = Field(gt=0)
    trace_hat: float = Field(gt=0)
    n_used: int = Field(ge=1)
    split_id: str
    iterations_used: int = 0
    top_vector: Optional[List[float]] = None

    @model_validator(mode="after")
    def _eigen_below_trace(self):
        if self.lambda_max_hat > self.trace_hat * (1 + 1e-9):
            raise ValueError("top eigenvalue cannot exceed the trace")
        return self


class IsotropicPrescription(BaseModel):
    gamma: float
    gamma_prime: float
    s: float
    feasible: bool
    lambda_note: str


class GeneralPrescription(BaseModel):
    gamma_prime: float
    s: float
    gamma: float
    t_prime: float
    feasible: bool


SEARCH_EXPONENTS: Dict[str, Tuple[int, int]] = {
    "learning_rate": (-5, -1),
    "weight_decay": (-7, -2),
    "lambda": (-5, 2),
    "alpha": (-5, 1),
    "gamma": (-7, 2),
    "gamma_prime": (-7, 2),
}


class SearchSpace(BaseModel):
    """Base-10 exponent ranges sampled on integer grids."""
    model_config = ConfigDict(frozen=True)

    exponents: Dict[str, Tuple[int, int]] = Field(default_factory=lambda: dict(SEARCH_EXPONENTS))

    @field_validator("exponents")
    @classmethod
    def _fixed_grid(cls, value: Dict[str, Tuple[int, int]]):
        normalized = {key: tuple(bounds) for key, bounds in value.items()}
        if normalized != SEARCH_EXPONENTS:
            raise ValueError(f"search space must be exactly {SEARCH_EXPONENTS}")
        return normalized


class TrialRecord(BaseModel):
    index: int
    exponents: Dict[str, int]
    hyperparameters: Dict[str, float]
    score: Optional[float] = None
    status: str = "ok"


class SearchResult(BaseModel):
    best_index: int
    best_hyperparameters: Dict[str, float]
    best_exponents: Dict[str, int]
    best_score: float
    trials: List[TrialRecord]


# ---------------------------------------------------------------------------
# Bounds
# ---------------------------------------------------------------------------

class BoundInputs(BaseModel):
    model_config = ConfigDict(frozen=True)

    m: int = Field(ge=1)
    n: int = Field(ge=1)
    d: int = Field(ge=1)
    alpha: float = Field(default=0.0, ge=0)
    delta: float = Field(default=0.05, gt=0, lt=1)
    gamma: float = Field(default=1.0, gt=0)
    mu0: List[float]
    mu1: List[float]
    sigma0: Optional[float] = Field(default=None, gt=0)
    sigma1: Optional[float] = Field(default=None, gt=0)
    cov0: Optional[List[List[float]]] = None
    cov1: Optional[List[List[float]]] = None
    beta: float = Field(default=1.0, gt=0)

    @property
    def mean0(self) -> np.ndarray:
        return np.asarray(self.mu0, dtype=float)

    @property
    def mean1(self) -> np.ndarray:
        return np.asarray(self.mu1, dtype=float)


UNIT_CONSTANT_NOTE = "every O(.) term evaluated with constant 1; compare values, do not read them as absolute"


class BoundReport(BaseModel):
    theorem: str
    residual: float = Field(ge=0)
    components: Dict[str, float] = Field(default_factory=dict)
    flags: Dict[str, bool] = Field(default_factory=dict)
    constant_convention: str = UNIT_CONSTANT_NOTE


class BoundGrid(BaseModel):
    """Cartesian grid for the isotropic bound sweep."""
    m: List[int] = Field(min_length=1)
    n: List[int] = Field(min_length=1)
    d: List[int] = Field(min_length=1)
    alpha: List[float] = Field(default_factory=lambda: [0.0], min_length=1)
    delta: List[float] = Field(default_factory=lambda: [0.05], min_length=1)
    gamma: List[float] = Field(default_factory=lambda: [1.0], min_length=1)
    mean0_norm: float = Field(default=1.0, ge=0)
    sigma0: float = Field(default=1.0, gt=0)
    mean1_norm: float = Field(default=1.0, ge=0)
    sigma1: float = Field(default=1.0, gt=0)


# ---------------------------------------------------------------------------
# Scenarios and results
# ---------------------------------------------------------------------------

class EmbeddingSchema(BaseModel):
    label_map: Dict[str, int] = Field(default_factory=lambda: {"1": 1, "+1": 1, "-1": -1})

    @field_validator("label_map")
    @classmethod
    def _signs(cls, value: Dict[str, int]):
        if not value:
            raise ValueError("label_map cannot be empty")
        if any(sign not in (-1, 1) for sign in value.values()):
            raise ValueError("label_map values must be -1 or +1")
        return value


class Scenario(BaseModel):
    scenario_id: str = "scenario"
    mode: ScenarioMode = ScenarioMode.SIMULATED_ISO
    # simulated modes
    d: int = Field(default=200, ge=1)
    mean_norm: float = Field(default=1.0, gt=0)
    sigma: float = Field(default=1.0, gt=0)
    shift_fraction: float = Field(default=0.0, ge=0)
    eigenvalues: Optional[List[float]] = None
    # embeddings mode
    labeled_path: Optional[str] = None
    unlabeled_path: Optional[str] = None
    test_path: Optional[str] = None
    embedding_schema: EmbeddingSchema = Field(default_factory=EmbeddingSchema)

    labeled_sizes: List[int] = Field(default_factory=lambda: [10], min_length=1)
    unlabeled_sizes: List[int] = Field(default_factory=lambda: [10, 100, 1000, 10000], min_length=1)
    test_size: int = Field(default=10_000, ge=2)
    search_trials: int = Field(default=50, ge=1)
    seeds: List[int]
    output_dir: Optional[str] = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    erm_train: Optional[TrainConfig] = None
    # logged hyperparameters keyed by unlabeled size; present -> search skipped
    hyperparameters: Optional[Dict[int, Dict[str, float]]] = None

    @field_validator("seeds")
    @classmethod
    def _nonempty_seeds(cls, value: List[int]):
        if not value:
            raise ValueError("seeds must not be empty")
        return value

    @model_validator(mode="after")
    def _mode_requirements(self):
        if self.mode == ScenarioMode.EMBEDDINGS:
            for name in ("labeled_path", "unlabeled_path"):
                path = getattr(self, name)
                if path is None:
                    raise ValueError(f"{name} is required in embeddings mode")
                if not os.path.exists(path):
                    raise ValueError(f"{name} does not exist: {path}")
            if self.test_path is not None and not os.path.exists(self.test_path):
                raise ValueError(f"test_path does not exist: {self.test_path}")
        if self.mode == ScenarioMode.SIMULATED_GENERAL:
            if not self.eigenvalues or len(self.eigenvalues) != self.d:
                raise ValueError("simulated-general mode needs d eigenvalues")
            if min(self.eigenvalues) <= 0:
                raise ValueError("eigenvalues must be positive")
        return self

    @property
    def alpha(self) -> float:
        return self.shift_fraction * self.mean_norm


class ResultRow(BaseModel):
    scenario_id: str
    labeled_size: int
    unlabeled_size: int
    method: Method
    mean_accuracy: Optional[float] = None
    std_accuracy: Optional[float] = None
    median_accuracy: Optional[float] = None
    seeds: int
    status: str = "ok"
    hyperparameters: str = "{}"

    @field_validator("mean_accuracy", "median_accuracy")
    @classmethod
    def _probability(cls, value: Optional[float]):
        if value is not None and not (0.0 <= value <= 1.0 and math.isfinite(value)):
            raise ValueError("accuracy must lie in [0, 1]")
        return value
