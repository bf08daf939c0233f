"""Linear classifier and small MLP with hand-written forward/backward passes.

Both models expose a flat parameter vector (``flat`` / ``with_flat``) so the
optimizer and the checkpoint format treat them the same way. Labels are
+/-1 throughout; the MLP emits two scores and class index ``(y + 1) / 2``.
"""
import json
import logging
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy.special import expit, log_softmax, softmax

from errors import DimensionMismatchError, NumericError
from schemas import LossKind, ModelKind, TrainConfig

logger = logging.getLogger(__name__)


class LinearModel(BaseModel):
    """h(x) = sign(<w, x> + b), with sign(0) = +1."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    w: np.ndarray
    b: float = 0.0
    bias: bool = False
    normalize: bool = True

    @field_validator("w", mode="before")
    @classmethod
    def _as_vector(cls, value):
        vector = np.asarray(value, dtype=float)
        if vector.ndim != 1:
            raise ValueError("w must be a vector")
        return vector

    @property
    def d(self) -> int:
        return int(self.w.shape[0])

    @property
    def n_params(self) -> int:
        return self.d + (1 if self.bias else 0)

    def flat(self) -> np.ndarray:
        if self.bias:
            return np.concatenate([self.w, [self.b]])
        return self.w.copy()

    def with_flat(self, params: np.ndarray) -> "LinearModel":
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise DimensionMismatchError("flat parameter length mismatch", expected=self.n_params, got=params.shape)
        b = float(params[-1]) if self.bias else 0.0
        return self.model_copy(update={"w": params[: self.d].copy(), "b": b})

    def projected(self) -> "LinearModel":
        """Copy with w on the unit sphere (bias untouched)."""
        norm = float(np.linalg.norm(self.w))
        if norm == 0.0:
            return self
        return self.model_copy(update={"w": self.w / norm})

    def margins(self, X: np.ndarray) -> np.ndarray:
        _check_width(X, self.d)
        return X @ self.w + self.b


class MlpModel(BaseModel):
    """Fully connected net with leaky-rectifier hidden layers and 2 output scores.

    ``weights[l]`` has shape (sizes[l + 1], sizes[l]).
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    sizes: List[int]
    weights: List[np.ndarray]
    biases: List[np.ndarray]
    leaky_slope: float = 0.01

    @model_validator(mode="after")
    def _check_layers(self):
        if len(self.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.sizes) - 1:
            raise ValueError("one weight matrix and bias per layer")
        for index, (weight, bias) in enumerate(zip(self.weights, self.biases)):
            expected = (self.sizes[index + 1], self.sizes[index])
            if weight.shape != expected or bias.shape != (self.sizes[index + 1],):
                raise ValueError(f"layer {index} has inconsistent shapes")
            if not (np.all(np.isfinite(weight)) and np.all(np.isfinite(bias))):
                raise ValueError(f"layer {index} has non-finite parameters")
        return self

    @property
    def d(self) -> int:
        return self.sizes[0]

    @property
    def normalize(self) -> bool:
        return False

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        parts = []
        for weight, bias in zip(self.weights, self.biases):
            parts.append(weight.ravel())
            parts.append(bias)
        return np.concatenate(parts)

    def with_flat(self, params: np.ndarray) -> "MlpModel":
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise DimensionMismatchError("flat parameter length mismatch", expected=self.n_params, got=params.shape)
        weights, biases, offset = [], [], 0
        for weight, bias in zip(self.weights, self.biases):
            weights.append(params[offset: offset + weight.size].reshape(weight.shape).copy())
            offset += weight.size
            biases.append(params[offset: offset + bias.size].copy())
            offset += bias.size
        return self.model_copy(update={"weights": weights, "biases": biases})


Model = Union[LinearModel, MlpModel]


def _check_width(X: np.ndarray, d: int) -> None:
    if X.shape[-1] != d:
        raise DimensionMismatchError(f"expected {d} features, got {X.shape[-1]}")


def initialize_linear(d: int, rng: np.random.Generator, scale: float = 1e-3,
                      bias: bool = False, normalize: bool = True) -> LinearModel:
    return LinearModel(w=scale * rng.standard_normal(d), b=0.0, bias=bias, normalize=normalize)


def initialize_mlp(sizes: List[int], rng: np.random.Generator, leaky_slope: float = 0.01) -> MlpModel:
    """He-normal weights, zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        weights.append(rng.standard_normal((fan_out, fan_in)) * np.sqrt(2.0 / fan_in))
        biases.append(np.zeros(fan_out))
    return MlpModel(sizes=list(sizes), weights=weights, biases=biases, leaky_slope=leaky_slope)


def build_model(cfg: TrainConfig, d: int, rng: np.random.Generator) -> Model:
    if cfg.model == ModelKind.LINEAR:
        return initialize_linear(d, rng, scale=cfg.init_scale, bias=cfg.bias, normalize=cfg.projects_to_sphere)
    return initialize_mlp([d, *cfg.hidden_widths, 2], rng, leaky_slope=cfg.leaky_slope)


# ---------------------------------------------------------------------------
# Forward pass and prediction
# ---------------------------------------------------------------------------

def _mlp_forward(model: MlpModel, X: np.ndarray):
    _check_width(X, model.d)
    activations = [X]
    pre_activations = []
    hidden = X
    for index, (weight, bias) in enumerate(zip(model.weights[:-1], model.biases[:-1])):
        pre = hidden @ weight.T + bias
        if not np.all(np.isfinite(pre)):
            raise NumericError("non-finite activation in forward pass", layer=index)
        pre_activations.append(pre)
        hidden = np.where(pre > 0, pre, model.leaky_slope * pre)
        activations.append(hidden)
    out = hidden @ model.weights[-1].T + model.biases[-1]
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite activation in forward pass", layer=len(model.weights) - 1)
    return out, activations, pre_activations


def scores(model: MlpModel, X: np.ndarray) -> np.ndarray:
    """Class scores, shape (B, 2)."""
    out, _, _ = _mlp_forward(model, np.atleast_2d(np.asarray(X, dtype=float)))
    return out


def decision_values(model: Model, X: np.ndarray) -> np.ndarray:
    """Signed score per row: the linear margin, or score[+1] - score[-1] for the MLP."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if isinstance(model, LinearModel):
        return model.margins(X)
    out = scores(model, X)
    return out[:, 1] - out[:, 0]


def predict_labels(model: Model, X: np.ndarray) -> np.ndarray:
    """Hard labels in {-1, +1}; ties go to +1."""
    return np.where(decision_values(model, X) >= 0, 1, -1)


def predict(model: Model, x: np.ndarray):
    """Label +/-1 for linear models, score vector for the MLP."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise DimensionMismatchError("predict takes a single feature vector")
    if isinstance(model, LinearModel):
        return int(predict_labels(model, x[None, :])[0])
    return scores(model, x[None, :])[0]


# ---------------------------------------------------------------------------
# Losses and gradients
# ---------------------------------------------------------------------------

def margin_loss(kind: LossKind, margins: np.ndarray, labels: np.ndarray,
                margin_scale: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row loss of the signed score ``s`` and its derivative d loss / d s."""
    ys = labels * margins
    if kind == LossKind.HINGE01_SURROGATE:
        slack = 1.0 - margin_scale * ys
        values = np.clip(slack, 0.0, 1.0)
        active = (slack > 0.0) & (slack < 1.0)
        return values, np.where(active, -margin_scale * labels, 0.0)
    if kind == LossKind.CROSS_ENTROPY:
        return np.logaddexp(0.0, -ys), -labels * expit(-ys)
    if kind == LossKind.SQUARED_MARGIN:
        slack = np.maximum(0.0, 1.0 - ys)
        return slack ** 2, -2.0 * labels * slack
    if kind == LossKind.ZERO_ONE:
        return (ys <= 0).astype(float), np.zeros_like(ys)
    raise ValueError(f"unknown loss kind {kind}")


def margin_gradient(model: LinearModel, X: np.ndarray, dmargin: np.ndarray) -> np.ndarray:
    """Mean parameter gradient of a linear model given d loss / d margin per row."""
    grad_w = dmargin @ X / X.shape[0]
    if model.bias:
        return np.concatenate([grad_w, [float(dmargin.mean())]])
    return grad_w


def loss_and_grad_batch(model: Model, X: np.ndarray, Y: np.ndarray, loss_kind: LossKind,
                        margin_scale: float = 1.0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row values, mean parameter gradient (flat) and per-row input gradients."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Y = np.asarray(Y, dtype=float)
    if X.shape[0] != Y.shape[0]:
        raise DimensionMismatchError("rows and labels differ", rows=X.shape[0], labels=Y.shape[0])

    if isinstance(model, LinearModel):
        margins = model.margins(X)
        values, dmargin = margin_loss(loss_kind, margins, Y, margin_scale)
        grad_x = dmargin[:, None] * model.w[None, :]
        grad_params = margin_gradient(model, X, dmargin)
    else:
        out, activations, pre_activations = _mlp_forward(model, X)
        if loss_kind == LossKind.CROSS_ENTROPY:
            classes = ((Y + 1) // 2).astype(int)
            log_probs = log_softmax(out, axis=1)
            values = -log_probs[np.arange(len(classes)), classes]
            delta = softmax(out, axis=1)
            delta[np.arange(len(classes)), classes] -= 1.0
        else:
            values, dmargin = margin_loss(loss_kind, out[:, 1] - out[:, 0], Y, margin_scale)
            delta = np.stack([-dmargin, dmargin], axis=1)
        grad_params, grad_x = _mlp_backward(model, delta, activations, pre_activations)

    if not (np.all(np.isfinite(values)) and np.all(np.isfinite(grad_params))):
        layer = 0 if isinstance(model, LinearModel) else len(model.weights) - 1
        raise NumericError("non-finite loss or gradient", layer=layer)
    return values, grad_params, grad_x


def _mlp_backward(model: MlpModel, delta: np.ndarray, activations, pre_activations):
    batch = delta.shape[0]
    grads = [None] * len(model.weights)
    for index in range(len(model.weights) - 1, -1, -1):
        grad_w = delta.T @ activations[index] / batch
        grad_b = delta.sum(axis=0) / batch
        grads[index] = (grad_w, grad_b)
        delta = delta @ model.weights[index]
        if index > 0:
            delta = delta * np.where(pre_activations[index - 1] > 0, 1.0, model.leaky_slope)
        if not np.all(np.isfinite(delta)):
            raise NumericError("non-finite gradient in backward pass", layer=index)
    flat = np.concatenate([part for grad_w, grad_b in grads for part in (grad_w.ravel(), grad_b)])
    return flat, delta


def loss_and_grad(model: Model, x: np.ndarray, y: int, loss_kind: LossKind,
                  margin_scale: float = 1.0) -> Tuple[float, np.ndarray, np.ndarray]:
    values, grad_params, grad_x = loss_and_grad_batch(
        model, np.asarray(x, dtype=float)[None, :], np.array([y]), loss_kind, margin_scale
    )
    return float(values[0]), grad_params, grad_x[0]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(model: Model, path: Union[str, Path]) -> Path:
    """One JSON header line, then one parameter per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(model, LinearModel):
        header = {"kind": "linear", "sizes": [model.d], "normalize": model.normalize, "bias": model.bias}
    else:
        header = {"kind": "mlp", "sizes": model.sizes, "normalize": False, "leaky_slope": model.leaky_slope}
    with open(path, "w", encoding="utf-8", newline="") as handle:
        handle.write(json.dumps(header) + "\n")
        for value in model.flat():
            handle.write(repr(float(value)) + "\n")
    logger.debug(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> Model:
    with open(path, "r", encoding="utf-8") as handle:
        header = json.loads(handle.readline())
        params = np.array([float(line) for line in handle if line.strip()])
    if header["kind"] == "linear":
        d = header["sizes"][0]
        template = LinearModel(w=np.zeros(d), bias=header.get("bias", False), normalize=header["normalize"])
    else:
        template = initialize_mlp(header["sizes"], np.random.default_rng(0), header.get("leaky_slope", 0.01))
    return template.with_flat(params)


def accuracy(model: Model, X: np.ndarray, Y: np.ndarray) -> float:
    if X.shape[0] == 0:
        return float("nan")
    return float(np.mean(predict_labels(model, X) == Y))
