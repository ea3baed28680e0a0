"""Regression models, their exact gradients, and the optimizers used on both sides.

Everything is plain float64 numpy. Parameters travel as flat vectors plus a
shape descriptor so that message logs, aggregation and the attacks can treat
linear models and the one-hidden-layer MLP uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Relative singular-value cutoff shared by every pseudo-inverse in the package.
# The reconstruction attack is numerically sensitive, so one rank-reveal
# threshold is used everywhere.
SVD_RCOND = 1e-10


class ShapeError(ValueError):
    """Parameter vector, input, or state dimensions do not line up."""


@dataclass(frozen=True)
class Linear:
    """Linear regression model f(x) = <theta, x> with d coefficients."""

    d: int

    @property
    def input_dim(self) -> int:
        return self.d

    @property
    def num_params(self) -> int:
        return self.d


@dataclass(frozen=True)
class Mlp:
    """One-hidden-layer ReLU network with scalar output: w2.relu(W1 x + b1) + b2."""

    d_in: int
    hidden: int

    @property
    def input_dim(self) -> int:
        return self.d_in

    @property
    def num_params(self) -> int:
        return self.d_in * self.hidden + self.hidden + self.hidden + 1


ModelShape = Linear | Mlp


@dataclass(frozen=True)
class ModelParams:
    """Immutable flat parameter vector with its shape descriptor."""

    values: np.ndarray
    shape: ModelShape

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size != self.shape.num_params:
            raise ShapeError(
                f"expected {self.shape.num_params} parameters for {self.shape}, "
                f"got array of shape {values.shape}"
            )
        if not np.all(np.isfinite(values)):
            raise ValueError("model parameters must be finite")
        values = values.copy()
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def with_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(values, self.shape)


def unflatten_mlp(shape: Mlp, values: np.ndarray):
    """Split a flat vector into (W1, b1, w2, b2). Views, no copies."""
    h, d = shape.hidden, shape.d_in
    W1 = values[: h * d].reshape(h, d)
    b1 = values[h * d : h * d + h]
    w2 = values[h * d + h : h * d + 2 * h]
    b2 = values[-1]
    return W1, b1, w2, b2


def flatten_mlp(W1, b1, w2, b2) -> np.ndarray:
    return np.concatenate([np.ravel(W1), b1, w2, [b2]])


def init_params(shape: ModelShape, rng: np.random.Generator | None = None) -> ModelParams:
    """Fresh parameters: zeros for linear, uniform +-1/sqrt(fan_in) for the MLP."""
    if isinstance(shape, Linear):
        return ModelParams(np.zeros(shape.d), shape)
    if rng is None:
        raise ValueError("MLP initialization needs an rng")
    h, d = shape.hidden, shape.d_in
    W1 = rng.uniform(-1.0, 1.0, size=(h, d)) / math.sqrt(d)
    b1 = rng.uniform(-1.0, 1.0, size=h) / math.sqrt(d)
    w2 = rng.uniform(-1.0, 1.0, size=h) / math.sqrt(h)
    b2 = rng.uniform(-1.0, 1.0) / math.sqrt(h)
    return ModelParams(flatten_mlp(W1, b1, w2, b2), shape)


def _check_inputs(params: ModelParams, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != params.shape.input_dim:
        raise ShapeError(
            f"input width {X.shape[-1] if X.ndim else '?'} does not match "
            f"model input dim {params.shape.input_dim}"
        )


def predict_batch(params: ModelParams, X: np.ndarray) -> np.ndarray:
    """Model outputs for every row of X."""
    X = np.asarray(X, dtype=np.float64)
    _check_inputs(params, X)
    if isinstance(params.shape, Linear):
        return X @ params.values
    W1, b1, w2, b2 = unflatten_mlp(params.shape, params.values)
    hidden = np.maximum(X @ W1.T + b1, 0.0)
    return hidden @ w2 + b2


def predict(params: ModelParams, x: np.ndarray) -> float:
    """Single-sample forward pass."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError("predict expects a single feature vector")
    return float(predict_batch(params, x[None, :])[0])


def per_sample_losses(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Squared error (f(x_i) - y_i)^2 per sample."""
    r = predict_batch(params, X) - np.asarray(y, dtype=np.float64)
    return r * r


def mean_loss(params: ModelParams, X: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(per_sample_losses(params, X, y)))


def grad_per_sample(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gradient of the squared-error loss for each sample, one row per sample.

    ReLU subgradient at exactly 0 is taken as 0.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_inputs(params, X)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    if isinstance(params.shape, Linear):
        r = X @ params.values - y
        return (2.0 * r)[:, None] * X
    W1, b1, w2, b2 = unflatten_mlp(params.shape, params.values)
    z1 = X @ W1.T + b1                       # (n, h)
    hidden = np.maximum(z1, 0.0)
    r = hidden @ w2 + b2 - y                 # (n,)
    dout = 2.0 * r                           # dL/df
    dz1 = dout[:, None] * w2 * (z1 > 0.0)    # (n, h)
    n = X.shape[0]
    h, d = params.shape.hidden, params.shape.d_in
    grads = np.empty((n, params.shape.num_params))
    grads[:, : h * d] = (dz1[:, :, None] * X[:, None, :]).reshape(n, h * d)
    grads[:, h * d : h * d + h] = dz1
    grads[:, h * d + h : h * d + 2 * h] = dout[:, None] * hidden
    grads[:, -1] = dout
    return grads


def grad_batch(params: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Mean of per-sample gradients over the batch.

    Uses the same per-sample computation and numpy reduction as the DP-SGD
    path so that the two agree bitwise when the defense is disabled.
    """
    return grad_per_sample(params, X, y).mean(axis=0)


def grad_dot_per_sample(params: ModelParams, X: np.ndarray, y: np.ndarray,
                        w: np.ndarray) -> np.ndarray:
    """<grad of sample i's loss, w> for each i, without materializing the grads."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_inputs(params, X)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (params.shape.num_params,):
        raise ShapeError("direction vector does not match parameter count")
    if isinstance(params.shape, Linear):
        r = X @ params.values - y
        return 2.0 * r * (X @ w)
    shape = params.shape
    W1, b1, w2, b2 = unflatten_mlp(shape, params.values)
    wW1, wb1, ww2, wb2 = unflatten_mlp(shape, w)
    z1 = X @ W1.T + b1
    hidden = np.maximum(z1, 0.0)
    r = hidden @ w2 + b2 - y
    dout = 2.0 * r
    dz1 = dout[:, None] * w2 * (z1 > 0.0)
    out = dout * (hidden @ ww2 + wb2)
    out += np.einsum("nh,nh->n", dz1, X @ wW1.T + wb1)
    return out


def sgd_step(params: ModelParams, grad: np.ndarray, lr: float) -> ModelParams:
    return params.with_values(params.values - lr * np.asarray(grad))


@dataclass
class AdamState:
    """Adam with bias-corrected first/second moments (Kingma & Ba, Alg. 1)."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)
    t: int = 0

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.t < 0:
            raise ValueError("step count must be >= 0")


def adam_step(state: AdamState, params: ModelParams, grad: np.ndarray) -> ModelParams:
    """One Adam update; mutates state, returns the new parameters."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.values.shape:
        raise ShapeError("gradient does not match parameter count")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient passed to adam_step")
    if state.m is None:
        state.m = np.zeros_like(params.values)
        state.v = np.zeros_like(params.values)
    elif state.m.shape != params.values.shape:
        raise ShapeError("optimizer state does not match parameter count")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    return params.with_values(params.values - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))


def solve_least_squares(X: np.ndarray, y: np.ndarray) -> ModelParams:
    """Minimum-norm least-squares solution; the exact optimal local linear model."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    theta, *_ = np.linalg.lstsq(X, y, rcond=SVD_RCOND)
    return ModelParams(theta, Linear(X.shape[1]))


def sgd_stability_bound(X: np.ndarray) -> float:
    """Largest learning rate S_c / (2 lambda_max(X^T X)) keeping full-batch SGD stable."""
    X = np.asarray(X, dtype=np.float64)
    smax = np.linalg.svd(X, compute_uv=False)[0]
    return X.shape[0] / (2.0 * smax * smax)
