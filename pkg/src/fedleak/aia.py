"""Attribute inference attacks: model-based and the gradient-based baseline.

The model-based attack plugs both candidate values of the binary sensitive
attribute into the per-sample loss and keeps the cheaper one; for linear
models this collapses to a closed form (rescale the residual, threshold at
one half). The gradient-based baseline searches for the sensitive vector
whose virtual gradients best align, in cosine similarity, with the observed
pseudo-gradients, relaxed through the Gumbel-softmax trick.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .federated import MessageLog
from .models import (
    Linear,
    ModelParams,
    ShapeError,
    grad_dot_per_sample,
    grad_per_sample,
    per_sample_losses,
)


class DegenerateAttributeError(ValueError):
    """The model coefficient of the sensitive attribute is zero."""


@dataclass
class AttackOutcome:
    """Predicted sensitive vector with its score and provenance."""

    s_hat: np.ndarray
    method: str
    accuracy: float | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.s_hat = np.asarray(self.s_hat, dtype=np.int64)
        if not np.all((self.s_hat == 0) | (self.s_hat == 1)):
            raise ValueError("predictions must be binary")
        if self.accuracy is not None and not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps({
            "method": self.method,
            "s_hat": self.s_hat.tolist(),
            "accuracy": self.accuracy,
            "extras": {k: v for k, v in self.extras.items()
                       if isinstance(v, (int, float, str, list, bool))},
        })


def attack_accuracy(s_hat: np.ndarray, s_true: np.ndarray) -> float:
    s_hat = np.asarray(s_hat)
    s_true = np.asarray(s_true)
    if s_hat.shape != s_true.shape:
        raise ShapeError("prediction and ground truth lengths differ")
    return float(np.mean(s_hat == s_true))


def _insert_sensitive(public_X: np.ndarray, values: np.ndarray, sensitive_col: int) -> np.ndarray:
    """Full design matrix with `values` spliced in at the sensitive column."""
    n, p = public_X.shape
    X = np.empty((n, p + 1))
    X[:, :sensitive_col] = public_X[:, :sensitive_col]
    X[:, sensitive_col] = values
    X[:, sensitive_col + 1:] = public_X[:, sensitive_col:]
    return X


def model_based_aia(params: ModelParams, public_X: np.ndarray, y: np.ndarray,
                    sensitive_col: int, s_true: np.ndarray | None = None) -> AttackOutcome:
    """Per sample, keep the sensitive value whose loss under the model is lower.

    Ties go to 1: the matching threshold rule classifies the midpoint as 1.
    Works for any model shape.
    """
    public_X = np.asarray(public_X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = public_X.shape[0]
    loss0 = per_sample_losses(params, _insert_sensitive(public_X, np.zeros(n), sensitive_col), y)
    loss1 = per_sample_losses(params, _insert_sensitive(public_X, np.ones(n), sensitive_col), y)
    s_hat = (loss1 <= loss0).astype(np.int64)
    acc = attack_accuracy(s_hat, s_true) if s_true is not None else None
    return AttackOutcome(s_hat, "model-based", acc)


def sensitive_scores_linear(params: ModelParams, public_X: np.ndarray, y: np.ndarray,
                            sensitive_col: int) -> np.ndarray:
    """Real-valued estimates (y - P theta_pub) / theta_s before thresholding."""
    if not isinstance(params.shape, Linear):
        raise ShapeError("closed form applies to linear models only")
    theta = params.values
    theta_s = theta[sensitive_col]
    if theta_s == 0.0:
        raise DegenerateAttributeError(
            "sensitive coefficient is zero; fall back to loss enumeration")
    theta_pub = np.delete(theta, sensitive_col)
    public_X = np.asarray(public_X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return (y - public_X @ theta_pub) / theta_s


def model_based_aia_linear_closed_form(params: ModelParams, public_X: np.ndarray,
                                       y: np.ndarray, sensitive_col: int,
                                       s_true: np.ndarray | None = None) -> AttackOutcome:
    """Two-step closed form: compute the real scores, threshold at 1/2.

    Equivalent to model_based_aia for linear models, sample by sample,
    including the tie rule (score exactly 1/2 predicts 1).
    """
    scores = sensitive_scores_linear(params, public_X, y, sensitive_col)
    s_hat = (scores >= 0.5).astype(np.int64)
    acc = attack_accuracy(s_hat, s_true) if s_true is not None else None
    return AttackOutcome(s_hat, "model-based-closed-form", acc,
                         extras={"scores_min": float(scores.min()),
                                 "scores_max": float(scores.max())})


def prop1_bound(params: ModelParams, X: np.ndarray, y: np.ndarray,
                sensitive_col: int) -> float:
    """Accuracy floor max(0, 1 - 4 E / theta_s^2) for the model-based attack.

    E is the mean squared residual of the model on the full local data. A
    zero sensitive coefficient makes the bound vacuous; 0 is returned.
    """
    theta_s = params.values[sensitive_col]
    if theta_s == 0.0:
        return 0.0
    mse = float(np.mean(per_sample_losses(params, X, y)))
    return max(0.0, 1.0 - 4.0 * mse / (theta_s * theta_s))


@dataclass(frozen=True)
class GumbelAiaConfig:
    temperature: float = 1.0
    lr_grid: tuple[float, ...] = (1e2, 1e3, 1e4, 1e5, 1e6)
    iterations: int = 500
    fractions: tuple[float, ...] = (0.01, 0.05, 0.1, 0.2, 0.5, 1.0)
    criterion: str = "cosine"  # "cosine" (Grad) or "oracle" (Grad-w-O)

    def __post_init__(self):
        if self.temperature <= 0.0:
            raise ValueError("temperature must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.criterion not in ("cosine", "oracle"):
            raise ValueError(f"unknown criterion {self.criterion!r}")


def _round_subsets(rounds: list[int], fractions) -> list[tuple[int, ...]]:
    """First max(1, floor(f * len)) rounds for each fraction, deduplicated."""
    subsets = []
    for f in fractions:
        k = max(1, math.floor(f * len(rounds)))
        sub = tuple(rounds[:k])
        if sub not in subsets:
            subsets.append(sub)
    return subsets


def candidate_round_subsets(log: MessageLog, fractions) -> list[tuple[int, ...]]:
    """Passive candidates over the inspected rounds; if the log contains
    attack rounds, prefixes of those are candidates too."""
    passive = sorted(set(log.rounds) - set(log.active_rounds))
    subsets = _round_subsets(passive, fractions) if passive else []
    active = sorted(r for r in log.active_rounds if r in set(log.rounds))
    if active:
        for sub in _round_subsets(active, fractions):
            if sub not in subsets:
                subsets.append(sub)
    return subsets


def _gumbel_relax(logits: np.ndarray, temperature: float, rng: np.random.Generator):
    """One Gumbel-softmax draw per sample; returns the relaxed value in (0, 1)."""
    tiny = 1e-20
    u = rng.random(logits.shape)
    gumbel = -np.log(-np.log(u + tiny) + tiny)
    z = (logits + gumbel) / temperature
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e[:, 1] / e.sum(axis=1)


class _RoundContext:
    """Per-round precomputation for the cosine objective and its gradient."""

    def __init__(self, entry, public_X, y, sensitive_col):
        self.theta = entry.theta_in
        self.pseudo = entry.theta_in.values - entry.theta_out.values
        self.pseudo_norm = float(np.linalg.norm(self.pseudo))
        self.public_X = public_X
        self.y = y
        self.k = sensitive_col
        self.linear = isinstance(self.theta.shape, Linear)
        if self.linear:
            theta = self.theta.values
            self.theta_s = theta[self.k]
            self.pred0 = public_X @ np.delete(theta, self.k)
            self.X0 = _insert_sensitive(public_X, np.zeros(len(y)), self.k)

    def virtual_gradient(self, s_rel: np.ndarray) -> np.ndarray:
        """Sum over samples of the per-sample loss gradient at relaxed s."""
        if self.linear:
            r = self.pred0 + s_rel * self.theta_s - self.y
            g = 2.0 * (self.X0.T @ r)
            g[self.k] += 2.0 * float(s_rel @ r)
            return g
        X = _insert_sensitive(self.public_X, s_rel, self.k)
        return grad_per_sample(self.theta, X, self.y).sum(axis=0)

    def cosine_and_grad(self, s_rel: np.ndarray, fd_step: float = 1e-4):
        """Cosine against the pseudo-gradient and d(cos)/d(s_rel) per sample."""
        if self.pseudo_norm == 0.0:
            return 0.0, np.zeros_like(s_rel)
        g = self.virtual_gradient(s_rel)
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            return 0.0, np.zeros_like(s_rel)
        cos = float(g @ self.pseudo) / (gnorm * self.pseudo_norm)
        # d(cos)/dg, then chain into each sample's ds
        w = self.pseudo / (gnorm * self.pseudo_norm) - (cos / (gnorm * gnorm)) * g
        if self.linear:
            r = self.pred0 + s_rel * self.theta_s - self.y
            xw = self.X0 @ w
            dcos_ds = 2.0 * (self.theta_s * (xw + s_rel * w[self.k]) + r * w[self.k])
            return cos, dcos_ds
        # MLP: central finite difference of <grad_i, w> along each sample's s
        Xp = _insert_sensitive(self.public_X, s_rel + fd_step, self.k)
        Xm = _insert_sensitive(self.public_X, s_rel - fd_step, self.k)
        dot_p = grad_dot_per_sample(self.theta, Xp, self.y, w)
        dot_m = grad_dot_per_sample(self.theta, Xm, self.y, w)
        return cos, (dot_p - dot_m) / (2.0 * fd_step)

    def cosine_at(self, s_vals: np.ndarray) -> float:
        if self.pseudo_norm == 0.0:
            return 0.0
        g = self.virtual_gradient(np.asarray(s_vals, dtype=np.float64))
        gnorm = float(np.linalg.norm(g))
        if gnorm == 0.0:
            return 0.0
        return float(g @ self.pseudo) / (gnorm * self.pseudo_norm)


def cosine_objective(log: MessageLog, rounds, public_X, y, sensitive_col,
                     s_vals: np.ndarray) -> float:
    """Mean cosine similarity over the given rounds at a fixed assignment."""
    ctxs = [_RoundContext(log.entry_for(r), np.asarray(public_X, dtype=np.float64),
                          np.asarray(y, dtype=np.float64), sensitive_col)
            for r in rounds]
    return float(np.mean([c.cosine_at(s_vals) for c in ctxs]))


def _optimize_logits(ctxs: list[_RoundContext], n: int, cfg: GumbelAiaConfig,
                     lr: float, rng: np.random.Generator):
    """Stochastic ascent on the relaxed objective.

    The Gumbel noise keeps kicking the iterate around even once the logits
    saturate, so besides the final logits we track the best discrete
    assignment seen, scored by the attack's own observable (mean cosine).
    """
    logits = np.zeros((n, 2))
    best_s, best_cos = None, -math.inf
    check_every = max(1, cfg.iterations // 100)
    for it in range(cfg.iterations):
        s_rel = _gumbel_relax(logits, cfg.temperature, rng)
        dobj_ds = np.zeros(n)
        for ctx in ctxs:
            _, dcos = ctx.cosine_and_grad(s_rel)
            dobj_ds += dcos
        dobj_ds /= len(ctxs)
        # chain through the softmax: ds/dlogit1 = s(1-s)/T = -ds/dlogit0
        coeff = lr * dobj_ds * s_rel * (1.0 - s_rel) / cfg.temperature
        logits[:, 1] += coeff
        logits[:, 0] -= coeff
        if it % check_every == 0 or it == cfg.iterations - 1:
            s_disc = (logits[:, 1] > logits[:, 0]).astype(np.float64)
            mean_cos = float(np.mean([c.cosine_at(s_disc) for c in ctxs]))
            if mean_cos > best_cos:
                best_s, best_cos = s_disc.astype(np.int64), mean_cos
    return best_s, best_cos


def gradient_based_aia(log: MessageLog, public_X: np.ndarray, y: np.ndarray,
                       sensitive_col: int, cfg: GumbelAiaConfig,
                       rng: np.random.Generator,
                       s_true: np.ndarray | None = None) -> AttackOutcome:
    """Gradient-based AIA over the message log.

    Runs the Gumbel-softmax optimizer for every (round subset, learning rate)
    candidate and keeps the run the criterion prefers: highest mean cosine
    ("Grad") or highest oracle accuracy ("Grad-w-O", needs ground truth).
    """
    public_X = np.asarray(public_X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(log.entries) == 0:
        raise ValueError("message log is empty")
    if cfg.criterion == "oracle" and s_true is None:
        raise ValueError("oracle criterion needs the ground-truth attributes")
    n = public_X.shape[0]
    subsets = candidate_round_subsets(log, cfg.fractions)
    best = None
    for subset in subsets:
        ctxs = [_RoundContext(log.entry_for(r), public_X, y, sensitive_col)
                for r in subset]
        for lr in cfg.lr_grid:
            run_rng = np.random.default_rng(rng.integers(2 ** 63))
            s_hat, mean_cos = _optimize_logits(ctxs, n, cfg, lr, run_rng)
            acc = attack_accuracy(s_hat, s_true) if s_true is not None else None
            score = acc if cfg.criterion == "oracle" else mean_cos
            if best is None or score > best[0]:
                best = (score, s_hat, acc, mean_cos, subset, lr)
    _, s_hat, acc, mean_cos, subset, lr = best
    method = "Grad-w-O" if cfg.criterion == "oracle" else "Grad"
    return AttackOutcome(s_hat, method, acc,
                         extras={"mean_cosine": mean_cos,
                                 "rounds": list(subset),
                                 "lr": lr})
