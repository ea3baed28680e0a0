"""Reconstruction of a client's optimal local model from exchanged messages.

Passive path: stack the tapped (model in, pseudo-gradient) pairs and read the
optimum off a single pseudo-inverse least-squares solve. Active path: a
malicious server emulates Adam on the pseudo-gradients the target client
keeps handing back. Both return a report with spectral diagnostics of the
pseudo-gradient matrix, which govern the passive attack's error.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .federated import ClientDataset, FLConfig, DpSgd, MessageLog, ProtocolError, run_training
from .models import (
    SVD_RCOND,
    AdamState,
    Linear,
    Mlp,
    ModelParams,
    ModelShape,
    ShapeError,
    adam_step,
    grad_per_sample,
    init_params,
    mean_loss,
    solve_least_squares,
)


@dataclass
class ReconstructionReport:
    """Reconstructed local model plus the diagnostics behind its error."""

    theta_hat: ModelParams
    n_messages: int
    lambda_min: float | None = None      # smallest eigenvalue of Out^T Out / n
    cond: float | None = None            # 2-norm condition number of Out
    rank_deficient: bool = False
    l2_error: float | None = None        # vs oracle optimum, when available

    def to_json(self) -> str:
        return json.dumps({
            "theta_hat": [float(v) for v in self.theta_hat.values],
            "n_messages": self.n_messages,
            "lambda_min": self.lambda_min,
            "cond": self.cond,
            "rank_deficient": self.rank_deficient,
            "l2_error": self.l2_error,
        })


def assemble_message_matrices(log: MessageLog, rounds=None):
    """Stack inspected rounds into (In, Out): In rows are the delivered models,
    Out rows are pseudo-gradients (in - out) with a trailing ones column."""
    if rounds is None:
        rounds = log.rounds
    rounds = list(rounds)
    if len(rounds) < 1:
        raise ValueError("need at least one inspected round")
    known = set(log.rounds)
    missing = [r for r in rounds if r not in known]
    if missing:
        raise ValueError(f"rounds {missing} not present in the log")
    entries = [log.entry_for(r) for r in rounds]
    theta_in = np.stack([e.theta_in.values for e in entries])
    pseudo = np.stack([e.theta_in.values - e.theta_out.values for e in entries])
    out = np.hstack([pseudo, np.ones((len(rounds), 1))])
    return theta_in, out


def _spectral(out: np.ndarray):
    sv = np.linalg.svd(out, compute_uv=False)
    n = out.shape[0]
    if out.shape[0] < out.shape[1]:
        lam_min = 0.0  # fewer rows than columns: Out^T Out is singular
    else:
        lam_min = float(sv[-1] ** 2 / n)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0.0 else math.inf
    rank = int(np.sum(sv > SVD_RCOND * sv[0])) if sv[0] > 0.0 else 0
    return lam_min, cond, rank


def passive_reconstruct_linear(log: MessageLog, rounds=None,
                               oracle: ModelParams | None = None) -> ReconstructionReport:
    """Eavesdropping-only reconstruction for federated least squares.

    Solves the ordinary least-squares system In = Out @ [V; theta*]^T with a
    rank-revealing pseudo-inverse and returns the last row as the estimate of
    the client's optimal local model. Rank deficiency is not an error, only
    flagged: the minimum-norm solution is still returned.
    """
    if log.entries and not isinstance(log.entries[0].theta_in.shape, Linear):
        raise ShapeError("passive reconstruction applies to linear models only")
    theta_in, out = assemble_message_matrices(log, rounds)
    d = theta_in.shape[1]
    # pinv(Out) @ In == pinv(Out^T Out) @ Out^T @ In, computed the stable way
    solution = np.linalg.pinv(out, rcond=SVD_RCOND) @ theta_in
    theta_hat = ModelParams(solution[-1], Linear(d))
    lam_min, cond, rank = _spectral(out)
    err = None
    if oracle is not None:
        err = float(np.linalg.norm(theta_hat.values - oracle.values))
    return ReconstructionReport(
        theta_hat=theta_hat,
        n_messages=out.shape[0],
        lambda_min=lam_min,
        cond=cond,
        rank_deficient=rank < min(out.shape),
        l2_error=err,
    )


def thm1_diagnostics(log: MessageLog, rounds=None) -> dict:
    """Spectral quantities of the stacked pseudo-gradient matrix."""
    _, out = assemble_message_matrices(log, rounds)
    lam_min, cond, _ = _spectral(out)
    return {"lambda_min": lam_min, "cond": cond, "n_c": out.shape[0]}


def select_message_rounds(log: MessageLog, n_select: int, n_trials: int = 100_000,
                          rng: np.random.Generator | None = None) -> list[int]:
    """Pick the sampled size-n_select round subset minimizing cond(Out).

    Ill-conditioned pseudo-gradient matrices blow up the inversion error, so
    the adversary samples subsets at random and keeps the best-conditioned
    one (first encountered wins ties).
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    rounds = log.rounds
    if len(rounds) < n_select:
        raise ValueError("log has fewer entries than n_select")
    if len(rounds) == n_select:
        return list(rounds)
    if rng is None:
        rng = np.random.default_rng()
    _, out_all = assemble_message_matrices(log)
    best_pick, best_cond = None, math.inf
    for _ in range(n_trials):
        pick = np.sort(rng.choice(len(rounds), size=n_select, replace=False))
        sv = np.linalg.svd(out_all[pick], compute_uv=False)
        cond = sv[0] / sv[-1] if sv[-1] > 0.0 else math.inf
        if cond < best_cond:
            best_pick, best_cond = pick, cond
    return [rounds[i] for i in best_pick]


def evenly_spaced_rounds(log: MessageLog, n_select: int) -> list[int]:
    """Every floor(T/n)-th inspected round, the default for exactness checks."""
    rounds = log.rounds
    if len(rounds) < n_select:
        raise ValueError("log has fewer entries than n_select")
    stride = len(rounds) // n_select
    return [rounds[i * stride] for i in range(n_select)]


class ActiveAdamReconstructor:
    """Malicious-server hook: resend an Adam-refined model to the target.

    Starting from the latest model the target returned, each attack round
    sends the current estimate, reads the client's update, and takes an Adam
    step on the pseudo-gradient (estimate - update). After the last attack
    round the estimate approximates the client's optimal local model.
    """

    def __init__(self, target: int, attack_rounds, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.target = target
        self.attack_rounds = frozenset(attack_rounds)
        self._adam = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        self.estimate: ModelParams | None = None
        self._latest_response: ModelParams | None = None
        self.exchanges: list[tuple[ModelParams, ModelParams]] = []

    def on_broadcast(self, round: int, client_id: int, params: ModelParams):
        if client_id != self.target or round not in self.attack_rounds:
            return None
        if self.estimate is None:
            if self._latest_response is None:
                raise ProtocolError(
                    "target client never responded before the first attack round")
            self.estimate = self._latest_response
        return self.estimate

    def on_response(self, round: int, client_id: int, params: ModelParams):
        if client_id != self.target:
            return
        if round in self.attack_rounds and self.estimate is not None:
            pseudo_grad = self.estimate.values - params.values
            self.exchanges.append((self.estimate, params))
            self.estimate = adam_step(self._adam, self.estimate, pseudo_grad)
        else:
            self._latest_response = params

    def report(self, oracle: ModelParams | None = None) -> ReconstructionReport:
        if self.estimate is None:
            raise ProtocolError("no attack round was executed")
        err = None
        if oracle is not None:
            err = float(np.linalg.norm(self.estimate.values - oracle.values))
        return ReconstructionReport(theta_hat=self.estimate,
                                    n_messages=len(self.exchanges),
                                    l2_error=err)


class EchoHook:
    """The simple active variant: send the target its own previous model back."""

    def __init__(self, target: int, attack_rounds):
        self.target = target
        self.attack_rounds = frozenset(attack_rounds)
        self._latest_response: ModelParams | None = None

    def on_broadcast(self, round: int, client_id: int, params: ModelParams):
        if client_id != self.target or round not in self.attack_rounds:
            return None
        if self._latest_response is None:
            raise ProtocolError("target client never responded before the first attack round")
        return self._latest_response

    def on_response(self, round: int, client_id: int, params: ModelParams):
        if client_id == self.target:
            self._latest_response = params


def active_reconstruct(clients: list[ClientDataset], cfg: FLConfig, target: int,
                       n_attack_rounds: int, adam_lr: float,
                       beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                       defense: DpSgd | None = None, attack_start: int | None = None,
                       taps: tuple[int, ...] = (), shape: ModelShape | None = None,
                       init: ModelParams | None = None,
                       oracle: ModelParams | None = None):
    """Run the protocol with the Adam-emulating hook active on the tail rounds.

    Trains for cfg.num_rounds as usual, then keeps the protocol running for
    n_attack_rounds more rounds during which the hook rewrites every message
    to the target. Returns (report, training_result, hook).
    """
    if n_attack_rounds < 1:
        raise ValueError("need at least one attack round")
    start = cfg.num_rounds if attack_start is None else attack_start
    total = max(start + n_attack_rounds, cfg.num_rounds)
    run_cfg = FLConfig(num_rounds=total, batch_size=cfg.batch_size,
                       learning_rate=cfg.learning_rate, local_epochs=cfg.local_epochs,
                       weighting=cfg.weighting, participation=cfg.participation,
                       seed=cfg.seed)
    hook = ActiveAdamReconstructor(target, range(start, start + n_attack_rounds),
                                   lr=adam_lr, beta1=beta1, beta2=beta2, eps=eps)
    taps = tuple(sorted(set(taps) | {target}))
    result = run_training(clients, run_cfg, defense=defense, taps=taps,
                          adversary_hook=hook, shape=shape, init=init)
    return hook.report(oracle), result, hook


def fit_adam_full_batch(dataset: ClientDataset, start: ModelParams, iterations: int,
                        lr: float = 0.01, beta1: float = 0.9, beta2: float = 0.999,
                        eps: float = 1e-8) -> ModelParams:
    """Full-batch Adam on the local loss; returns the lowest-loss iterate."""
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    theta = start
    best, best_loss = theta, mean_loss(theta, dataset.X, dataset.y)
    for _ in range(iterations):
        g = grad_per_sample(theta, dataset.X, dataset.y).mean(axis=0)
        theta = adam_step(state, theta, g)
        loss = mean_loss(theta, dataset.X, dataset.y)
        if loss < best_loss:
            best, best_loss = theta, loss
    return best


def oracle_local_model(dataset: ClientDataset, shape: ModelShape, budget: int,
                       init: ModelParams | None = None, lr: float = 0.01,
                       rng: np.random.Generator | None = None) -> ModelParams:
    """The optimal local model an oracle would hand the adversary.

    Linear models are solved exactly (the budget is ignored); the MLP is fit
    by full-batch Adam for `budget` iterations keeping the best-loss iterate.
    """
    if budget < 1:
        raise ValueError("budget must be >= 1 iteration")
    if isinstance(shape, Linear):
        return solve_least_squares(dataset.X, dataset.y)
    start = init if init is not None else init_params(shape, rng or np.random.default_rng(0))
    return fit_adam_full_batch(dataset, start, budget, lr=lr)


def update_map_eigenvalues(H: np.ndarray, eta: float, n_samples: int, K: int) -> np.ndarray:
    """Eigenvalues of I - (I - (2 eta / S) H)^K, the map pseudo-gradients apply
    to (model - optimum). All must sit in (0, 1] for full-batch updates under
    the stability bound, which is what makes the passive solve well posed."""
    lam = np.linalg.eigvalsh(np.asarray(H, dtype=np.float64))
    return 1.0 - (1.0 - (2.0 * eta / n_samples) * lam) ** K


def thm1_error_scale(eta: float, sigma: float, d: int, local_epochs: int,
                     n_samples: int, batch_size: int, n_messages: int,
                     lambda_min: float, delta: float = 0.05) -> float:
    """Reconstruction-error scale with the hidden constant set to 1.

    eta * sigma * d * sqrt(d E ceil(S/B) (d + 1 + ln(2d/delta)) / (n lambda)).
    Only meaningful as an order-of-magnitude yardstick.
    """
    if lambda_min <= 0.0:
        return math.inf
    steps = local_epochs * math.ceil(n_samples / batch_size)
    inner = d * steps * (d + 1 + math.log(2 * d / delta)) / (n_messages * lambda_min)
    return eta * sigma * d * math.sqrt(inner)


def estimate_gradient_noise_scale(dataset: ClientDataset, theta: ModelParams,
                                  batch_size: int, rng: np.random.Generator,
                                  num_draws: int = 200) -> float:
    """Max per-component std of mini-batch gradients at theta.

    Proxy for the sub-Gaussian scale in the reconstruction error bound; the
    true scale is not observable.
    """
    n = dataset.num_samples
    draws = np.empty((num_draws, theta.shape.num_params))
    for i in range(num_draws):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        draws[i] = grad_per_sample(theta, dataset.X[idx], dataset.y[idx]).mean(axis=0)
    return float(np.max(np.std(draws, axis=0)))
