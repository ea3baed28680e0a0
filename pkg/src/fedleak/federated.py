"""FedAvg protocol simulation with a message wiretap and a malicious-server hook.

The round loop is sequential and fully deterministic given (config, seed):
every client draws batches from its own generator derived from the master
seed, server-side client sampling and DP noise use separate streams, so
turning taps or attacks on never perturbs the training trajectory.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .models import (
    Linear,
    Mlp,
    ModelParams,
    ModelShape,
    ShapeError,
    grad_per_sample,
    init_params,
)

# spawn_key prefixes for the independent RNG streams
_SERVER_STREAM = 0
_CLIENT_STREAM = 1
_NOISE_STREAM = 2
_INIT_STREAM = 3


class ConfigError(ValueError):
    """Invalid federated configuration."""


class ProtocolError(RuntimeError):
    """The simulated protocol reached a state the attack cannot handle."""


@dataclass
class ClientDataset:
    """One client's design matrix and targets.

    ``sensitive_col`` marks the binary attribute the attacks try to infer;
    datasets used only as optimization fixtures may leave it unset. An
    optional held-out validation part can ride along.
    """

    X: np.ndarray
    y: np.ndarray
    sensitive_col: int | None = None
    X_val: np.ndarray | None = None
    y_val: np.ndarray | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.X.ndim != 2 or self.y.ndim != 1 or self.X.shape[0] != self.y.shape[0]:
            raise ShapeError("X must be (S, d) and y (S,) with matching S")
        if self.X.shape[0] < 1:
            raise ValueError("client dataset must contain at least one sample")
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y))):
            raise ValueError("client dataset contains non-finite entries")
        if self.sensitive_col is not None:
            col = self.X[:, self.sensitive_col]
            if not np.all((col == 0.0) | (col == 1.0)):
                raise ValueError("sensitive column must be binary 0/1")

    @property
    def num_samples(self) -> int:
        return self.X.shape[0]

    @property
    def width(self) -> int:
        return self.X.shape[1]

    @property
    def sensitive(self) -> np.ndarray:
        if self.sensitive_col is None:
            raise ValueError("dataset has no sensitive column")
        return self.X[:, self.sensitive_col]

    @property
    def public_cols(self) -> list[int]:
        return [j for j in range(self.width) if j != self.sensitive_col]

    @property
    def public_X(self) -> np.ndarray:
        """Design matrix without the sensitive column (adversary's view)."""
        return self.X[:, self.public_cols]


@dataclass(frozen=True)
class FLConfig:
    num_rounds: int
    batch_size: int
    learning_rate: float
    local_epochs: int = 1
    weighting: str = "uniform"          # "uniform" or "size"
    participation: int | None = None    # None = all clients every round
    seed: int = 0

    def __post_init__(self):
        if self.num_rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError("num_rounds, local_epochs and batch_size must be >= 1")
        if self.weighting not in ("uniform", "size"):
            raise ConfigError(f"unknown weighting {self.weighting!r}")
        if self.participation is not None and self.participation < 1:
            raise ConfigError("participation must be >= 1 clients per round")


@dataclass(frozen=True)
class DpSgd:
    """Per-sample gradient clipping plus Gaussian noise on the batch gradient."""

    clip_norm: float
    noise_std: float = 0.0

    def __post_init__(self):
        if not self.clip_norm > 0.0:
            raise ConfigError("clip_norm must be positive (may be inf)")
        if self.noise_std < 0.0:
            raise ConfigError("noise_std must be >= 0")


@dataclass
class LogEntry:
    round: int
    theta_in: ModelParams
    theta_out: ModelParams


@dataclass
class MessageLog:
    """Eavesdropped (round, model in, model out) pairs for one client."""

    client_id: int
    entries: list[LogEntry] = field(default_factory=list)
    active_rounds: set[int] = field(default_factory=set)

    @property
    def rounds(self) -> list[int]:
        return [e.round for e in self.entries]

    def append(self, round: int, theta_in: ModelParams, theta_out: ModelParams,
               active: bool = False):
        if self.entries and round <= self.entries[-1].round:
            raise ValueError("log rounds must be strictly increasing")
        if theta_in.shape != theta_out.shape:
            raise ShapeError("theta_in and theta_out shapes differ")
        self.entries.append(LogEntry(round, theta_in, theta_out))
        if active:
            self.active_rounds.add(round)

    def entry_for(self, round: int) -> LogEntry:
        for e in self.entries:
            if e.round == round:
                return e
        raise KeyError(f"round {round} not in log")


def client_rng(seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_CLIENT_STREAM, client_id)))


def noise_rng(seed: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_NOISE_STREAM, client_id)))


def server_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_SERVER_STREAM,)))


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    """A fresh shuffle split into ceil(n/B) chunks; the last may be smaller."""
    perm = rng.permutation(n)
    steps = math.ceil(n / batch_size)
    return [perm[k * batch_size:(k + 1) * batch_size] for k in range(steps)]


def clip_per_sample(grads: np.ndarray, clip_norm: float) -> np.ndarray:
    """Rescale each row to norm at most clip_norm. Rows of norm 0 pass through."""
    norms = np.linalg.norm(grads, axis=1)
    with np.errstate(divide="ignore"):
        scale = np.where(norms > 0.0, np.minimum(1.0, clip_norm / norms), 1.0)
    return grads * scale[:, None]


def local_update_fedavg(params: ModelParams, dataset: ClientDataset, cfg: FLConfig,
                        rng: np.random.Generator) -> ModelParams:
    """E epochs of mini-batch SGD on the local loss, reshuffled each epoch."""
    if dataset.width != params.shape.input_dim:
        raise ShapeError("dataset width does not match model input dim")
    theta = params
    for _ in range(cfg.local_epochs):
        for idx in _batch_indices(dataset.num_samples, cfg.batch_size, rng):
            g = grad_per_sample(theta, dataset.X[idx], dataset.y[idx]).mean(axis=0)
            theta = theta.with_values(theta.values - cfg.learning_rate * g)
    return theta


def local_update_dpsgd(params: ModelParams, dataset: ClientDataset, cfg: FLConfig,
                       defense: DpSgd, rng: np.random.Generator,
                       dp_rng: np.random.Generator) -> ModelParams:
    """FedAvg loop with per-sample clipping and Gaussian noise on each batch gradient.

    With noise_std=0 and clip_norm=inf this reproduces local_update_fedavg
    bitwise: batching draws come from the same client stream and the clip
    scale is exactly 1.0.
    """
    if dataset.width != params.shape.input_dim:
        raise ShapeError("dataset width does not match model input dim")
    theta = params
    for _ in range(cfg.local_epochs):
        for idx in _batch_indices(dataset.num_samples, cfg.batch_size, rng):
            per = grad_per_sample(theta, dataset.X[idx], dataset.y[idx])
            clipped = clip_per_sample(per, defense.clip_norm)
            total = clipped.sum(axis=0)
            if defense.noise_std > 0.0:
                total = total + dp_rng.standard_normal(total.size) * (
                    defense.noise_std * defense.clip_norm)
            g = total / len(idx)
            theta = theta.with_values(theta.values - cfg.learning_rate * g)
    return theta


def aggregate(updates: list[tuple[float, ModelParams]]) -> ModelParams:
    """Weighted average; weights are renormalized to sum to one."""
    if not updates:
        raise ConfigError("nothing to aggregate")
    weights = np.array([w for w, _ in updates], dtype=np.float64)
    if np.any(weights < 0.0) or weights.sum() <= 0.0:
        raise ConfigError("weights must be >= 0 with positive sum")
    shape = updates[0][1].shape
    for _, p in updates:
        if p.shape != shape:
            raise ShapeError("cannot aggregate models with different shapes")
    weights = weights / weights.sum()
    stacked = np.stack([p.values for _, p in updates])
    return ModelParams(weights @ stacked, shape)


def client_weights(clients: list[ClientDataset], weighting: str) -> np.ndarray:
    if weighting == "size":
        sizes = np.array([c.num_samples for c in clients], dtype=np.float64)
        return sizes / sizes.sum()
    return np.full(len(clients), 1.0 / len(clients))


@dataclass
class TrainingResult:
    final: ModelParams
    logs: dict[int, MessageLog]


def run_training(clients: list[ClientDataset], cfg: FLConfig,
                 defense: DpSgd | None = None,
                 taps: tuple[int, ...] = (),
                 adversary_hook=None,
                 shape: ModelShape | None = None,
                 init: ModelParams | None = None) -> TrainingResult:
    """Run the server round loop: select, broadcast, collect, aggregate.

    ``taps`` lists client ids whose exchanged messages are recorded. The
    optional ``adversary_hook`` models a malicious server / man in the
    middle: its ``on_broadcast(round, client_id, params)`` may return a
    replacement message for that client, and ``on_response(round,
    client_id, params)`` sees every returned update.
    """
    if not clients:
        raise ConfigError("need at least one client")
    if shape is None:
        shape = Linear(clients[0].width) if init is None else init.shape
    for c in clients:
        if c.width != shape.input_dim:
            raise ConfigError("all clients must match the model input dim")

    srv = server_rng(cfg.seed)
    crngs = [client_rng(cfg.seed, i) for i in range(len(clients))]
    nrngs = [noise_rng(cfg.seed, i) for i in range(len(clients))]
    weights = client_weights(clients, cfg.weighting)
    logs = {i: MessageLog(i) for i in taps}

    theta = init if init is not None else init_params(
        shape, np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(_INIT_STREAM,))))

    for t in range(cfg.num_rounds):
        if cfg.participation is None:
            selected = list(range(len(clients)))
        else:
            m = min(cfg.participation, len(clients))
            selected = sorted(srv.choice(len(clients), size=m, replace=False).tolist())
        updates = []
        for ci in selected:
            delivered = theta
            replaced = False
            if adversary_hook is not None:
                override = adversary_hook.on_broadcast(t, ci, theta)
                if override is not None:
                    delivered = override
                    replaced = True
            if defense is None:
                theta_out = local_update_fedavg(delivered, clients[ci], cfg, crngs[ci])
            else:
                theta_out = local_update_dpsgd(delivered, clients[ci], cfg, defense,
                                               crngs[ci], nrngs[ci])
            if adversary_hook is not None:
                adversary_hook.on_response(t, ci, theta_out)
            if ci in logs:
                logs[ci].append(t, delivered, theta_out, active=replaced)
            updates.append((weights[ci], theta_out))
        theta = aggregate(updates)
    return TrainingResult(final=theta, logs=logs)


def _fmt(v: float) -> str:
    # 17 significant digits round-trip any float64 through json
    return format(float(v), ".17g")


def save_message_log(log: MessageLog, path):
    """One JSON object per line: {round, phase: in|out, params: [...]}."""
    with open(path, "w") as fh:
        for e in log.entries:
            for phase, p in (("in", e.theta_in), ("out", e.theta_out)):
                vals = ", ".join(_fmt(v) for v in p.values)
                fh.write('{"round": %d, "phase": "%s", "params": [%s]}\n'
                         % (e.round, phase, vals))


def load_message_log(path, shape: ModelShape, client_id: int = 0,
                     active_rounds=()) -> MessageLog:
    """Rebuild a MessageLog from its JSON-lines file; values round-trip exactly."""
    pending: dict[int, dict[str, np.ndarray]] = {}
    order: list[int] = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            r = int(rec["round"])
            if r not in pending:
                pending[r] = {}
                order.append(r)
            pending[r][rec["phase"]] = np.array(rec["params"], dtype=np.float64)
    log = MessageLog(client_id)
    for r in order:
        pair = pending[r]
        if "in" not in pair or "out" not in pair:
            raise ValueError(f"round {r}: missing in/out phase in {path}")
        log.append(r, ModelParams(pair["in"], shape), ModelParams(pair["out"], shape))
    # the file format carries no attack schedule; the adversary knows his own
    log.active_rounds = set(active_rounds)
    return log
