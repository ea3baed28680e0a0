"""Dataset generation and ingestion.

Covers the synthetic least-squares recipe used throughout the test bench,
the tridiagonal hard instance that stalls FedAvg one coordinate per round,
the two-cluster heterogeneity splitter, and CSV ingestion for user-supplied
tabular data.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .federated import ClientDataset


class IngestionError(ValueError):
    """CSV or schema problem; the message carries the row/column location."""


def generate_toy(num_clients: int, samples_per_client: int, d: int = 11,
                 noise_std: float = 0.1, rng: np.random.Generator | None = None,
                 sensitive_coef: float | None = None):
    """Synthetic federated least-squares clients sharing one true model.

    Each client draws d-2 numeric features from uniform[0, 1), one binary
    sensitive feature from Bernoulli(1/2), and carries an intercept column;
    targets are X theta + Gaussian noise. theta is standard normal and shared
    across clients. ``sensitive_coef`` optionally pins theta at the sensitive
    coordinate, for scenarios that need a fixed attribute effect.

    Returns (clients, theta_true). The sensitive column is d-2, the
    intercept is last.
    """
    if d < 3:
        raise ValueError("need at least one numeric feature, the sensitive bit, and a bias")
    if samples_per_client < d:
        raise ValueError("each client needs at least d samples")
    if rng is None:
        rng = np.random.default_rng()
    theta = rng.standard_normal(d)
    if sensitive_coef is not None:
        theta[d - 2] = sensitive_coef
    clients = []
    for _ in range(num_clients):
        X = np.empty((samples_per_client, d))
        X[:, : d - 2] = rng.random((samples_per_client, d - 2))
        X[:, d - 2] = rng.integers(0, 2, size=samples_per_client).astype(np.float64)
        X[:, d - 1] = 1.0
        y = X @ theta + noise_std * rng.standard_normal(samples_per_client)
        clients.append(ClientDataset(X, y, sensitive_col=d - 2))
    return clients, theta


def hard_instance_optimum(d: int) -> np.ndarray:
    """Closed-form optimum 1 - i/(d+1) of the hard client's local problem."""
    i = np.arange(1, d + 1, dtype=np.float64)
    return 1.0 - i / (d + 1)


def generate_hard_instance(d: int, num_other_clients: int = 1) -> list[ClientDataset]:
    """Worst-case federated client whose information leaks one coordinate per round.

    The target client (first in the list) has X upper bidiagonal so that
    X^T X is tridiagonal with unit diagonal and -1/2 off-diagonal, and
    X^T y = (1/2, 0, ..., 0). Every other client holds X = I, y = 0. Under
    full-batch FedAvg from zero, coordinate t+1 of the target's outgoing
    model becomes nonzero only at round t.

    These are pure optimization fixtures: no sensitive column.
    """
    if d < 2:
        raise ValueError("hard instance needs d >= 2")
    X = np.zeros((d, d))
    X[0, 0] = 1.0
    for i in range(d - 1):
        X[i, i + 1] = -1.0 / (2.0 * X[i, i])
        X[i + 1, i + 1] = math.sqrt(1.0 - 1.0 / (4.0 * X[i, i] ** 2))
    y = np.zeros(d)
    y[0] = 0.5
    for i in range(d - 1):
        y[i + 1] = -X[i, i + 1] * y[i] / X[i + 1, i + 1]
    clients = [ClientDataset(X, y)]
    for _ in range(num_other_clients):
        clients.append(ClientDataset(np.eye(d), np.zeros(d)))
    return clients


@dataclass(frozen=True)
class SplitConfig:
    heterogeneity: float = 0.5
    num_clients: int = 10
    val_fraction: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.heterogeneity <= 0.5:
            raise ValueError("heterogeneity must lie in [0, 0.5]")
        if self.num_clients < 2 or self.num_clients % 2 != 0:
            raise ValueError("the two-cluster split needs an even client count")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in [0, 1)")


def train_val_split(ds: ClientDataset, val_fraction: float,
                    rng: np.random.Generator) -> ClientDataset:
    """Hold out a validation fraction; returns a dataset carrying both parts."""
    if val_fraction <= 0.0:
        return ds
    n = ds.num_samples
    n_val = int(round(val_fraction * n))
    if n_val == 0 or n_val >= n:
        return ds
    perm = rng.permutation(n)
    val, train = perm[:n_val], perm[n_val:]
    return ClientDataset(ds.X[train], ds.y[train], sensitive_col=ds.sensitive_col,
                         X_val=ds.X[val], y_val=ds.y[val])


def split_heterogeneous(pool: ClientDataset, cfg: SplitConfig,
                        rng: np.random.Generator) -> list[ClientDataset]:
    """Two-cluster split with a tunable heterogeneity level.

    The high cluster collects rows where the sensitive bit agrees with being
    above the label median (s=1 and y>med, or s=0 and y<=med); the low
    cluster is the rest. Both are balanced to the smaller size, a (0.5 - h)
    fraction is swapped between them, then each cluster is divided among
    half of the clients. At h=0.5 nothing is swapped and the clusters stay
    maximally distinct.
    """
    s = pool.sensitive
    y = pool.y
    med = float(np.median(y))
    mask_h = ((s == 1.0) & (y > med)) | ((s == 0.0) & (y <= med))
    idx_h = np.flatnonzero(mask_h)
    idx_l = np.flatnonzero(~mask_h)
    if len(idx_h) == 0 or len(idx_l) == 0:
        raise ValueError("one correlation cluster is empty; cannot split")
    k = min(len(idx_h), len(idx_l))
    d_h = rng.choice(idx_h, size=k, replace=False)
    d_l = rng.choice(idx_l, size=k, replace=False)
    n_swap = math.floor((0.5 - cfg.heterogeneity) * k)
    swap_h = rng.choice(k, size=n_swap, replace=False)
    swap_l = rng.choice(k, size=n_swap, replace=False)
    keep_h = np.setdiff1d(np.arange(k), swap_h)
    keep_l = np.setdiff1d(np.arange(k), swap_l)
    final_h = np.concatenate([d_h[keep_h], d_l[swap_l]])
    final_l = np.concatenate([d_l[keep_l], d_h[swap_h]])
    half = cfg.num_clients // 2
    clients = []
    for chunk in np.array_split(final_l, half) + np.array_split(final_h, half):
        ds = ClientDataset(pool.X[chunk], pool.y[chunk], sensitive_col=pool.sensitive_col)
        clients.append(train_val_split(ds, cfg.val_fraction, rng))
    return clients


def split_iid(pool: ClientDataset, num_clients: int, rng: np.random.Generator,
              val_fraction: float = 0.1) -> list[ClientDataset]:
    """Shuffle the pool and deal it out evenly."""
    perm = rng.permutation(pool.num_samples)
    clients = []
    for chunk in np.array_split(perm, num_clients):
        ds = ClientDataset(pool.X[chunk], pool.y[chunk], sensitive_col=pool.sensitive_col)
        clients.append(train_val_split(ds, val_fraction, rng))
    return clients


def load_schema(path) -> dict:
    with open(path) as fh:
        schema = json.load(fh)
    for key in ("target", "sensitive", "columns"):
        if key not in schema:
            raise IngestionError(f"schema missing required key {key!r}")
    if "column" not in schema["sensitive"] or "one" not in schema["sensitive"]:
        raise IngestionError("schema sensitive entry needs 'column' and 'one'")
    return schema


def _parse_float(cell: str, row: int, col: str) -> float:
    try:
        return float(cell)
    except ValueError:
        raise IngestionError(f"row {row}, column {col!r}: cannot parse {cell!r} as a number")


def ingest_csv(path, schema: dict) -> ClientDataset:
    """Read a headered CSV into a standardized design matrix.

    Numeric columns are z-scored over the ingested data, categoricals are
    one-hot encoded with levels in sorted order, binary columns map the
    schema's 'one' value to 1. Column layout is deterministic: numerics and
    binaries in schema order, then one-hot blocks, then the sensitive bit,
    then an intercept column of ones.
    """
    target_col = schema["target"]
    sens_col, sens_one = schema["sensitive"]["column"], str(schema["sensitive"]["one"])
    roles = schema["columns"]

    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestionError("CSV has no header row")
        needed = [target_col, sens_col] + list(roles)
        for name in needed:
            if name not in reader.fieldnames:
                raise IngestionError(f"column {name!r} missing from CSV header")
        rows = list(reader)
    if not rows:
        raise IngestionError("CSV contains no data rows")

    numeric_cols = [c for c, spec in roles.items() if spec["role"] == "numeric"]
    binary_cols = [(c, str(spec["one"])) for c, spec in roles.items() if spec["role"] == "binary"]
    cat_cols = [c for c, spec in roles.items() if spec["role"] == "categorical"]

    n = len(rows)
    numeric = np.empty((n, len(numeric_cols)))
    for j, c in enumerate(numeric_cols):
        for i, row in enumerate(rows):
            numeric[i, j] = _parse_float(row[c], i, c)
    binary = np.empty((n, len(binary_cols)))
    for j, (c, one) in enumerate(binary_cols):
        binary[:, j] = [1.0 if row[c] == one else 0.0 for row in rows]

    onehot_blocks = []
    for c in cat_cols:
        mapping = roles[c].get("map")
        raw = [mapping.get(row[c], row[c]) if mapping else row[c] for row in rows]
        levels = sorted(set(raw))
        block = np.zeros((n, len(levels)))
        index = {lvl: j for j, lvl in enumerate(levels)}
        for i, v in enumerate(raw):
            block[i, index[v]] = 1.0
        onehot_blocks.append(block)

    sensitive = np.array([1.0 if row[sens_col] == sens_one else 0.0 for row in rows])
    y = np.array([_parse_float(row[target_col], i, target_col)
                  for i, row in enumerate(rows)])

    if numeric.size:
        mean = numeric.mean(axis=0)
        std = numeric.std(axis=0)
        std = np.where(std > 0.0, std, 1.0)  # constant columns stay centered at 0
        numeric = (numeric - mean) / std

    parts = [numeric, binary] + onehot_blocks + [sensitive[:, None], np.ones((n, 1))]
    X = np.hstack(parts)
    sensitive_idx = X.shape[1] - 2
    return ClientDataset(X, y, sensitive_col=sensitive_idx)


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def save_dataset_jsonl(ds: ClientDataset, path):
    """Same JSON-lines float format as the message logs; round-trips exactly."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"kind": "client_dataset",
                             "sensitive_col": ds.sensitive_col,
                             "num_samples": int(ds.num_samples),
                             "width": int(ds.width)}) + "\n")
        for i in range(ds.num_samples):
            xs = ", ".join(_fmt(v) for v in ds.X[i])
            fh.write('{"x": [%s], "y": %s}\n' % (xs, _fmt(ds.y[i])))
        if ds.X_val is not None:
            for i in range(ds.X_val.shape[0]):
                xs = ", ".join(_fmt(v) for v in ds.X_val[i])
                fh.write('{"x": [%s], "y": %s, "val": true}\n' % (xs, _fmt(ds.y_val[i])))


def load_dataset_jsonl(path) -> ClientDataset:
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("kind") != "client_dataset":
            raise IngestionError(f"{path} is not a serialized client dataset")
        X, y, Xv, yv = [], [], [], []
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("val"):
                Xv.append(rec["x"])
                yv.append(rec["y"])
            else:
                X.append(rec["x"])
                y.append(rec["y"])
    return ClientDataset(
        np.array(X, dtype=np.float64), np.array(y, dtype=np.float64),
        sensitive_col=header["sensitive_col"],
        X_val=np.array(Xv, dtype=np.float64) if Xv else None,
        y_val=np.array(yv, dtype=np.float64) if yv else None,
    )
