"""Simulated federated-learning world.

Synthetic data, non-i.i.d. client partitioning, dense classifiers with
hand-written backpropagation, local SGD and the server update rule.

Sign convention used everywhere: a benign client update is the sum of the
local minibatch gradients it took (its displacement divided by the local
learning rate), and the server applies ``w <- w - eta * Aggr(updates)``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigurationError, DataError, ShapeError

ACTIVATIONS = ("tanh", "linear")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ModelParams:
    """Flat weight vector plus a dense-layer layout.

    ``layout`` holds ``(n_in, n_out)`` per layer; each layer stores its
    ``n_in x n_out`` weight matrix (row-major) followed by ``n_out`` biases.
    """

    weights: np.ndarray
    layout: tuple[tuple[int, int], ...]
    activations: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "weights", _frozen(self.weights))
        object.__setattr__(self, "layout", tuple((int(a), int(b)) for a, b in self.layout))
        object.__setattr__(self, "activations", tuple(self.activations))
        if len(self.layout) != len(self.activations):
            raise ShapeError("one activation tag per layer is required")
        for act in self.activations:
            if act not in ACTIVATIONS:
                raise ConfigurationError(f"unknown activation {act!r}")
        for (_, n_out), (n_in, _) in zip(self.layout[:-1], self.layout[1:]):
            if n_out != n_in:
                raise ShapeError("consecutive layer shapes do not chain")
        expected = n_params(self.layout)
        if self.weights.ndim != 1 or self.weights.size != expected:
            raise ShapeError(f"weights length {self.weights.size} != {expected} implied by layout")
        if not np.all(np.isfinite(self.weights)):
            raise ShapeError("model weights must be finite")

    @property
    def n_features(self) -> int:
        return self.layout[0][0]

    @property
    def n_classes(self) -> int:
        return self.layout[-1][1]

    def with_weights(self, weights) -> "ModelParams":
        return ModelParams(weights, self.layout, self.activations)

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only ``(W, b)`` views into the flat vector."""
        out, pos = [], 0
        for n_in, n_out in self.layout:
            W = self.weights[pos:pos + n_in * n_out].reshape(n_in, n_out)
            pos += n_in * n_out
            b = self.weights[pos:pos + n_out]
            pos += n_out
            out.append((W, b))
        return out

    def layer_slices(self) -> list[slice]:
        out, pos = [], 0
        for n_in, n_out in self.layout:
            size = n_in * n_out + n_out
            out.append(slice(pos, pos + size))
            pos += size
        return out


def n_params(layout) -> int:
    return sum(a * b + b for a, b in layout)


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(0, 0)
        y = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if X.ndim != 2:
            raise ShapeError("features must be a 2-d matrix")
        if X.shape[0] != y.shape[0]:
            raise ShapeError("feature-row count must equal label count")
        if y.size and (y.min() < 0 or y.max() >= self.n_classes):
            raise DataError("labels must lie in [0, n_classes)")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y, np.int64))
        object.__setattr__(self, "n_classes", int(self.n_classes))

    def __len__(self) -> int:
        return int(self.labels.size)

    @property
    def dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)

    def class_priors(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes) / max(len(self), 1)


@dataclass(frozen=True)
class Trigger:
    """Backdoor trigger: the listed feature indices are overwritten with ``value``."""

    indices: tuple[int, ...]
    target: int
    value: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(int(i) for i in self.indices))
        if len(set(self.indices)) != len(self.indices):
            raise ConfigurationError("trigger indices must be distinct")

    def validate(self, dim: int, n_classes: int):
        if any(i < 0 or i >= dim for i in self.indices):
            raise ConfigurationError("trigger index outside the feature dimension")
        if not 0 <= self.target < n_classes:
            raise ConfigurationError("trigger target label outside [0, C)")

    def apply(self, features: np.ndarray) -> np.ndarray:
        X = np.array(features, dtype=np.float64, copy=True)
        X[:, list(self.indices)] = self.value
        return X


@dataclass(frozen=True)
class PoisonMeta:
    trigger: Trigger
    ratio: float
    rows: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rows", _frozen(self.rows, np.int64))


@dataclass(frozen=True)
class ClientDataset:
    base: Dataset
    poison_meta: PoisonMeta | None = None
    source_index: np.ndarray | None = None

    def __post_init__(self):
        if self.source_index is not None:
            src = _frozen(self.source_index, np.int64)
            if src.size != len(self.base):
                raise ShapeError("source_index must have one entry per row")
            object.__setattr__(self, "source_index", src)
        pm = self.poison_meta
        if pm is not None and pm.rows.size != int(np.floor(pm.ratio * len(self.base))):
            raise DataError("poisoned row count must equal floor(ratio * |D|)")

    def __len__(self):
        return len(self.base)

    def poisoned_rows(self) -> Dataset:
        """The altered subset D' (empty when the client is clean)."""
        if self.poison_meta is None:
            return self.base.subset([])
        return self.base.subset(self.poison_meta.rows)


@dataclass(frozen=True)
class Metrics:
    clean_loss: float
    clean_accuracy: float
    backdoor_accuracy: float

    def __post_init__(self):
        for name in ("clean_accuracy", "backdoor_accuracy"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.clean_loss < 0:
            raise ValueError("clean_loss must be non-negative")


@dataclass(frozen=True)
class FLConfig:
    n_clients: int = 20
    n_targeted: int = 0
    n_untargeted: int = 0
    subsample_rate: float = 0.5
    local_lr: float = 0.05
    server_lr: float = 1.0
    local_iters: int = 1
    batch_size: int = 32
    rounds: int = 50
    non_iid_q: float = 0.5
    seed: int = 0
    lr_schedule: tuple[float, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigurationError("n_clients must be positive")
        if self.n_targeted < 0 or self.n_untargeted < 0:
            raise ConfigurationError("attacker counts must be non-negative")
        if self.n_targeted + self.n_untargeted > self.n_clients:
            raise ConfigurationError("M1 + M2 must not exceed n_clients")
        if not 0.0 < self.subsample_rate <= 1.0:
            raise ConfigurationError("subsample_rate must lie in (0, 1]")
        if self.local_iters < 1 or self.batch_size < 1 or self.rounds < 1:
            raise ConfigurationError("local_iters, batch_size and rounds must be positive")
        object.__setattr__(self, "lr_schedule", tuple(float(v) for v in self.lr_schedule))

    @property
    def n_malicious(self) -> int:
        return self.n_targeted + self.n_untargeted

    def server_lr_at(self, t: int) -> float:
        """Server step size for round ``t``; an explicit schedule overrides the constant."""
        if self.lr_schedule:
            return self.lr_schedule[min(t, len(self.lr_schedule) - 1)]
        return self.server_lr


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

BLOB_SIGMA = 0.1


def generate_synthetic_dataset(n_examples: int, n_classes: int, dim: int,
                               class_separation: float, seed: int,
                               sigma: float = BLOB_SIGMA) -> Dataset:
    """Class-conditional Gaussian blobs with means on the vertices of a grid.

    Each class mean is ``0.5 + (separation * sigma / 2) * v_c`` for a distinct
    sign vector ``v_c``, so any two means are at least ``separation * sigma``
    apart. Features are clipped to [0, 1]; labels are balanced and shuffled.
    """
    if n_classes < 2 or dim < 2:
        raise ConfigurationError("need at least 2 classes and 2 features")
    if class_separation <= 0 or sigma <= 0:
        raise ConfigurationError("class_separation and sigma must be positive")
    if n_classes > 2 ** dim:
        raise ConfigurationError("not enough grid vertices for the requested classes")
    if n_examples < 0:
        raise ConfigurationError("n_examples must be non-negative")
    rng = np.random.default_rng(seed)
    codes = rng.choice(2 ** dim, size=n_classes, replace=False)
    signs = ((codes[:, None] >> np.arange(dim)) & 1) * 2.0 - 1.0
    means = 0.5 + 0.5 * class_separation * sigma * signs
    labels = rng.permutation(np.arange(n_examples) % n_classes)
    noise = rng.normal(0.0, sigma, size=(n_examples, dim))
    X = np.clip(means[labels] + noise, 0.0, 1.0) if n_examples else np.zeros((0, dim))
    return Dataset(X, labels, n_classes)


def partition_non_iid(dataset: Dataset, n_clients: int, q: float, seed: int) -> list[ClientDataset]:
    """Split ``dataset`` across clients arranged in ``C`` label groups.

    Client ``i`` belongs to group ``i % C``. A row labelled ``c`` is sent to
    group ``c`` with probability ``q`` and to each other group with
    probability ``(1 - q) / (C - 1)``; rows inside a group are shuffled and
    dealt evenly to the group's clients.
    """
    C = dataset.n_classes
    if q < 1.0 / C - 1e-12 or q > 1.0:
        raise ConfigurationError(f"non-i.i.d. level q={q} must lie in [1/C, 1]")
    if n_clients < C:
        raise ConfigurationError("need at least one client per label group")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    other = (1.0 - q) / (C - 1)
    probs = np.full((C, C), other)
    np.fill_diagonal(probs, q)
    cdf = np.cumsum(probs[dataset.labels], axis=1)
    u = rng.random(n)
    groups = np.minimum((u[:, None] >= cdf).sum(axis=1), C - 1)

    members = [list(range(g, n_clients, C)) for g in range(C)]
    assigned: list[np.ndarray] = [np.zeros(0, dtype=np.int64)] * n_clients
    for g in range(C):
        rows = rng.permutation(np.flatnonzero(groups == g))
        for client, chunk in zip(members[g], np.array_split(rows, len(members[g]))):
            assigned[client] = np.sort(chunk)
    return [ClientDataset(dataset.subset(idx), None, idx) for idx in assigned]


def group_of(client: int, n_classes: int) -> int:
    return client % n_classes


def sample_root_data(dataset: Dataset, n: int, rng: np.random.Generator,
                     q_root: float | None = None, reference_class: int = 0) -> Dataset:
    """Server root data drawn from the training pool.

    ``q_root=None`` draws uniformly without replacement; otherwise each draw
    picks ``reference_class`` with probability ``q_root`` and every other class
    with probability ``(1 - q_root) / (C - 1)``.
    """
    if n > len(dataset):
        raise DataError("root sample larger than the pool")
    if q_root is None:
        return dataset.subset(np.sort(rng.choice(len(dataset), size=n, replace=False)))
    C = dataset.n_classes
    p = np.full(C, (1.0 - q_root) / (C - 1))
    p[reference_class] = q_root
    by_class = [rng.permutation(np.flatnonzero(dataset.labels == c)) for c in range(C)]
    want = rng.choice(C, size=n, p=p)
    picked, used = [], np.zeros(C, dtype=np.int64)
    for c in want:
        if used[c] < by_class[c].size:
            picked.append(by_class[c][used[c]])
            used[c] += 1
    return dataset.subset(np.sort(np.array(picked, dtype=np.int64)))


def save_dataset_csv(dataset: Dataset, path, seed: int | None = None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(f"# metasg dataset seed={seed} n_classes={dataset.n_classes}\n")
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(dataset.dim)] + ["label"])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [int(y)])
    return path


def load_dataset_csv(path, n_classes: int | None = None) -> Dataset:
    path = Path(path)
    rows, meta_classes = [], None
    with path.open(newline="") as fh:
        lines = [ln for ln in fh]
    for ln in lines:
        if ln.startswith("#") and "n_classes=" in ln:
            meta_classes = int(ln.split("n_classes=")[1].split()[0])
    reader = csv.reader(ln for ln in lines if not ln.startswith("#"))
    header = next(reader)
    if header[-1] != "label" or header[:-1] != [f"f{j}" for j in range(len(header) - 1)]:
        raise DataError("CSV header must be f0..f{d-1},label")
    for r in reader:
        rows.append(r)
    d = len(header) - 1
    X = np.array([[float(v) for v in r[:-1]] for r in rows], dtype=np.float64).reshape(len(rows), d)
    y = np.array([int(r[-1]) for r in rows], dtype=np.int64)
    C = n_classes or meta_classes or (int(y.max()) + 1 if y.size else 2)
    return Dataset(X, y, C)


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------


def init_model(layer_dims: Sequence[int], rng: np.random.Generator, scale: float = 1.0,
               hidden_activation: str = "tanh") -> ModelParams:
    """Dense classifier ``d -> h1 -> ... -> C`` with Glorot-style random weights."""
    layout = tuple(zip(layer_dims[:-1], layer_dims[1:]))
    acts = tuple([hidden_activation] * (len(layout) - 1) + ["linear"])
    parts = []
    for n_in, n_out in layout:
        parts.append(rng.normal(0.0, scale / np.sqrt(n_in), size=n_in * n_out))
        parts.append(np.zeros(n_out))
    return ModelParams(np.concatenate(parts), layout, acts)


def softmax_regression(dim: int, n_classes: int, rng: np.random.Generator, scale: float = 1.0) -> ModelParams:
    return init_model([dim, n_classes], rng, scale)


def mlp(dim: int, hidden: int, n_classes: int, rng: np.random.Generator, scale: float = 1.0) -> ModelParams:
    """Two tanh hidden layers of width ``hidden``."""
    return init_model([dim, hidden, hidden, n_classes], rng, scale)


def _as_xy(batch):
    if isinstance(batch, ClientDataset):
        batch = batch.base
    if isinstance(batch, Dataset):
        return batch.features, batch.labels
    X, y = batch
    return np.asarray(X, dtype=np.float64), np.asarray(y, dtype=np.int64)


def _check(model: ModelParams, X: np.ndarray):
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ShapeError(f"batch has {X.shape[-1] if X.ndim == 2 else '?'} features, "
                         f"model expects {model.n_features}")


def forward(model: ModelParams, X: np.ndarray, return_hidden: bool = False):
    """Logits, and optionally the list of layer outputs (post-activation)."""
    _check(model, X)
    h = X
    outs = [X]
    for (W, b), act in zip(model.layers(), model.activations):
        h = h @ W + b
        if act == "tanh":
            h = np.tanh(h)
        outs.append(h)
    return (h, outs) if return_hidden else h


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def forward_loss(model: ModelParams, batch) -> float:
    """Mean cross-entropy of ``model`` on ``batch``."""
    X, y = _as_xy(batch)
    if y.size == 0:
        raise DataError("empty batch")
    logits = forward(model, X)
    if y.max() >= model.n_classes:
        raise ShapeError("label exceeds the model's class count")
    return float(-_log_softmax(logits)[np.arange(y.size), y].mean())


def per_example_loss(model: ModelParams, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return -_log_softmax(forward(model, X))[np.arange(y.size), y]


def grad(model: ModelParams, batch) -> np.ndarray:
    """Analytic gradient of :func:`forward_loss` w.r.t. the flat weights."""
    X, y = _as_xy(batch)
    if y.size == 0:
        raise DataError("empty batch")
    logits, outs = forward(model, X, return_hidden=True)
    n = y.size
    delta = np.exp(_log_softmax(logits))
    delta[np.arange(n), y] -= 1.0
    delta /= n
    grads = []
    layers = model.layers()
    for li in range(len(layers) - 1, -1, -1):
        W, _ = layers[li]
        if model.activations[li] == "tanh":
            delta = delta * (1.0 - outs[li + 1] ** 2)
        grads.append((outs[li].T @ delta, delta.sum(axis=0)))
        if li:
            delta = delta @ W.T
    flat = []
    for gW, gb in reversed(grads):
        flat.append(gW.ravel())
        flat.append(gb)
    return np.concatenate(flat)


def local_update(model: ModelParams, client_data, lr: float, iters: int, batch_size: int,
                 rng: np.random.Generator) -> np.ndarray:
    """Run ``iters`` local SGD steps and return the summed minibatch gradients.

    A batch size at least the client's row count uses all rows in order.
    """
    X, y = _as_xy(client_data)
    n = y.size
    if n == 0:
        raise DataError("client holds no data")
    w = np.array(model.weights)
    total = np.zeros_like(w)
    for _ in range(iters):
        if batch_size >= n:
            Xb, yb = X, y
        else:
            idx = rng.choice(n, size=batch_size, replace=False)
            Xb, yb = X[idx], y[idx]
        g = grad(model.with_weights(w), (Xb, yb))
        total += g
        w = w - lr * g
    return total


def global_step(model: ModelParams, aggregated_update, eta: float) -> ModelParams:
    """``w - eta * u``."""
    u = np.asarray(aggregated_update, dtype=np.float64)
    if u.shape != model.weights.shape:
        raise ShapeError("update length does not match model weights")
    return model.with_weights(model.weights - eta * u)


def predict(model: ModelParams, X: np.ndarray) -> np.ndarray:
    return np.argmax(forward(model, X), axis=1)


def evaluate(model: ModelParams, eval_set: Dataset, trigger: Trigger | None = None,
             target: int | None = None) -> Metrics:
    """Clean loss/accuracy and backdoor success rate.

    Backdoor accuracy is the fraction of non-target rows that the model
    assigns to the target label once the trigger is stamped on them.
    """
    if len(eval_set) == 0:
        raise DataError("empty evaluation set")
    X, y = eval_set.features, eval_set.labels
    logits = forward(model, X)
    loss = float(-_log_softmax(logits)[np.arange(y.size), y].mean())
    acc = float(np.mean(np.argmax(logits, axis=1) == y))
    bac = 0.0
    if trigger is not None:
        tgt = trigger.target if target is None else int(target)
        keep = y != tgt
        if keep.any():
            pred = predict(model, trigger.apply(X[keep]))
            bac = float(np.mean(pred == tgt))
    elif target is not None:
        raise ConfigurationError("a target label needs a trigger")
    return Metrics(max(loss, 0.0), acc, bac)
