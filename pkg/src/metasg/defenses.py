"""Robust aggregation rules, post-training defenses, and the 3-d defense action."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import AggregationError, ConfigurationError
from .flcore import Dataset, ModelParams, forward

POSTTRAIN_MODES = ("clip", "prune")


def _stack(updates) -> np.ndarray:
    if len(updates) == 0:
        raise AggregationError("cannot aggregate an empty update list")
    try:
        U = np.asarray([np.asarray(u, dtype=np.float64) for u in updates])
    except ValueError as exc:
        raise AggregationError("updates have unequal lengths") from exc
    if U.ndim != 2:
        raise AggregationError("updates must be flat vectors of equal length")
    return U


def fedavg(updates) -> np.ndarray:
    return _stack(updates).mean(axis=0)


def coord_median(updates) -> np.ndarray:
    return np.median(_stack(updates), axis=0)


def trimmed_mean(updates, beta: float) -> np.ndarray:
    """Per coordinate, drop the ``floor(beta*m)`` smallest and largest values and average."""
    U = _stack(updates)
    m = U.shape[0]
    k = int(math.floor(beta * m))
    if beta < 0 or 2 * k >= m:
        raise AggregationError(f"trim rate {beta} removes every one of {m} updates")
    # sort even when k == 0 so the float sum does not depend on client order
    S = np.sort(U, axis=0)
    return S[k:m - k].mean(axis=0)


def krum(updates, f: int) -> tuple[np.ndarray, int]:
    """Update with the smallest sum of squared distances to its ``m-f-2`` nearest peers.

    Ties go to the lowest index.
    """
    U = _stack(updates)
    m = U.shape[0]
    if m < f + 3:
        raise AggregationError(f"krum needs m >= f + 3 (m={m}, f={f})")
    D = ((U[:, None, :] - U[None, :, :]) ** 2).sum(axis=2)
    nb = m - f - 2
    scores = np.empty(m)
    for i in range(m):
        d = np.delete(D[i], i)
        scores[i] = np.sort(d)[:nb].sum()
    idx = int(np.argmin(scores))
    return U[idx].copy(), idx


def norm_bound(updates, alpha: float) -> list[np.ndarray]:
    if alpha <= 0:
        raise ConfigurationError("norm threshold must be positive")
    out = []
    for g in _stack(updates):
        norm = float(np.linalg.norm(g))
        out.append(g * min(1.0, alpha / norm) if norm > 0 else g.copy())
    return out


def fltrust(updates, root_update) -> np.ndarray:
    """Cosine-trust weighted mean of magnitude-normalised client updates."""
    U = _stack(updates)
    g0 = np.asarray(root_update, dtype=np.float64)
    n0 = float(np.linalg.norm(g0))
    if n0 == 0.0:
        raise ConfigurationError("root update must be nonzero")
    norms = np.linalg.norm(U, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    scores = np.where(norms > 0, np.maximum(0.0, (U @ g0) / (safe * n0)), 0.0)
    if scores.sum() == 0.0:
        return np.zeros_like(g0)
    scaled = U * (n0 / safe)[:, None]
    return (scores[:, None] * scaled).sum(axis=0) / scores.sum()


def neuroclip(model: ModelParams, clip: float) -> ModelParams:
    """Clamp the final layer's weights and biases to ``[-clip, clip]``."""
    if clip <= 0:
        raise ConfigurationError("clip range must be positive")
    w = np.array(model.weights)
    sl = model.layer_slices()[-1]
    w[sl] = np.clip(w[sl], -clip, clip)
    return model.with_weights(w)


def hidden_activation_means(model: ModelParams, probe: Dataset) -> np.ndarray:
    _, outs = forward(model, probe.features, return_hidden=True)
    return np.abs(outs[-2]).mean(axis=0)


def prune(model: ModelParams, sigma: float, probe_data: Dataset) -> ModelParams:
    """Zero outgoing weights of the least active last-hidden-layer units.

    Ranks units by mean absolute activation on ``probe_data`` (lowest first,
    ties to the lower index) and masks ``floor(sigma * h)`` of them. A model
    without hidden layers is returned unchanged.
    """
    if not 0.0 <= sigma <= 1.0:
        raise ConfigurationError("mask rate must lie in [0, 1]")
    if len(model.layout) < 2:
        return model
    if len(probe_data) == 0:
        raise ConfigurationError("prune needs probe data")
    h = model.layout[-1][0]
    n_mask = int(math.floor(sigma * h))
    if n_mask == 0:
        return model
    act = hidden_activation_means(model, probe_data)
    order = np.lexsort((np.arange(h), act))
    masked = order[:n_mask]
    w = np.array(model.weights)
    sl = model.layer_slices()[-1]
    W = w[sl][: h * model.n_classes].reshape(h, model.n_classes)
    W[masked, :] = 0.0
    w[sl.start: sl.start + h * model.n_classes] = W.ravel()
    return model.with_weights(w)


# ---------------------------------------------------------------------------
# Compressed defense action
# ---------------------------------------------------------------------------

BETA_MAX = 0.5 * (1.0 - 1e-6)


@dataclass(frozen=True)
class DefenseAction:
    alpha: float
    beta: float
    psi: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError("alpha must be positive")
        if not 0.0 <= self.beta < 0.5:
            raise ConfigurationError("beta must lie in [0, 0.5)")
        if not self.psi >= 0:
            raise ConfigurationError("psi must be non-negative")


@dataclass(frozen=True)
class PostTrainSpec:
    mode: str = "clip"
    psi_low: float = 0.5
    psi_high: float = 10.0

    def __post_init__(self):
        if self.mode not in POSTTRAIN_MODES:
            raise ConfigurationError(f"post-train mode must be one of {POSTTRAIN_MODES}")
        if self.mode == "clip" and not 0 < self.psi_low <= self.psi_high:
            raise ConfigurationError("clip range bounds must satisfy 0 < low <= high")
        if self.mode == "prune" and not 0 <= self.psi_low <= self.psi_high <= 1:
            raise ConfigurationError("prune rate bounds must lie in [0, 1]")


def decode_defense_action(a, updates, post: PostTrainSpec, rng_free: bool = True) -> DefenseAction:
    """Map a policy action in [0,1]^3 to concrete ``(alpha, beta, psi)``.

    ``alpha`` scales the largest client update norm, ``beta`` spans [0, 0.5),
    and ``psi`` is log-uniform over the clip range (linear over the prune range).
    """
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    max_norm = max(float(np.max(np.linalg.norm(_stack(updates), axis=1))), 1e-12)
    alpha = max(float(a[0]), 1e-6) * max_norm
    beta = 0.5 * float(a[1]) * (1.0 - 1e-6)
    if post.mode == "clip":
        lo, hi = math.log(post.psi_low), math.log(post.psi_high)
        psi = math.exp(lo + float(a[2]) * (hi - lo))
    else:
        psi = post.psi_low + float(a[2]) * (post.psi_high - post.psi_low)
    return DefenseAction(alpha, beta, psi)


def posttrain_handle(action: DefenseAction, mode: str, probe_data: Dataset | None) -> Callable[[ModelParams], ModelParams]:
    if mode == "clip":
        return lambda model: neuroclip(model, action.psi)
    if mode == "prune":
        if probe_data is None:
            raise ConfigurationError("prune post-training needs probe data")
        return lambda model: prune(model, action.psi, probe_data)
    raise ConfigurationError(f"unknown post-train mode {mode!r}")


@dataclass(frozen=True)
class AuditRecord:
    rule: str
    params: dict
    selected: tuple[int, ...]


def apply_defense_action(action: DefenseAction, updates: Sequence[np.ndarray], mode: str,
                         probe_data: Dataset | None = None):
    """Normalize-then-trim aggregation plus a post-training handle.

    Returns ``(aggregate, handle, audit)``. The handle is only ever used to
    score or release a model; the state transition sees just the aggregate.
    """
    bounded = norm_bound(updates, action.alpha)
    agg = trimmed_mean(bounded, action.beta)
    handle = posttrain_handle(action, mode, probe_data)
    k = int(math.floor(action.beta * len(bounded)))
    audit = AuditRecord("normbound+trimmed_mean",
                        {"alpha": action.alpha, "beta": action.beta, "psi": action.psi,
                         "mode": mode, "trim_k": k},
                        tuple(range(len(bounded))))
    return agg, handle, audit


BASELINES = ("fedavg", "median", "trimmed_mean", "krum", "normbound", "fltrust", "clipmed",
             "neuroclip", "prune", "fltrust+nc")


def baseline_aggregate(name: str, updates, *, beta: float = 0.2, f: int = 1, alpha: float = 1.0,
                       root_update=None):
    """Fixed (non-learned) aggregation rules used as baselines.

    Returns ``(aggregate, audit)``.
    """
    if name in ("fedavg", "neuroclip", "prune"):
        agg, sel = fedavg(updates), tuple(range(len(updates)))
    elif name == "median":
        agg, sel = coord_median(updates), tuple(range(len(updates)))
    elif name == "trimmed_mean":
        agg, sel = trimmed_mean(updates, beta), tuple(range(len(updates)))
    elif name == "krum":
        agg, idx = krum(updates, f)
        sel = (idx,)
    elif name == "normbound":
        agg, sel = fedavg(norm_bound(updates, alpha)), tuple(range(len(updates)))
    elif name == "clipmed":
        agg, sel = coord_median(norm_bound(updates, alpha)), tuple(range(len(updates)))
    elif name in ("fltrust", "fltrust+nc"):
        if root_update is None:
            raise ConfigurationError("fltrust needs a root update")
        agg, sel = fltrust(updates, root_update), tuple(range(len(updates)))
    else:
        raise ConfigurationError(f"unknown baseline defense {name!r}")
    return agg, AuditRecord(name, {"beta": beta, "f": f, "alpha": alpha}, sel)
