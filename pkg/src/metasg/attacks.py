"""Attack domain: attack types, malicious update generators and attacker rewards."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigurationError
from .flcore import (ClientDataset, Dataset, ModelParams, PoisonMeta, Trigger, forward,
                     forward_loss, local_update, _log_softmax)

OBJECTIVES = ("untargeted", "targeted")
METHODS = ("NA", "IPM", "LMP", "BFL", "DBA", "RL", "BRL")
ADAPTIVE = ("RL", "BRL")

# Closed per-method config schema with defaults. ``n_attackers=None`` means
# "take the count from the FL config for this objective".
_SCHEMA: dict[str, dict] = {
    "NA": {},
    "IPM": {"epsilon": 2.0, "knowledge": "full", "n_attackers": None},
    "LMP": {"lambda_max": 10.0, "tol": 1e-3, "probe": "trimmed_mean", "probe_beta": 0.2,
            "probe_f": 1, "knowledge": "full", "n_attackers": None},
    "BFL": {"poison_ratio": 1.0, "scale": 2.0, "trigger": None, "target": 0, "n_attackers": None},
    "DBA": {"poison_ratio": 0.5, "scale": 1.0, "trigger": None, "target": 0, "n_attackers": None},
    "RL": {"norm_max": 4.0, "knowledge": "full", "n_attackers": None},
    "BRL": {"poison_ratio": 0.5, "scale_max": 4.0, "norm_max": 4.0, "trigger": None, "target": 0,
            "tradeoff": 0.5, "blackbox": False, "n_attackers": None},
}
_OBJECTIVE = {"NA": "untargeted", "IPM": "untargeted", "LMP": "untargeted", "RL": "untargeted",
              "BFL": "targeted", "DBA": "targeted", "BRL": "targeted"}


@dataclass(frozen=True)
class AttackType:
    """One ``(objective, method, configuration)`` entry of the attack domain."""

    objective: str
    method: str
    config: dict = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown attack method {self.method!r}")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"unknown attack objective {self.objective!r}")
        if self.objective != _OBJECTIVE[self.method]:
            raise ConfigurationError(f"{self.method} is a {_OBJECTIVE[self.method]} attack")
        schema = _SCHEMA[self.method]
        unknown = set(self.config) - set(schema)
        if unknown:
            raise ConfigurationError(f"unknown config keys for {self.method}: {sorted(unknown)}")
        cfg = {**schema, **self.config}
        if self.objective == "targeted":
            if cfg["trigger"] is None:
                raise ConfigurationError(f"{self.method} needs a trigger")
            cfg["trigger"] = tuple(int(i) for i in cfg["trigger"])
            if not 0.0 <= cfg["poison_ratio"] <= 1.0:
                raise ConfigurationError("poison_ratio must lie in [0, 1]")
        object.__setattr__(self, "config", cfg)
        if not self.name:
            object.__setattr__(self, "name", self.method)

    @classmethod
    def make(cls, method: str, name: str = "", **config) -> "AttackType":
        return cls(_OBJECTIVE[method], method, config, name)

    @property
    def adaptive(self) -> bool:
        return self.method in ADAPTIVE

    @property
    def targeted(self) -> bool:
        return self.objective == "targeted"

    @property
    def trigger(self) -> Trigger | None:
        if not self.targeted:
            return None
        return Trigger(self.config["trigger"], int(self.config["target"]))

    def to_dict(self) -> dict:
        cfg = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.config.items()
               if v is not None and v != _SCHEMA[self.method].get(k)}
        return {"name": self.name, "method": self.method, "config": cfg}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackType":
        extra = set(d) - {"name", "method", "config", "objective"}
        if extra:
            raise ConfigurationError(f"unknown attack-type keys {sorted(extra)}")
        method = d["method"]
        obj = d.get("objective", _OBJECTIVE.get(method, "untargeted"))
        return cls(obj, method, dict(d.get("config", {})), d.get("name", ""))


NO_ATTACK = AttackType.make("NA")


@dataclass(frozen=True)
class AttackAction:
    updates: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "updates", tuple(np.asarray(u, dtype=np.float64) for u in self.updates))

    def __len__(self):
        return len(self.updates)


def _replicate(u: np.ndarray, n: int) -> AttackAction:
    return AttackAction(tuple(u.copy() for _ in range(n)))


# ---------------------------------------------------------------------------
# Untargeted model poisoning
# ---------------------------------------------------------------------------


def ipm_update(benign_mean_estimate, epsilon: float, n_malicious: int = 1) -> AttackAction:
    """Inner-product manipulation: every attacker sends ``-epsilon * mean``."""
    if epsilon < 0:
        raise ConfigurationError("IPM scaling factor must be non-negative")
    mu = np.asarray(benign_mean_estimate, dtype=np.float64)
    return _replicate(-epsilon * mu, n_malicious)


@dataclass(frozen=True)
class LMPResult:
    action: AttackAction
    lam: float
    unbracketed: bool


def lmp_update(benign_updates: Sequence[np.ndarray], probe_aggregator: Callable,
               lambda_max: float, tol: float, n_malicious: int, grid: int = 32) -> LMPResult:
    """Directed-deviation attack with a bisected magnitude.

    The crafted update is ``mu - lam * sign(mu)`` for the benign mean ``mu``.
    ``lam`` passes when ``probe_aggregator(benign + crafted)`` lands on the far
    side of ``mu`` along ``-sign(mu)``. The largest passing ``lam`` of the first
    passing interval is located with a coarse scan and refined by bisection.
    """
    B = np.asarray([np.asarray(u, dtype=np.float64) for u in benign_updates])
    mu = B.mean(axis=0)
    s = np.sign(mu)
    if not np.any(s):
        return LMPResult(_replicate(np.zeros_like(mu), n_malicious), 0.0, False)

    def passes(lam: float) -> bool:
        crafted = mu - lam * s
        agg = probe_aggregator(list(B) + [crafted] * n_malicious)
        return float(s @ (np.asarray(agg) - mu)) < 0.0

    lo = None
    hi = None
    for k in range(1, grid + 1):
        lam = lambda_max * k / grid
        if passes(lam):
            lo = lam
        else:
            hi = lam
            break
    if lo is None and hi is not None:
        # probe between 0 and the first grid point
        lo_try, hi_try = 0.0, hi
        while hi_try - lo_try > tol:
            mid = 0.5 * (lo_try + hi_try)
            if passes(mid):
                lo = mid
                break
            hi_try = mid
        if lo is None:
            return LMPResult(_replicate(mu - lambda_max * s, n_malicious), lambda_max, True)
        hi = hi if lo < hi else hi_try
    if hi is None:
        return LMPResult(_replicate(mu - lambda_max * s, n_malicious), lambda_max, False)
    fail = hi
    while fail - lo > tol:
        mid = 0.5 * (lo + fail)
        if passes(mid):
            lo = mid
        else:
            fail = mid
    return LMPResult(_replicate(mu - lo * s, n_malicious), lo, False)


# ---------------------------------------------------------------------------
# Backdoors
# ---------------------------------------------------------------------------


def poison_dataset(client_data, trigger: Trigger, ratio: float, rng: np.random.Generator) -> ClientDataset:
    """Stamp the trigger on ``floor(ratio*|D|)`` random rows and relabel them."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigurationError("poison ratio must lie in [0, 1]")
    base = client_data.base if isinstance(client_data, ClientDataset) else client_data
    src = client_data.source_index if isinstance(client_data, ClientDataset) else None
    trigger.validate(base.dim, base.n_classes)
    n = len(base)
    k = int(math.floor(ratio * n))
    rows = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, dtype=np.int64)
    X = np.array(base.features)
    y = np.array(base.labels)
    if k:
        X[np.ix_(rows, list(trigger.indices))] = trigger.value
        y[rows] = trigger.target
    return ClientDataset(Dataset(X, y, base.n_classes), PoisonMeta(trigger, ratio, rows), src)


def backdoor_update(model: ModelParams, poisoned: ClientDataset, scale: float, lr: float,
                    iters: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    if scale < 1:
        raise ConfigurationError("backdoor scale must be at least 1")
    return scale * local_update(model, poisoned, lr, iters, batch_size, rng)


DBA_BLOCKS = 4


def dba_assign(trigger: Trigger, n_attackers: int, rng: np.random.Generator) -> list[Trigger]:
    """Give each targeted attacker one of four contiguous sub-triggers."""
    if len(trigger.indices) < DBA_BLOCKS:
        raise ConfigurationError("DBA needs a trigger with at least 4 indices")
    blocks = np.array_split(np.asarray(trigger.indices), DBA_BLOCKS)
    subs = [Trigger(tuple(b.tolist()), trigger.target, trigger.value) for b in blocks]
    order = np.array([i % DBA_BLOCKS for i in range(n_attackers)], dtype=np.int64)
    order = rng.permutation(order)
    return [subs[i] for i in order]


# ---------------------------------------------------------------------------
# RL-driven attacks: 3-d action decoding
# ---------------------------------------------------------------------------


@dataclass
class AttackContext:
    benign_mean: np.ndarray
    model: ModelParams | None = None
    poisoned: ClientDataset | None = None
    lr: float = 0.05
    iters: int = 1
    batch_size: int = 32
    rng: np.random.Generator | None = None


def decode_rl_action(a, xi: AttackType) -> tuple[float, float, float]:
    """Affine map from [0,1]^3 to ``(lambda1, lambda2, lambda3)``."""
    a = np.clip(np.asarray(a, dtype=np.float64), 0.0, 1.0)
    if xi.method == "BRL":
        return (1.0 + float(a[0]) * (xi.config["scale_max"] - 1.0), float(a[1]),
                float(a[2]) * xi.config["norm_max"])
    return float(a[0]), float(a[1]), float(a[2]) * xi.config["norm_max"]


def rl_attack_updates(lams: tuple[float, float, float], ctx: AttackContext, targeted: bool,
                      n_malicious: int) -> AttackAction:
    """Malicious update shared by all controlled clients for decoded ``lams``.

    Untargeted: ``-l1*mu + l2*z`` rescaled to norm ``l3*||mu||``.
    Targeted: ``(1-l2) * l1 * backdoor + l2 * mu`` with its norm capped at ``l3*||mu||``.
    """
    l1, l2, l3 = lams
    mu = np.asarray(ctx.benign_mean, dtype=np.float64)
    mu_norm = float(np.linalg.norm(mu))
    target_norm = l3 * mu_norm
    if not targeted:
        if ctx.rng is None:
            raise ConfigurationError("untargeted RL attack needs an rng for its perturbation")
        z = ctx.rng.normal(size=mu.shape)
        z /= max(np.linalg.norm(z), 1e-300)
        v = -l1 * mu + l2 * z
        vn = float(np.linalg.norm(v))
        u = v * (target_norm / vn) if vn > 0 else np.zeros_like(mu)
        return _replicate(u, n_malicious)
    if ctx.model is None or ctx.poisoned is None or ctx.rng is None:
        raise ConfigurationError("targeted RL attack needs model, poisoned data and rng")
    bd = local_update(ctx.model, ctx.poisoned, ctx.lr, ctx.iters, ctx.batch_size, ctx.rng)
    v = (1.0 - l2) * l1 * bd + l2 * mu
    vn = float(np.linalg.norm(v))
    if vn > target_norm:
        v = v * (target_norm / vn) if vn > 0 else v
    return _replicate(v, n_malicious)


def rl_attack_action_to_updates(a, xi: AttackType, ctx: AttackContext, n_malicious: int) -> AttackAction:
    return rl_attack_updates(decode_rl_action(a, xi), ctx, xi.targeted, n_malicious)


# ---------------------------------------------------------------------------
# Attacker rewards
# ---------------------------------------------------------------------------


def attack_objective(model: ModelParams, poisoned_sets: Sequence[Dataset],
                     clean_sets: Sequence[Dataset]) -> float:
    """Joint attack objective: mean loss on poisoned sets minus mean loss on clean sets."""
    poisoned_sets = [d for d in poisoned_sets if len(d)]
    clean_sets = [d for d in clean_sets if len(d)]
    if not poisoned_sets and not clean_sets:
        raise ConfigurationError("attack reward needs at least one attacker data set")
    val = 0.0
    if poisoned_sets:
        val += float(np.mean([forward_loss(model, d) for d in poisoned_sets]))
    if clean_sets:
        val -= float(np.mean([forward_loss(model, d) for d in clean_sets]))
    return val


def attack_reward(model: ModelParams, poisoned_sets: Sequence[Dataset], clean_sets: Sequence[Dataset]) -> float:
    return -attack_objective(model, poisoned_sets, clean_sets)


def surrogate_reward_blackbox(model: ModelParams, triggered_sets: Sequence[Dataset],
                              n_classes: int, clean_sets: Sequence[Dataset] = ()) -> tuple[float, int]:
    """Reward when the true target label is unknown.

    The targeted term uses the label that minimises the mean loss of the
    triggered inputs (lowest label on ties). Returns ``(reward, label)``.
    """
    sets = [d for d in triggered_sets if len(d)]
    if not sets:
        raise ConfigurationError("surrogate reward needs triggered inputs")
    per_label = np.zeros(n_classes)
    for d in sets:
        logp = _log_softmax(forward(model, d.features))
        per_label += -logp.mean(axis=0)
    per_label /= len(sets)
    label = int(np.argmin(per_label))
    val = float(per_label[label])
    clean_sets = [d for d in clean_sets if len(d)]
    if clean_sets:
        val -= float(np.mean([forward_loss(model, d) for d in clean_sets]))
    return -val, label


def stealth_gap(update: np.ndarray, benign_mean: np.ndarray) -> float:
    """Distance of a malicious update from the benign mean, relative to the mean's norm."""
    mn = max(float(np.linalg.norm(benign_mean)), 1e-12)
    return float(np.linalg.norm(np.asarray(update) - benign_mean)) / mn
