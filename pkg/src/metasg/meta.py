"""Pre-training loops (meta-RL, Reptile and debiased meta-SG) and online adaptation."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigurationError, ProtocolError
from .policy import (adapted_params, debiased_meta_grad, episode_returns, params_digest,
                     pg_estimate)

VARIANTS = ("meta-rl", "reptile", "debiased")


@dataclass(frozen=True)
class MetaTrainConfig:
    N_D: int = 100
    N_A: int = 5
    K: int = 2
    kappa_D: float = 0.1
    kappa_A: float = 0.1
    eta: float = 0.1
    N_b: int = 64
    variant: str = "reptile"
    seed: int = 0
    adapt_steps: int = 1
    pg_mode: str = "reward_to_go"
    N_b2: int = 1
    inner_size: int | None = None
    step_decay: float = 0.0
    max_step: float | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}")
        for name in ("N_D", "K", "N_b", "N_b2", "adapt_steps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.max_step is not None and self.max_step <= 0:
            raise ConfigurationError("max_step must be positive")
        if self.step_decay < 0:
            raise ConfigurationError("step_decay must be non-negative")
        if self.N_A < 0 or self.kappa_D < 0 or self.kappa_A < 0 or self.eta < 0:
            raise ConfigurationError("iteration counts and step sizes must be non-negative")

    def rate(self, t: int) -> float:
        """Multiplier ``1 / (1 + step_decay * t)`` applied to both players' step sizes."""
        return 1.0 / (1.0 + self.step_decay * t)

    def cap(self, step: np.ndarray) -> np.ndarray:
        """Rescale an outer step to norm ``max_step`` when it is longer."""
        if self.max_step is None:
            return step
        n = float(np.linalg.norm(step))
        return step * (self.max_step / n) if n > self.max_step else step


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row):
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def column(self, name):
        return [r[name] for r in self.rows]

    def to_csv(self, path, header: str | None = None, exclude=("wall",)) -> Path:
        """Write the rows; wall-clock columns are left out so reruns compare byte-equal."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = [c for c in (self.rows[0] if self.rows else ["iteration"]) if c not in exclude]
        with path.open("w", newline="") as fh:
            if header:
                fh.write(header.rstrip("\n") + "\n")
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([_fmt(r.get(c, "")) for c in cols])
        return path


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def _type_batch(rng: np.random.Generator, prior, K: int) -> np.ndarray:
    p = np.asarray(prior, dtype=np.float64)
    return rng.choice(len(p), size=K, p=p / p.sum())


def inner_best_response(env, theta_xi, phi_init, k: int, N_A: int, kappa_A: float, N_b: int,
                        rng: np.random.Generator, mode: str = "reward_to_go"):
    """``N_A`` policy-gradient ascent steps for attack type ``k`` against a frozen defender."""
    if not env.adaptive(k):
        raise ProtocolError("non-adaptive attack types have no best-response loop")
    phi = np.array(phi_init, dtype=np.float64)
    if kappa_A == 0.0:
        return phi
    for _ in range(N_A):
        batch = env.sample(theta_xi, phi, k, N_b, rng)
        phi = phi + kappa_A * pg_estimate(batch, env.attacker, phi, "A", mode).vector
    return phi


def _attack_params(env, phis, k):
    return phis[k] if env.adaptive(k) else env.fixed_phi(k)


def meta_rl_train(env, cfg: MetaTrainConfig, theta0, log_fn: Callable | None = None):
    """Reptile over non-adaptive types: ``theta += mean_k (theta_k(l) - theta)``.

    Each task adapts with ``adapt_steps`` gradient steps of size ``kappa_D``
    on fresh batches.
    """
    for k in range(env.n_types):
        if env.adaptive(k) and env.prior()[k] > 0:
            raise ConfigurationError("meta-RL training needs every attack type to be non-adaptive")
    rng = np.random.default_rng(cfg.seed)
    theta = np.array(theta0, dtype=np.float64)
    log = TrainLog()
    for it in range(cfg.N_D):
        t0 = time.perf_counter()
        ks = _type_batch(rng, env.prior(), cfg.K)
        offsets, rets = [], []
        for k in ks:
            th = theta.copy()
            phi = env.fixed_phi(k)
            for _ in range(cfg.adapt_steps):
                batch = env.sample(th, phi, k, cfg.N_b, rng)
                rets.append(float(episode_returns(batch.r_D, batch.gamma).mean()))
                th = th + cfg.kappa_D * pg_estimate(batch, env.defender, th, "D", cfg.pg_mode).vector
            offsets.append(th - theta)
        step = cfg.cap(np.mean(offsets, axis=0))
        theta = theta + step
        row = dict(iteration=it, def_return=float(np.mean(rets)), att_return=0.0,
                   grad_norm=float(np.linalg.norm(step)), types=" ".join(map(str, ks)),
                   wall=time.perf_counter() - t0)
        if log_fn is not None:
            row.update(log_fn(theta, None))
        log.append(**row)
    return theta, log


def meta_sg_train(env, cfg: MetaTrainConfig, theta0, phis0=None, log_fn: Callable | None = None):
    """Two-timescale meta Stackelberg training (``reptile`` or ``debiased``).

    Attacker parameters ``phis`` (one row per type; ignored for non-adaptive
    types) persist across outer iterations. ``log_fn(theta, phis)`` may add
    columns, e.g. exact equilibrium residuals on tabular games.

    Returns ``(theta, phis, log)``.
    """
    if cfg.variant == "meta-rl":
        theta, log = meta_rl_train(env, cfg, theta0, log_fn)
        return theta, phis0, log
    rng = np.random.default_rng(cfg.seed)
    theta = np.array(theta0, dtype=np.float64)
    n_att = env.attacker.n_params
    phis = np.zeros((env.n_types, n_att)) if phis0 is None else np.array(phis0, dtype=np.float64)
    pol = env.defender
    log = TrainLog()
    for it in range(cfg.N_D):
        t0 = time.perf_counter()
        ks = _type_batch(rng, env.prior(), cfg.K)
        digest_before = params_digest(theta)
        grads, d_rets, a_rets = [], [], []
        for k in ks:
            phi = _attack_params(env, phis, k)
            batch1 = env.sample(theta, phi, k, cfg.N_b, rng)
            d_rets.append(float(episode_returns(batch1.r_D, batch1.gamma).mean()))
            theta_xi = theta + cfg.eta * pg_estimate(batch1, pol, theta, "D", cfg.pg_mode).vector
            if env.adaptive(k) and cfg.N_A > 0:
                phi = inner_best_response(env, theta_xi, phi, k, cfg.N_A, cfg.kappa_A * cfg.rate(it),
                                          cfg.N_b, rng, cfg.pg_mode)
                phis[k] = phi
            if cfg.variant == "reptile":
                fresh = env.sample(theta_xi, phi, k, cfg.N_b, rng)
                a_rets.append(float(episode_returns(fresh.r_A, fresh.gamma).mean()))
                grads.append(pg_estimate(fresh, pol, theta_xi, "D", cfg.pg_mode).vector)
            else:
                if batch1.digest_A != params_digest(phi):
                    # the attacker moved: first-round batch must come from the current pair
                    batch1 = env.sample(theta, phi, k, cfg.N_b, rng)
                tp = adapted_params(pol, theta, cfg.eta, batch1, "D", cfg.inner_size)
                rows = np.repeat(tp, cfg.N_b2, axis=0)
                grp = np.repeat(np.arange(len(tp)), cfg.N_b2)
                batch2 = env.sample(rows if len(tp) > 1 else tp[0], phi, k, len(rows), rng, group=grp)
                batch2.digest_D = params_digest(tp)
                a_rets.append(float(episode_returns(batch2.r_A, batch2.gamma).mean()))
                grads.append(debiased_meta_grad(pol, theta, cfg.eta, batch1, batch2, "D",
                                                cfg.inner_size).vector)
        if params_digest(theta) != digest_before:
            raise ProtocolError("defender parameters moved during the inner loops")
        step = cfg.cap(cfg.kappa_D * cfg.rate(it) * np.mean(grads, axis=0))
        theta = theta + step
        row = dict(iteration=it, def_return=float(np.mean(d_rets)),
                   att_return=float(np.mean(a_rets)), grad_norm=float(np.linalg.norm(step)),
                   types=" ".join(map(str, ks)), theta_digest=digest_before,
                   wall=time.perf_counter() - t0)
        if log_fn is not None:
            row.update(log_fn(theta, phis))
        log.append(**row)
    return theta, phis, log


def online_adapt(env, theta_meta, k: int, blocks: int, eta: float, N_b: int, rng: np.random.Generator,
                 phi=None, mode: str = "reward_to_go"):
    """Adapt a pre-trained defense against the live attack ``k``.

    Each block collects ``N_b`` episodes (each one block of FL rounds long,
    scored with server-side data) and takes one gradient step of size ``eta``.
    """
    theta = np.array(theta_meta, dtype=np.float64)
    log = TrainLog()
    phi = env.fixed_phi(k) if phi is None else phi
    for b in range(blocks):
        t0 = time.perf_counter()
        if eta == 0.0:
            log.append(block=b, def_return=float("nan"), grad_norm=0.0, wall=0.0)
            continue
        batch = env.sample(theta, phi, k, N_b, rng)
        g = pg_estimate(batch, env.defender, theta, "D", mode).vector
        theta = theta + eta * g
        log.append(block=b, def_return=float(episode_returns(batch.r_D, batch.gamma).mean()),
                   grad_norm=float(np.linalg.norm(g)), wall=time.perf_counter() - t0)
    return theta, log
