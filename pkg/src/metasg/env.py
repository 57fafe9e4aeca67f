"""The defender-vs-attacker Markov game over federated training rounds.

Two concrete worlds share one sampling interface (:class:`TaskEnv`):

* :class:`FLTaskEnv`: the simulated FL system; state is the global model,
  the defender picks ``(alpha, beta, psi)``, the attacker's action is the
  set of malicious updates.
* :class:`TabularTaskEnv`: a finite game from :mod:`metasg.tabular`,
  sampled in a vectorised way for estimator checks.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attacks as atk
from . import defenses as dfn
from .errors import ConfigurationError, EpisodeError, ShapeError
from .flcore import (ClientDataset, Dataset, FLConfig, ModelParams, Trigger, evaluate,
                     forward_loss, generate_synthetic_dataset, global_step, init_model,
                     local_update, partition_non_iid, sample_root_data)
from .policy import GaussianPolicy, TrajectoryBatch, params_digest
from .tabular import TabularBSMG

ACTION_DIM = 3


# ---------------------------------------------------------------------------
# FL world and game configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FLWorld:
    """Data and initial model shared by every episode of one experiment."""

    clients: tuple[ClientDataset, ...]
    root: Dataset
    test: Dataset
    init_model: ModelParams
    n_classes: int


def make_world(seed: int, n_examples: int = 2000, dim: int = 20, n_classes: int = 5,
               separation: float = 3.0, n_clients: int = 20, q: float = 0.5,
               hidden: int = 0, init_scale: float = 1.0, root_size: int = 100,
               n_test: int = 1000) -> FLWorld:
    """Synthetic blobs, a non-i.i.d. client split, root data and a seeded initial model."""
    pool = generate_synthetic_dataset(n_examples + n_test, n_classes, dim, separation, seed)
    train = pool.subset(np.arange(n_examples))
    test = pool.subset(np.arange(n_examples, n_examples + n_test))
    clients = partition_non_iid(train, n_clients, q, seed + 1)
    rng = np.random.default_rng(seed + 2)
    root = sample_root_data(train, root_size, rng)
    dims = [dim, hidden, hidden, n_classes] if hidden else [dim, n_classes]
    model = init_model(dims, np.random.default_rng(seed + 3), init_scale)
    return FLWorld(tuple(clients), root, test, model, n_classes)


@dataclass(frozen=True)
class BSMGConfig:
    fl: FLConfig
    world: FLWorld
    types: tuple[atk.AttackType, ...]
    prior: tuple[float, ...]
    H: int = 50
    gamma: float = 0.99
    posttrain: dfn.PostTrainSpec = field(default_factory=dfn.PostTrainSpec)
    obs_round: bool = True
    backdoor_penalty: float = 0.0
    baseline_beta: float = 0.2
    baseline_f: int = 1
    baseline_alpha: float = 1.0
    baseline_psi: float = 2.0
    baseline_prune: float = 0.5

    def __post_init__(self):
        if len(self.types) != len(self.prior) or not self.types:
            raise ConfigurationError("type prior needs one weight per attack type")
        if not math.isclose(sum(self.prior), 1.0, abs_tol=1e-9) or min(self.prior) < 0:
            raise ConfigurationError("type prior weights must sum to 1")
        if self.H < 1:
            raise ConfigurationError("horizon must be at least 1")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("discount must lie in (0, 1]")

    def obs_dim(self) -> int:
        return observe(self.world.init_model, 0, self.H, self.obs_round).size


def n_attackers(fl: FLConfig, xi: atk.AttackType) -> int:
    if xi.method == "NA":
        return 0
    n = xi.config.get("n_attackers")
    if n is None:
        n = fl.n_targeted if xi.targeted else fl.n_untargeted
    return int(n)


# ---------------------------------------------------------------------------
# Episode state
# ---------------------------------------------------------------------------


@dataclass
class GameState:
    t: int
    model: ModelParams
    xi: atk.AttackType
    rng: np.random.Generator
    malicious: tuple[int, ...]
    attacker_data: tuple[ClientDataset, ...]
    prev_aggregate: np.ndarray | None = None
    chosen_label: int | None = None


@dataclass(frozen=True)
class Observation:
    vector: np.ndarray


def observe(model: ModelParams, t: int, H: int, with_round: bool = True) -> np.ndarray:
    """Final-layer weight matrix and bias, plus the round index scaled to [0, 1]."""
    sl = model.layer_slices()[-1]
    w = np.asarray(model.weights[sl])
    return np.concatenate([w, [t / H]]) if with_round else w.copy()


def reset(config: BSMGConfig, xi: atk.AttackType, seed: int) -> GameState:
    """Fresh episode: fixed initial model, seeded randomness, attacker-side data prepared."""
    rng = np.random.default_rng([seed, 0])
    M = n_attackers(config.fl, xi)
    if M > config.fl.n_clients:
        raise ConfigurationError("more attackers than clients")
    malicious = tuple(range(M))
    data: list[ClientDataset] = [config.world.clients[i] for i in malicious]
    if xi.targeted:
        prep = np.random.default_rng([seed, 2])
        trig = xi.trigger
        subs = atk.dba_assign(trig, M, prep) if xi.method == "DBA" else [trig] * M
        data = [atk.poison_dataset(d, sub, xi.config["poison_ratio"], prep) for d, sub in zip(data, subs)]
    return GameState(0, config.world.init_model, xi, rng, malicious, tuple(data))


@dataclass(frozen=True)
class StepInfo:
    clean_acc: float
    clean_loss: float
    backdoor_acc: float
    alpha: float
    beta: float
    psi: float
    n_malicious_sampled: int
    chosen_label: int | None = None


def _probe(name: str, beta: float, f: int):
    if name == "trimmed_mean":
        return lambda u: dfn.trimmed_mean(u, beta)
    if name == "krum":
        return lambda u: dfn.krum(u, f)[0]
    if name == "median":
        return dfn.coord_median
    if name == "fedavg":
        return dfn.fedavg
    raise ConfigurationError(f"unknown probe aggregator {name!r}")


def _pooled(datasets: Sequence[ClientDataset]) -> ClientDataset:
    X = np.concatenate([d.base.features for d in datasets])
    y = np.concatenate([d.base.labels for d in datasets])
    return ClientDataset(Dataset(X, y, datasets[0].base.n_classes))


def malicious_updates(config: BSMGConfig, state: GameState, a_A, benign: list[np.ndarray],
                      n_mal: int, mal_ids: list[int]) -> list[np.ndarray]:
    xi = state.xi
    fl = config.fl
    model = state.model
    history = state.prev_aggregate if state.prev_aggregate is not None else np.zeros_like(model.weights)
    full_mean = np.mean(benign, axis=0) if benign else history
    knowledge = xi.config.get("knowledge", "full")
    mu_hat = full_mean if knowledge == "full" else history
    m = xi.method
    if m == "IPM":
        return list(atk.ipm_update(mu_hat, xi.config["epsilon"], n_mal).updates)
    if m == "LMP":
        ref = benign if (benign and knowledge == "full") else [mu_hat]
        res = atk.lmp_update(ref, _probe(xi.config["probe"], xi.config["probe_beta"], xi.config["probe_f"]),
                             xi.config["lambda_max"], xi.config["tol"], n_mal)
        return list(res.action.updates)
    if m in ("BFL", "DBA"):
        out = []
        for i in mal_ids:
            d = state.attacker_data[i]
            out.append(atk.backdoor_update(model, d, xi.config["scale"], fl.local_lr, fl.local_iters,
                                           fl.batch_size, state.rng))
        return out
    if m in ("RL", "BRL"):
        if a_A is None:
            raise ConfigurationError(f"{m} attack needs an attacker action")
        ctx = atk.AttackContext(mu_hat, model, None, fl.local_lr, fl.local_iters, fl.batch_size, state.rng)
        if m == "BRL":
            ctx.poisoned = _pooled([state.attacker_data[i] for i in mal_ids])
        return list(atk.rl_attack_action_to_updates(a_A, xi, ctx, n_mal).updates)
    raise ConfigurationError(f"no update rule for method {m!r}")


def _attacker_reward(config: BSMGConfig, state: GameState, post: ModelParams, mal_updates, benign_mean):
    xi = state.xi
    if xi.method == "NA" or not state.attacker_data:
        return 0.0, None
    if not xi.targeted:
        return atk.attack_reward(post, [], [d.base for d in state.attacker_data]), None
    poisoned = [d.poisoned_rows() for d in state.attacker_data]
    if xi.method == "BRL" and xi.config["blackbox"]:
        return atk.surrogate_reward_blackbox(post, poisoned, config.world.n_classes)
    r = atk.attack_reward(post, poisoned, [])
    if xi.method == "BRL" and mal_updates:
        r -= xi.config["tradeoff"] * atk.stealth_gap(mal_updates[0], benign_mean)
    return r, None


def step(config: BSMGConfig, state: GameState, a_D, a_A=None, update_state: bool = True):
    """Play one FL round.

    ``a_D`` is either a point of [0,1]^3 (learned defense, decoded to
    ``(alpha, beta, psi)``) or a baseline rule name. Returns
    ``(r_D, r_A, info)``; ``state`` advances in place. Post-training only
    ever touches the copy used for rewards and reporting.
    """
    if state.t >= config.H:
        raise EpisodeError(f"episode already finished after {config.H} rounds")
    fl = config.fl
    world = config.world
    rng = state.rng
    n_pick = max(1, int(round(fl.subsample_rate * fl.n_clients)))
    picked = np.sort(rng.choice(fl.n_clients, size=n_pick, replace=False))
    mal_set = set(state.malicious)
    benign_ids = [int(i) for i in picked if i not in mal_set]
    mal_ids = [int(i) for i in picked if i in mal_set]
    benign = [local_update(state.model, world.clients[i], fl.local_lr, fl.local_iters, fl.batch_size, rng)
              for i in benign_ids]
    benign_mean = np.mean(benign, axis=0) if benign else np.zeros_like(state.model.weights)
    mal = malicious_updates(config, state, a_A, benign, len(mal_ids), mal_ids) if mal_ids else []
    updates = benign + mal

    if isinstance(a_D, str):
        root_upd = None
        if a_D.startswith("fltrust"):
            root_upd = local_update(state.model, world.root, fl.local_lr, fl.local_iters, fl.batch_size, rng)
        agg, _ = dfn.baseline_aggregate(a_D, updates, beta=config.baseline_beta, f=config.baseline_f,
                                        alpha=config.baseline_alpha, root_update=root_upd)
        if a_D in ("neuroclip", "fltrust+nc"):
            handle = lambda w: dfn.neuroclip(w, config.baseline_psi)
        elif a_D == "prune":
            handle = lambda w: dfn.prune(w, config.baseline_prune, world.root)
        else:
            handle = lambda w: w
        alpha = beta = psi = float("nan")
    else:
        act = dfn.decode_defense_action(a_D, updates, config.posttrain)
        agg, handle, _ = dfn.apply_defense_action(act, updates, config.posttrain.mode, world.root)
        alpha, beta, psi = act.alpha, act.beta, act.psi

    new_model = global_step(state.model, agg, fl.server_lr_at(state.t))
    post = handle(new_model)
    r_D = -forward_loss(post, world.root)
    xi = state.xi
    if config.backdoor_penalty and xi.targeted:
        r_D -= config.backdoor_penalty * evaluate(post, world.root, xi.trigger).backdoor_accuracy
    probe = GameState(state.t, new_model, xi, rng, state.malicious, state.attacker_data)
    r_A, label = _attacker_reward(config, probe, post, mal, benign_mean)
    met = evaluate(post, world.test, xi.trigger if xi.targeted else None)
    info = StepInfo(met.clean_accuracy, met.clean_loss, met.backdoor_accuracy, alpha, beta, psi,
                    len(mal_ids), label)
    if update_state:
        state.t += 1
        state.model = new_model
        state.prev_aggregate = np.asarray(agg)
        state.chosen_label = label
    return float(r_D), float(r_A), info


@dataclass
class Trajectory:
    obs: np.ndarray
    a_D: np.ndarray
    a_A: np.ndarray
    r_D: np.ndarray
    r_A: np.ndarray
    logp_D: np.ndarray
    logp_A: np.ndarray
    xi: str
    info: list[StepInfo]
    final_model: ModelParams | None = None

    def __len__(self):
        return len(self.r_D)


def rollout(config: BSMGConfig, policy: GaussianPolicy | None, theta, xi: atk.AttackType, seed: int,
            att_policy: GaussianPolicy | None = None, phi=None, deterministic: bool = False,
            baseline: str | None = None) -> Trajectory:
    """Sample one episode of length ``H``.

    Policy noise comes from its own stream (seeded from ``seed``), so episodes
    that share ``seed`` see the same client sampling and minibatches.
    ``baseline`` replaces the learned defense by a fixed rule.
    """
    state = reset(config, xi, seed)
    pol_rng = np.random.default_rng([seed, 1])
    H = config.H
    obs_l, aD_l, aA_l, rD, rA, lpD, lpA, infos = [], [], [], [], [], [], [], []
    for t in range(H):
        o = observe(state.model, t, H, config.obs_round)
        if baseline is not None:
            a_env, raw, lp = baseline, np.zeros(ACTION_DIM), 0.0
        elif deterministic:
            raw = policy.mean(theta, o)[0]
            a_env, lp = policy.squash(raw), 0.0
        else:
            raw_b, lp_b = policy.sample(theta, o, pol_rng)
            raw, lp = raw_b[0], float(lp_b[0])
            a_env = policy.squash(raw)
        if xi.adaptive:
            if deterministic:
                rawA = att_policy.mean(phi, o)[0]
                lpa = 0.0
            else:
                rb, lb = att_policy.sample(phi, o, pol_rng)
                rawA, lpa = rb[0], float(lb[0])
            a_att = att_policy.squash(rawA)
        else:
            rawA, lpa, a_att = np.zeros(ACTION_DIM), 0.0, None
        r_d, r_a, info = step(config, state, a_env, a_att)
        obs_l.append(o)
        aD_l.append(np.asarray(raw, dtype=np.float64))
        aA_l.append(np.asarray(rawA, dtype=np.float64))
        rD.append(r_d)
        rA.append(r_a)
        lpD.append(lp)
        lpA.append(lpa)
        infos.append(info)
    return Trajectory(np.array(obs_l), np.array(aD_l), np.array(aA_l), np.array(rD), np.array(rA),
                      np.array(lpD), np.array(lpA), xi.name, infos, state.model)


def sample_types(prior: Sequence[tuple], K: int, rng: np.random.Generator) -> list:
    """``K`` i.i.d. draws from a list of ``(type, weight)`` pairs."""
    if K < 1:
        raise ConfigurationError("need at least one type per batch")
    items = [t for t, _ in prior]
    w = np.array([p for _, p in prior], dtype=np.float64)
    if not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
        raise ConfigurationError("type weights must sum to 1")
    idx = rng.choice(len(items), size=K, p=w / w.sum())
    return [items[i] for i in idx]


def write_trajectories_csv(trajs: Sequence[Trajectory], path) -> Path:
    """One row per step: episode, t, rewards, raw actions and decoded defense knobs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["episode", "t", "xi", "r_D", "r_xi", "aD_0", "aD_1", "aD_2", "aA_0", "aA_1", "aA_2",
                    "alpha", "beta", "psi", "clean_acc", "backdoor_acc"])
        for e, tr in enumerate(trajs):
            for t in range(len(tr)):
                inf = tr.info[t]
                w.writerow([e, t, tr.xi, f"{tr.r_D[t]:.10g}", f"{tr.r_A[t]:.10g}",
                            *(f"{v:.8g}" for v in tr.a_D[t]), *(f"{v:.8g}" for v in tr.a_A[t]),
                            f"{inf.alpha:.8g}", f"{inf.beta:.8g}", f"{inf.psi:.8g}",
                            f"{inf.clean_acc:.6f}", f"{inf.backdoor_acc:.6f}"])
    return path


# ---------------------------------------------------------------------------
# Uniform sampling interface for the training loops
# ---------------------------------------------------------------------------


class TaskEnv:
    """What the meta-learning loops need from a game."""

    defender = None
    attacker = None

    @property
    def n_types(self) -> int:
        raise NotImplementedError

    def prior(self) -> np.ndarray:
        raise NotImplementedError

    def adaptive(self, k: int) -> bool:
        raise NotImplementedError

    def fixed_phi(self, k: int):
        return None

    def sample(self, theta, phi, k: int, n: int, rng: np.random.Generator, group=None) -> TrajectoryBatch:
        raise NotImplementedError


class TabularTaskEnv(TaskEnv):
    def __init__(self, game: TabularBSMG):
        self.game = game
        self.defender = game.defender
        self.attacker = game.attacker

    @property
    def n_types(self) -> int:
        return self.game.n_types

    def prior(self):
        return self.game.prior

    def adaptive(self, k):
        return bool(self.game.adaptive[k])

    def fixed_phi(self, k):
        return self.game.phi[k]

    def sample(self, theta, phi, k, n, rng, group=None):
        return sample_tabular(self.game, theta, phi, k, n, rng, group)


def sample_tabular(game: TabularBSMG, theta, phi, type_index: int, n: int, rng: np.random.Generator,
                   group=None) -> TrajectoryBatch:
    """Vectorised episodes of a tabular game.

    ``theta`` may be ``(P,)`` or ``(n, P)`` (one defender parameter row per
    episode, used for second-round meta batches).
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    H = game.H
    S = game.n_states
    pol_D, pol_A = game.defender, game.attacker
    th_rows = theta if theta.ndim == 2 else theta[None, :]
    if theta.ndim == 2 and theta.shape[0] != n:
        raise ShapeError("per-episode defender params need one row per episode")
    pi_D = pol_D.probs(th_rows)                  # (B, S, AD)
    pi_A = pol_A.probs(phi)[0]                   # (S, AA)
    rows = np.arange(n)
    b = rows if theta.ndim == 2 else np.zeros(n, dtype=np.int64)
    states = np.zeros((n, H), dtype=np.int64)
    aD = np.zeros((n, H), dtype=np.int64)
    aA = np.zeros((n, H), dtype=np.int64)

    def draw(p):
        u = rng.random(p.shape[0])
        return np.minimum((u[:, None] > np.cumsum(p, axis=1)).sum(axis=1), p.shape[1] - 1)

    s = draw(np.broadcast_to(game.init_dist, (n, S)))
    for t in range(H):
        states[:, t] = s
        aD[:, t] = draw(pi_D[b, s])
        aA[:, t] = draw(pi_A[s])
        if t < H - 1:
            s = draw(game.T[s, aD[:, t], aA[:, t]])
    rD = game.r_D[type_index][states, aD, aA]
    rA = game.r_A[type_index][states, aD, aA]
    lpD = np.log(pi_D[b[:, None], states, aD])
    lpA = np.log(pi_A[states, aA])
    grp = None if group is None else np.asarray(group, dtype=np.int64)
    return TrajectoryBatch(states, aD, aA, rD, rA, lpD, lpA, game.gamma,
                           params_digest(theta), params_digest(phi), type_index, grp)


class FLTaskEnv(TaskEnv):
    """Sampling interface over the FL game; each episode gets a seed drawn from ``rng``."""

    def __init__(self, config: BSMGConfig, defender: GaussianPolicy, attacker: GaussianPolicy | None = None):
        self.config = config
        self.defender = defender
        self.attacker = attacker or GaussianPolicy(config.obs_dim(), ACTION_DIM)

    @property
    def n_types(self):
        return len(self.config.types)

    def prior(self):
        return np.asarray(self.config.prior)

    def adaptive(self, k):
        return self.config.types[k].adaptive

    def rollouts(self, theta, phi, k, seeds, deterministic=False):
        xi = self.config.types[k]
        return [rollout(self.config, self.defender, theta, xi, int(s), self.attacker, phi, deterministic)
                for s in seeds]

    def sample(self, theta, phi, k, n, rng, group=None):
        theta = np.asarray(theta, dtype=np.float64)
        seeds = rng.integers(0, 2 ** 31 - 1, size=n)
        rows = []
        for i, s in enumerate(seeds):
            th = theta[i] if theta.ndim == 2 else theta
            rows.append(rollout(self.config, self.defender, th, self.config.types[k], int(s),
                                self.attacker, phi))
        batch = to_batch(rows, self.config.gamma, theta, phi, k)
        if group is not None:
            batch.group = np.asarray(group, dtype=np.int64)
        return batch


def to_batch(trajs: Sequence[Trajectory], gamma: float, theta, phi, k: int = 0) -> TrajectoryBatch:
    return TrajectoryBatch(np.stack([t.obs for t in trajs]), np.stack([t.a_D for t in trajs]),
                           np.stack([t.a_A for t in trajs]), np.stack([t.r_D for t in trajs]),
                           np.stack([t.r_A for t in trajs]), np.stack([t.logp_D for t in trajs]),
                           np.stack([t.logp_A for t in trajs]), gamma, params_digest(theta),
                           params_digest(phi) if phi is not None else "", k)
