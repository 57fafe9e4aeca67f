"""Stochastic policies and Monte-Carlo gradient estimators.

Policies are duck-typed objects exposing ``sample``, ``log_prob``, ``score``
and ``score_hvp`` over rows of observations. ``params`` may be a single flat
vector ``(P,)`` or one vector per row ``(N, P)``.

Estimators consume a :class:`TrajectoryBatch` and never resample; callers
provide fresh batches and tag them with the digest of the parameters they
were sampled under.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, ConfigurationError, ProtocolError, ShapeError

LOG_STD_BOUNDS = (-5.0, 2.0)
DENSE_HESSIAN_CAP = 2000


def params_digest(params) -> str:
    arr = np.ascontiguousarray(np.asarray(params, dtype=np.float64))
    h = hashlib.sha1(arr.tobytes())
    h.update(str(arr.shape).encode())
    return h.hexdigest()[:20]


# ---------------------------------------------------------------------------
# Gaussian policy with a tanh squash to the unit box
# ---------------------------------------------------------------------------


def _softplus(x):
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class GaussianPolicy:
    """Diagonal Gaussian over pre-squash actions ``u``; env action is ``(tanh(u)+1)/2``.

    The mean is a dense tanh network of the observation (no hidden layers by
    default, i.e. linear); the log-std is a free state-independent vector.
    Batches store the raw ``u`` so scores never need an inverse squash.
    """

    obs_dim: int
    act_dim: int
    hidden: tuple[int, ...] = ()
    log_std_init: float = -0.5

    @property
    def dims(self) -> list[int]:
        return [self.obs_dim, *self.hidden, self.act_dim]

    @property
    def n_mean_params(self) -> int:
        d = self.dims
        return sum(a * b + b for a, b in zip(d[:-1], d[1:]))

    @property
    def n_params(self) -> int:
        return self.n_mean_params + self.act_dim

    def init(self, rng: np.random.Generator, scale: float = 0.1) -> np.ndarray:
        parts = []
        d = self.dims
        for a, b in zip(d[:-1], d[1:]):
            parts.append(rng.normal(0.0, scale / math.sqrt(a), size=a * b))
            parts.append(np.zeros(b))
        parts.append(np.full(self.act_dim, self.log_std_init))
        return np.concatenate(parts)

    def _rows(self, params, n):
        p = np.asarray(params, dtype=np.float64)
        if p.ndim == 1:
            p = p[None, :]
        if p.shape[-1] != self.n_params:
            raise ShapeError(f"expected {self.n_params} policy params, got {p.shape[-1]}")
        if p.shape[0] not in (1, n):
            raise ShapeError("per-row params must match the number of rows")
        return p

    def _layers(self, p):
        out, off = [], 0
        d = self.dims
        for a, b in zip(d[:-1], d[1:]):
            W = p[:, off:off + a * b].reshape(-1, a, b)
            off += a * b
            out.append((W, p[:, off:off + b]))
            off += b
        return out, p[:, off:off + self.act_dim]

    def _forward(self, p, obs):
        layers, log_std = self._layers(p)
        hs = [obs]
        h = obs
        for i, (W, b) in enumerate(layers):
            z = np.matmul(h[:, None, :], W)[:, 0, :] + b
            h = np.tanh(z) if i < len(layers) - 1 else z
            hs.append(h)
        raw = log_std
        ls = np.clip(raw, *LOG_STD_BOUNDS)
        live = ((raw >= LOG_STD_BOUNDS[0]) & (raw <= LOG_STD_BOUNDS[1])).astype(np.float64)
        return hs, ls, live, layers

    def _obs(self, obs):
        x = np.asarray(obs, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.obs_dim:
            raise ShapeError(f"observation has dim {x.shape[-1]}, expected {self.obs_dim}")
        return x

    def mean(self, params, obs) -> np.ndarray:
        x = self._obs(obs)
        hs, _, _, _ = self._forward(self._rows(params, len(x)), x)
        return hs[-1]

    @staticmethod
    def squash(u):
        return 0.5 * (np.tanh(u) + 1.0)

    @staticmethod
    def log_squash_jac(u):
        # log of d/du (tanh(u)+1)/2, summed over action components
        u = np.asarray(u, dtype=np.float64)
        return (math.log(0.5) + 2.0 * (math.log(2.0) - u - _softplus(-2.0 * u))).sum(axis=-1)

    def sample(self, params, obs, rng: np.random.Generator):
        x = self._obs(obs)
        hs, ls, _, _ = self._forward(self._rows(params, len(x)), x)
        u = hs[-1] + np.exp(ls) * rng.normal(size=hs[-1].shape)
        return u, self.log_prob(params, x, u)

    def log_prob(self, params, obs, u) -> np.ndarray:
        x = self._obs(obs)
        hs, ls, _, _ = self._forward(self._rows(params, len(x)), x)
        u = np.asarray(u, dtype=np.float64).reshape(len(x), self.act_dim)
        z = (u - hs[-1]) / np.exp(ls)
        gauss = (-0.5 * z ** 2 - ls - 0.5 * math.log(2 * math.pi)).sum(axis=1)
        return gauss - self.log_squash_jac(u)

    def score(self, params, obs, u) -> np.ndarray:
        x = self._obs(obs)
        p = self._rows(params, len(x))
        hs, ls, live, layers = self._forward(p, x)
        u = np.asarray(u, dtype=np.float64).reshape(len(x), self.act_dim)
        var = np.exp(2 * ls)
        diff = u - hs[-1]
        delta = diff / var
        grads = []
        for i in range(len(layers) - 1, -1, -1):
            W, _ = layers[i]
            h_in = hs[i]
            grads.append((h_in[:, :, None] * delta[:, None, :]).reshape(len(x), -1))
            grads.append(delta)
            if i > 0:
                delta = np.matmul(W, delta[:, :, None])[:, :, 0] * (1.0 - hs[i] ** 2)
        ordered = []
        for j in range(len(layers)):
            k = len(layers) - 1 - j
            ordered.extend([grads[2 * k], grads[2 * k + 1]])
        g_ls = (diff ** 2 / var - 1.0) * live
        return np.concatenate(ordered + [g_ls], axis=1)

    def score_hvp(self, params, obs, u, v) -> np.ndarray:
        """Rows of ``(d^2 log pi / d params^2) @ v`` with per-row ``v``."""
        x = self._obs(obs)
        p = self._rows(params, len(x))
        v = np.broadcast_to(np.asarray(v, dtype=np.float64), (len(x), self.n_params))
        if self.hidden:
            h = 1e-5
            return (self.score(p + h * v, x, u) - self.score(p - h * v, x, u)) / (2 * h)
        hs, ls, live, _ = self._forward(p, x)
        u = np.asarray(u, dtype=np.float64).reshape(len(x), self.act_dim)
        var = np.exp(2 * ls)
        diff = u - hs[-1]
        d, k = self.obs_dim, self.act_dim
        vW = v[:, :d * k].reshape(-1, d, k)
        vb = v[:, d * k:d * k + k]
        vls = v[:, d * k + k:] * live
        dm = np.matmul(x[:, None, :], vW)[:, 0, :] + vb        # directional change of the mean
        # second derivatives: m-m: -1/var, m-ls: -2 diff/var, ls-ls: -2 diff^2/var
        out_m = -dm / var - 2.0 * diff / var * vls
        out_ls = (-2.0 * diff / var * dm - 2.0 * diff ** 2 / var * vls) * live
        out_W = (x[:, :, None] * out_m[:, None, :]).reshape(len(x), -1)
        return np.concatenate([out_W, out_m, out_ls], axis=1)

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "obs_dim": self.obs_dim, "act_dim": self.act_dim,
                "hidden": list(self.hidden), "log_std_init": self.log_std_init}


def policy_sample(policy, params, obs, rng: np.random.Generator):
    """Draw one action per observation row; returns ``(env_action, raw_action, log_prob)``."""
    raw, logp = policy.sample(params, obs, rng)
    return policy.squash(raw), raw, logp


def logprob_grad(policy, params, obs, action) -> np.ndarray:
    return policy.score(params, obs, action)


# ---------------------------------------------------------------------------
# Trajectory batches
# ---------------------------------------------------------------------------


@dataclass
class TrajectoryBatch:
    """``N`` equal-length episodes for both players.

    ``obs``/``act_*`` have leading shape ``(N, H)``; rewards and log-probs are
    ``(N, H)``. ``digest_*`` identify the parameters each player sampled with.
    ``group`` optionally maps rows to adaptation groups (for second-round
    batches of the debiased meta-gradient).
    """

    obs: np.ndarray
    act_D: np.ndarray
    act_A: np.ndarray
    r_D: np.ndarray
    r_A: np.ndarray
    logp_D: np.ndarray
    logp_A: np.ndarray
    gamma: float
    digest_D: str = ""
    digest_A: str = ""
    type_index: int = 0
    group: np.ndarray | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.r_D.ndim != 2 or self.r_D.shape != self.r_A.shape:
            raise ShapeError("rewards must be (N, H) arrays for both players")
        if not (np.all(np.isfinite(self.r_D)) and np.all(np.isfinite(self.r_A))):
            raise ShapeError("rewards must be finite")

    @property
    def n(self) -> int:
        return self.r_D.shape[0]

    @property
    def horizon(self) -> int:
        return self.r_D.shape[1]

    def view(self, player: str):
        if player == "D":
            return self.act_D, self.r_D, self.digest_D
        if player == "A":
            return self.act_A, self.r_A, self.digest_A
        raise ConfigurationError("player must be 'D' or 'A'")


def discounts(gamma: float, H: int) -> np.ndarray:
    """Weights ``gamma**t`` for ``t = 0..H-1``."""
    return gamma ** np.arange(H, dtype=np.float64)


def episode_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    return (np.asarray(rewards) * discounts(gamma, rewards.shape[1])).sum(axis=1)


def _flat_rows(batch: TrajectoryBatch, player: str, params):
    act, r, _ = batch.view(player)
    N, H = r.shape
    obs = batch.obs.reshape(N * H, *batch.obs.shape[2:])
    act = act.reshape(N * H, *act.shape[2:])
    p = np.asarray(params, dtype=np.float64)
    if p.ndim == 2:
        if p.shape[0] != N:
            raise ShapeError("per-episode params must have one row per episode")
        p = np.repeat(p, H, axis=0)
    return obs, act, p


def _check_digest(batch: TrajectoryBatch, player: str, params):
    _, _, dig = batch.view(player)
    if dig and dig != params_digest(params):
        raise ProtocolError(f"batch for player {player} was not sampled under these parameters")


def step_scores(batch: TrajectoryBatch, policy, params, player: str = "D") -> np.ndarray:
    obs, act, p = _flat_rows(batch, player, params)
    S = policy.score(p, obs, act)
    return S.reshape(batch.n, batch.horizon, -1)


@dataclass(frozen=True)
class GradEstimate:
    vector: np.ndarray
    n: int
    tag: str


def per_episode_grads(batch: TrajectoryBatch, policy, params, player: str = "D"):
    """Return ``(g, s, R)``: per-episode REINFORCE terms, summed scores and returns."""
    S = step_scores(batch, policy, params, player)
    _, r, _ = batch.view(player)
    R = episode_returns(r, batch.gamma)
    s = S.sum(axis=1)
    return s * R[:, None], s, R


def pg_estimate(batch: TrajectoryBatch, policy, params, player: str = "D",
                mode: str = "vanilla", check: bool = True) -> GradEstimate:
    """Monte-Carlo policy gradient.

    ``vanilla``: mean over episodes of ``(sum_t score_t) * R``.
    ``reward_to_go``: per-step discounted returns-to-go with a leave-one-out
    mean baseline per step; same expectation, lower variance.
    """
    if batch.n == 0:
        raise ConfigurationError("empty trajectory batch")
    if check:
        _check_digest(batch, player, params)
    if mode == "vanilla":
        g, _, _ = per_episode_grads(batch, policy, params, player)
        return GradEstimate(g.mean(axis=0), batch.n, "pg")
    if mode == "reward_to_go":
        S = step_scores(batch, policy, params, player)
        _, r, _ = batch.view(player)
        w = r * discounts(batch.gamma, batch.horizon)
        G = np.cumsum(w[:, ::-1], axis=1)[:, ::-1]
        N = batch.n
        b = (G.sum(axis=0)[None, :] - G) / (N - 1) if N > 1 else np.zeros_like(G)
        g = (S * (G - b)[:, :, None]).sum(axis=1)
        return GradEstimate(g.mean(axis=0), N, "pg-baseline")
    raise ConfigurationError(f"unknown estimator mode {mode!r}")


def _hvp_rows(batch, policy, params, player, V):
    """Per-episode ``sum_t R * (d^2 log pi_t) @ V[episode]``."""
    obs, act, p = _flat_rows(batch, player, params)
    N, H = batch.n, batch.horizon
    Vrows = np.repeat(np.asarray(V, dtype=np.float64), H, axis=0)
    Hv = policy.score_hvp(p, obs, act, Vrows).reshape(N, H, -1).sum(axis=1)
    _, r, _ = batch.view(player)
    return Hv * episode_returns(r, batch.gamma)[:, None]


def hessian_estimate(batch: TrajectoryBatch, policy, params, player: str = "D",
                     symmetrize: bool = True, cap: int = DENSE_HESSIAN_CAP) -> np.ndarray:
    """Sample estimate of the Hessian of the expected return.

    Mean over episodes of ``g(tau) s(tau)^T + d g(tau)/d params`` with
    ``s`` the summed score. Dense; guarded by ``cap`` parameters.
    """
    P = policy.n_params
    if P > cap:
        raise CapabilityError(f"dense Hessian over {P} parameters exceeds cap {cap}")
    _check_digest(batch, player, params)
    g, s, R = per_episode_grads(batch, policy, params, player)
    N = batch.n
    outer = g.T @ s / N
    inner = np.zeros((P, P))
    for j in range(P):
        e = np.zeros((N, P))
        e[:, j] = 1.0
        inner[:, j] = _hvp_rows(batch, policy, params, player, e).mean(axis=0)
    Hm = outer + inner
    return 0.5 * (Hm + Hm.T) if symmetrize else Hm


def adapt_step(policy, params, batch: TrajectoryBatch, eta: float, player: str = "D",
               mode: str = "vanilla") -> np.ndarray:
    return np.asarray(params, dtype=np.float64) + eta * pg_estimate(batch, policy, params, player, mode).vector


def adapt(policy, params, eta: float, steps: int, sample_fn, player: str = "D",
          mode: str = "vanilla") -> np.ndarray:
    """``steps`` gradient-ascent updates, each on a fresh batch from ``sample_fn(params)``."""
    if steps < 1:
        raise ConfigurationError("adaptation needs at least one step")
    theta = np.asarray(params, dtype=np.float64)
    for _ in range(steps):
        if eta == 0.0:
            break
        theta = adapt_step(policy, theta, sample_fn(theta), eta, player, mode)
    return theta


# ---------------------------------------------------------------------------
# Debiased meta-gradient
# ---------------------------------------------------------------------------


def _groups(n: int, inner_size: int | None) -> list[np.ndarray]:
    if inner_size is None or inner_size >= n:
        return [np.arange(n)]
    if inner_size < 1 or n % inner_size:
        raise ConfigurationError("inner_size must divide the first-round batch size")
    return [np.arange(i, i + inner_size) for i in range(0, n, inner_size)]


def adapted_params(policy, theta, eta: float, batch1: TrajectoryBatch, player: str = "D",
                   inner_size: int | None = None) -> np.ndarray:
    """One-step adapted parameters per adaptation group, shape ``(G, P)``."""
    _check_digest(batch1, player, theta)
    g, _, _ = per_episode_grads(batch1, policy, theta, player)
    th = np.asarray(theta, dtype=np.float64)
    size = len(_groups(batch1.n, inner_size)[0])
    return th[None, :] + eta * g.reshape(-1, size, g.shape[1]).mean(axis=1)


def debiased_meta_grad(policy, theta, eta: float, batch1: TrajectoryBatch, batch2: TrajectoryBatch,
                       player: str = "D", inner_size: int | None = None,
                       jacobian: str = "pathwise") -> GradEstimate:
    """Unbiased gradient of ``E_D[J(theta + eta * g_hat(D))]``.

    ``batch1`` is sampled at ``theta`` and split into adaptation groups of
    ``inner_size`` episodes. ``batch2`` is sampled at the adapted parameters:
    its ``group`` array says which group each row belongs to, and its digest
    must match the stacked adapted parameters from :func:`adapted_params`.

    Per group the estimate is ``(I + eta * Jac)^T g2 + J2 * sum_{tau in D} s(tau)``
    where ``g2``/``J2`` are the gradient and return estimates from ``batch2``.
    ``jacobian='pathwise'`` uses the derivative of ``g_hat`` itself; ``'b3'``
    uses the full Hessian sample estimate instead (biased here; kept for study).
    """
    if jacobian not in ("pathwise", "b3"):
        raise ConfigurationError("jacobian must be 'pathwise' or 'b3'")
    groups = _groups(batch1.n, inner_size)
    theta_p = adapted_params(policy, theta, eta, batch1, player, inner_size)
    _, _, dig2 = batch2.view(player)
    if dig2 != params_digest(theta_p):
        raise ProtocolError("second-round batch was not sampled at the adapted parameters")
    grp2 = np.zeros(batch2.n, dtype=np.int64) if batch2.group is None else np.asarray(batch2.group)
    if len(groups) > 1 and batch2.group is None:
        raise ProtocolError("second-round batch needs group tags when adapting per group")
    row_params = theta_p[grp2]
    g2_rows, _, R2 = per_episode_grads(batch2, policy, row_params, player)
    G = len(groups)
    counts = np.bincount(grp2, minlength=G).astype(np.float64)
    if np.any(counts == 0):
        raise ProtocolError("every adaptation group needs second-round episodes")
    g2 = np.zeros((G, policy.n_params))
    np.add.at(g2, grp2, g2_rows)
    g2 /= counts[:, None]
    J2 = np.bincount(grp2, weights=R2, minlength=G) / counts

    g1, s1, _ = per_episode_grads(batch1, policy, theta, player)
    gid1 = np.arange(batch1.n) // len(groups[0])
    V = g2[gid1]
    jv = _hvp_rows(batch1, policy, theta, player, V)
    if jacobian == "b3":
        jv = jv + s1 * (g1 * V).sum(axis=1, keepdims=True)
    sizes = np.array([len(idx) for idx in groups], dtype=np.float64)
    jac_term = np.zeros_like(g2)
    np.add.at(jac_term, gid1, jv)
    jac_term /= sizes[:, None]
    score_sum = np.zeros_like(g2)
    np.add.at(score_sum, gid1, s1)
    est = g2 + eta * jac_term + J2[:, None] * score_sum
    return GradEstimate(est.mean(axis=0), batch1.n + batch2.n, "debiased-meta")
