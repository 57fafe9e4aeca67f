"""Exact enumeration on tiny finite games.

Everything here is computed by summing over every trajectory
``(s1, aD1, aA1, ..., sH, aDH, aAH)``, so the results are ground truth for
the Monte-Carlo estimators in :mod:`metasg.policy`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CapabilityError, ConfigurationError, ShapeError

ENUM_CAP = 1_000_000


# ---------------------------------------------------------------------------
# Tabular softmax policy
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SoftmaxPolicy:
    """State-indexed softmax over a logits table.

    With ``pinned=True`` the logit of action 0 is fixed at zero in every state,
    leaving ``S*(A-1)`` free parameters; a 1-state 2-action pinned policy has
    a single parameter.
    """

    n_states: int
    n_actions: int
    pinned: bool = False

    @property
    def n_free(self) -> int:
        return self.n_actions - 1 if self.pinned else self.n_actions

    @property
    def n_params(self) -> int:
        return self.n_states * self.n_free

    def init(self, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
        return rng.normal(0.0, scale, size=self.n_params)

    def logits(self, params) -> np.ndarray:
        """Full logits with a leading batch axis: ``(B, S, A)``."""
        p = np.asarray(params, dtype=np.float64)
        if p.shape[-1] != self.n_params:
            raise ShapeError(f"expected {self.n_params} logits, got {p.shape[-1]}")
        p = p.reshape(-1, self.n_states, self.n_free)
        if self.pinned:
            p = np.concatenate([np.zeros(p.shape[:2] + (1,)), p], axis=2)
        return p

    def probs(self, params) -> np.ndarray:
        z = self.logits(params)
        z = z - z.max(axis=2, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=2, keepdims=True)

    def _row_probs(self, params, s):
        pi = self.probs(params)
        s = np.asarray(s, dtype=np.int64).ravel()
        if pi.shape[0] == 1:
            return pi[0, s]
        if pi.shape[0] != len(s):
            raise ShapeError("per-row params must match the number of rows")
        return pi[np.arange(len(s)), s]

    @staticmethod
    def squash(a):
        return a

    def sample(self, params, s, rng: np.random.Generator):
        pr = self._row_probs(params, s)
        u = rng.random(len(pr))
        a = (u[:, None] > np.cumsum(pr, axis=1)).sum(axis=1)
        a = np.minimum(a, self.n_actions - 1)
        return a, np.log(pr[np.arange(len(a)), a])

    def log_prob(self, params, s, a) -> np.ndarray:
        pr = self._row_probs(params, s)
        a = np.asarray(a, dtype=np.int64).ravel()
        return np.log(pr[np.arange(len(a)), a])

    def _compress(self, full: np.ndarray) -> np.ndarray:
        # (N, S, A) -> (N, P)
        if self.pinned:
            full = full[:, :, 1:]
        return full.reshape(full.shape[0], -1)

    def _expand(self, v: np.ndarray) -> np.ndarray:
        v = v.reshape(v.shape[0], self.n_states, self.n_free)
        if self.pinned:
            v = np.concatenate([np.zeros(v.shape[:2] + (1,)), v], axis=2)
        return v

    def score(self, params, s, a) -> np.ndarray:
        s = np.asarray(s, dtype=np.int64).ravel()
        a = np.asarray(a, dtype=np.int64).ravel()
        pr = self._row_probs(params, s)
        n = len(s)
        full = np.zeros((n, self.n_states, self.n_actions))
        row = -pr
        row[np.arange(n), a] += 1.0
        full[np.arange(n), s] = row
        return self._compress(full)

    def score_hvp(self, params, s, a, v) -> np.ndarray:
        """``(d^2 log pi(a|s)) @ v`` per row; independent of ``a`` for softmax."""
        s = np.asarray(s, dtype=np.int64).ravel()
        n = len(s)
        pr = self._row_probs(params, s)
        V = self._expand(np.broadcast_to(np.asarray(v, dtype=np.float64), (n, self.n_params)).copy())
        vs = V[np.arange(n), s]
        row = -(pr * vs - pr * (pr * vs).sum(axis=1, keepdims=True))
        full = np.zeros((n, self.n_states, self.n_actions))
        full[np.arange(n), s] = row
        return self._compress(full)

    def weighted_score_sums(self, params_rows, states, actions, weights) -> np.ndarray:
        """``sum_tau weights[k, tau] * sum_t score(params_rows[k]; s_t, a_t)`` for every ``k``.

        ``states``/``actions`` are ``(T, H)`` trajectory tables and ``weights`` is ``(M, T)``.
        """
        T = states.shape[0]
        cnt = np.zeros((T, self.n_states * self.n_actions))
        flat = states * self.n_actions + actions
        for t in range(states.shape[1]):
            cnt[np.arange(T), flat[:, t]] += 1.0
        C = (weights @ cnt).reshape(-1, self.n_states, self.n_actions)
        full = C - C.sum(axis=2, keepdims=True) * self.probs(params_rows)
        return self._compress(full)

    def to_dict(self) -> dict:
        return {"kind": "softmax", "n_states": self.n_states, "n_actions": self.n_actions,
                "pinned": self.pinned}


# ---------------------------------------------------------------------------
# Game
# ---------------------------------------------------------------------------


@dataclass
class TabularBSMG:
    """Finite Bayesian Stackelberg Markov game.

    ``T[s, aD, aA, s']`` is the transition tensor, ``r_D``/``r_A`` have shape
    ``(K, S, AD, AA)`` (one table per attack type) and ``phi`` holds each
    type's attacker logits (fixed for non-adaptive types).
    """

    init_dist: np.ndarray
    T: np.ndarray
    r_D: np.ndarray
    r_A: np.ndarray
    gamma: float
    H: int
    phi: np.ndarray
    adaptive: np.ndarray
    prior: np.ndarray
    pinned: bool = False
    competitive: tuple[float, float] | None = None
    name: str = "tabular"

    def __post_init__(self):
        self.init_dist = np.asarray(self.init_dist, dtype=np.float64)
        self.T = np.asarray(self.T, dtype=np.float64)
        self.r_D = np.asarray(self.r_D, dtype=np.float64)
        self.r_A = np.asarray(self.r_A, dtype=np.float64)
        self.phi = np.atleast_2d(np.asarray(self.phi, dtype=np.float64))
        self.adaptive = np.asarray(self.adaptive, dtype=bool).ravel()
        self.prior = np.asarray(self.prior, dtype=np.float64).ravel()
        S, AD, AA, S2 = self.T.shape
        if S2 != S or self.init_dist.shape != (S,):
            raise ShapeError("transition tensor and initial distribution disagree on |S|")
        if not np.allclose(self.T.sum(axis=3), 1.0, atol=1e-12) or np.any(self.T < 0):
            raise ConfigurationError("transition rows must be distributions")
        if not math.isclose(self.init_dist.sum(), 1.0, abs_tol=1e-12):
            raise ConfigurationError("initial distribution must sum to 1")
        K = self.r_D.shape[0]
        if self.r_D.shape != (K, S, AD, AA) or self.r_A.shape != self.r_D.shape:
            raise ShapeError("reward tables must be (K, S, AD, AA)")
        if self.phi.shape != (K, self.attacker.n_params):
            raise ShapeError("one attacker logit vector per type is required")
        if self.adaptive.shape != (K,) or self.prior.shape != (K,):
            raise ShapeError("adaptive flags and prior need one entry per type")
        if not math.isclose(self.prior.sum(), 1.0, abs_tol=1e-9) or np.any(self.prior < 0):
            raise ConfigurationError("type prior must sum to 1")
        if not 1 <= self.H:
            raise ConfigurationError("horizon must be at least 1")
        if not 0 < self.gamma <= 1:
            raise ConfigurationError("discount must lie in (0, 1]")
        if self.competitive is not None:
            c, d = self.competitive
            if not c < 0 or not np.array_equal(self.r_D, c * self.r_A + d):
                raise ConfigurationError("strict competitiveness flag set but r_D != c*r_A + d")

    @property
    def n_states(self):
        return self.T.shape[0]

    @property
    def n_def_actions(self):
        return self.T.shape[1]

    @property
    def n_att_actions(self):
        return self.T.shape[2]

    @property
    def n_types(self):
        return self.r_D.shape[0]

    @property
    def defender(self) -> SoftmaxPolicy:
        return SoftmaxPolicy(self.n_states, self.n_def_actions, self.pinned)

    @property
    def attacker(self) -> SoftmaxPolicy:
        return SoftmaxPolicy(self.T.shape[0], self.T.shape[2], self.pinned)

    def with_phi(self, phi) -> "TabularBSMG":
        return TabularBSMG(self.init_dist, self.T, self.r_D, self.r_A, self.gamma, self.H,
                           np.asarray(phi, dtype=np.float64), self.adaptive, self.prior,
                           self.pinned, self.competitive, self.name)

    def max_return(self) -> float:
        """Bound on ``|R(tau)|`` for either player."""
        rmax = max(np.abs(self.r_D).max(), np.abs(self.r_A).max())
        return float(rmax * discount_mass(self.gamma, self.H))


def discount_mass(gamma: float, H: int) -> float:
    """``sum_{t=0}^{H-1} gamma^t``."""
    return float(H) if gamma == 1.0 else (1.0 - gamma ** H) / (1.0 - gamma)


def random_tabular_game(rng: np.random.Generator, S: int = 2, AD: int = 2, AA: int = 2,
                        H: int = 3, n_types: int = 2, gamma: float = 0.9,
                        shared_r_D: bool = True, zero_sum: bool = False,
                        adaptive: bool = False, det_transitions: bool = False,
                        pinned: bool = False, phi_scale: float = 1.0,
                        reward_scale: float = 1.0) -> TabularBSMG:
    """Random game with rewards in ``[0, reward_scale]``.

    ``shared_r_D`` gives every type the same defender reward (types differ
    only through their attacker policies). ``zero_sum`` sets ``r_A = -r_D``.
    """
    if det_transitions:
        nxt = rng.integers(0, S, size=(S, AD, AA))
        T = np.zeros((S, AD, AA, S))
        np.put_along_axis(T, nxt[..., None], 1.0, axis=3)
    else:
        T = rng.dirichlet(np.ones(S), size=(S, AD, AA))
    init = rng.dirichlet(np.ones(S))
    if shared_r_D:
        r_D = np.repeat(rng.random((1, S, AD, AA)), n_types, axis=0)
    else:
        r_D = rng.random((n_types, S, AD, AA))
    r_A = -r_D if zero_sum else rng.random((n_types, S, AD, AA))
    r_D, r_A = reward_scale * r_D, reward_scale * r_A
    n_att = S * (AA - 1 if pinned else AA)
    phi = rng.normal(0.0, phi_scale, size=(n_types, n_att))
    return TabularBSMG(init, T, r_D, r_A, gamma, H, phi, np.full(n_types, adaptive),
                       np.full(n_types, 1.0 / n_types), pinned,
                       (-1.0, 0.0) if zero_sum else None)


def fixed_mdp(seed: int = 42, S: int = 3, A: int = 2, H: int = 3, gamma: float = 0.9) -> TabularBSMG:
    """Single-agent MDP (attacker with one action) with seeded transitions and rewards."""
    rng = np.random.default_rng(seed)
    T = rng.dirichlet(np.ones(S), size=(S, A, 1))
    init = rng.dirichlet(np.ones(S))
    r = rng.random((1, S, A, 1))
    return TabularBSMG(init, T, r, -r, gamma, H, np.zeros((1, S)), np.array([False]),
                       np.array([1.0]), False, (-1.0, 0.0), name=f"mdp{seed}")


def one_param_game(H: int = 2, gamma: float = 0.9, r=(0.2, 1.0)) -> TabularBSMG:
    """One state, two defender actions, pinned logits: a single policy parameter."""
    T = np.ones((1, 2, 2, 1))
    r_D = np.array(r, dtype=np.float64).reshape(1, 1, 2, 1).repeat(2, axis=3)
    return TabularBSMG(np.ones(1), T, r_D, -r_D, gamma, H, np.zeros((1, 1)), np.array([False]),
                       np.array([1.0]), True, (-1.0, 0.0), name="one-param")


# ---------------------------------------------------------------------------
# Enumeration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrajTable:
    """All trajectories of a game as index arrays, with factored probabilities.

    ``log_trans`` holds ``log rho0(s1) + sum_t log T(s_{t+1}|...)`` per row.
    """

    states: np.ndarray
    a_D: np.ndarray
    a_A: np.ndarray
    trans: np.ndarray


def trajectory_table(game: TabularBSMG) -> TrajTable:
    S, AD, AA, H = game.n_states, game.n_def_actions, game.n_att_actions, game.H
    n = (S * AD * AA) ** H
    if n > ENUM_CAP:
        raise CapabilityError(f"{n} trajectories exceed the enumeration cap {ENUM_CAP}")
    grid = np.indices((S, AD, AA) * H).reshape(3 * H, -1).T
    states, a_D, a_A = grid[:, 0::3], grid[:, 1::3], grid[:, 2::3]
    p = game.init_dist[states[:, 0]]
    for t in range(H - 1):
        p = p * game.T[states[:, t], a_D[:, t], a_A[:, t], states[:, t + 1]]
    return TrajTable(states, a_D, a_A, p)


def _pi_factor(policy: SoftmaxPolicy, params, states, actions) -> np.ndarray:
    """Trajectory product of policy probabilities; params may be ``(M, P)``."""
    pi = policy.probs(params)                                   # (M, S, A)
    out = pi[:, states, actions]                                # (M, T, H)
    return out.prod(axis=2)


def returns_table(game: TabularBSMG, tab: TrajTable, type_index: int, player: str = "D") -> np.ndarray:
    r = (game.r_D if player == "D" else game.r_A)[type_index]
    w = game.gamma ** np.arange(game.H)
    return (r[tab.states, tab.a_D, tab.a_A] * w).sum(axis=1)


def enumerate_traj_dist(game: TabularBSMG, theta, phi, tab: TrajTable | None = None) -> np.ndarray:
    """Probability of every trajectory row of :func:`trajectory_table`."""
    tab = trajectory_table(game) if tab is None else tab
    return (tab.trans * _pi_factor(game.defender, theta, tab.states, tab.a_D)[0]
            * _pi_factor(game.attacker, phi, tab.states, tab.a_A)[0])


def summed_scores(policy: SoftmaxPolicy, params, states, actions) -> np.ndarray:
    n, H = states.shape
    S = policy.score(params, states.ravel(), actions.ravel())
    return S.reshape(n, H, -1).sum(axis=1)


def exact_value_and_grad(game: TabularBSMG, theta, phi, player: str = "D", type_index: int = 0,
                         tab: TrajTable | None = None):
    """Exact expected discounted return of ``player`` and its gradient in that player's parameters."""
    tab = trajectory_table(game) if tab is None else tab
    q = enumerate_traj_dist(game, theta, phi, tab)
    R = returns_table(game, tab, type_index, player)
    if player == "D":
        s = summed_scores(game.defender, theta, tab.states, tab.a_D)
    elif player == "A":
        s = summed_scores(game.attacker, phi, tab.states, tab.a_A)
    else:
        raise ConfigurationError("player must be 'D' or 'A'")
    return float(q @ R), (q * R) @ s


def traj_grads(game: TabularBSMG, theta, tab: TrajTable, R_D: np.ndarray) -> np.ndarray:
    """Single-trajectory REINFORCE estimates ``g(tau; theta)`` for every row."""
    return summed_scores(game.defender, theta, tab.states, tab.a_D) * R_D[:, None]


def _weights_many(game, thetas, phi, tab):
    pD = _pi_factor(game.defender, thetas, tab.states, tab.a_D)          # (M, T)
    pA = _pi_factor(game.attacker, phi, tab.states, tab.a_A)[0]
    return pD * (tab.trans * pA)[None, :]


def exact_meta_value(game: TabularBSMG, theta, phi, eta: float, type_index: int = 0,
                     n_inner: int = 1, rng: np.random.Generator | None = None,
                     n_mc: int = 2000, tab: TrajTable | None = None) -> float:
    """``E_tau[J(theta + eta * g(tau))]`` for single-trajectory adaptation.

    With ``n_inner > 1`` the outer expectation is estimated by Monte Carlo over
    ``n_mc`` adaptation batches (approximate; needs ``rng``).
    """
    tab = trajectory_table(game) if tab is None else tab
    theta = np.asarray(theta, dtype=np.float64)
    q = enumerate_traj_dist(game, theta, phi, tab)
    R = returns_table(game, tab, type_index, "D")
    g = traj_grads(game, theta, tab, R)
    if n_inner == 1:
        thetas = theta[None, :] + eta * g
        live = q > 0
        J = np.zeros(len(q))
        idx = np.flatnonzero(live)
        for chunk in np.array_split(idx, max(1, len(idx) // 256)):
            J[chunk] = _weights_many(game, thetas[chunk], phi, tab) @ R
        return float(q @ J)
    if rng is None:
        raise ConfigurationError("nested Monte Carlo needs an rng")
    draws = rng.choice(len(q), size=(n_mc, n_inner), p=q / q.sum())
    thetas = theta[None, :] + eta * g[draws].mean(axis=1)
    return float((_weights_many(game, thetas, phi, tab) @ R).mean())


def exact_meta_grads(game: TabularBSMG, theta, phi, eta: float, type_index: int = 0,
                     tab: TrajTable | None = None):
    """Exact ``(L_D, grad_theta L_D, L_A, grad_phi L_A)`` for single-trajectory adaptation.

    ``L_P(theta, phi) = sum_tau q(tau) J_P(theta + eta g(tau), phi)``.
    """
    tab = trajectory_table(game) if tab is None else tab
    theta = np.asarray(theta, dtype=np.float64)
    pol_D, pol_A = game.defender, game.attacker
    q = enumerate_traj_dist(game, theta, phi, tab)
    R_D = returns_table(game, tab, type_index, "D")
    R_A = returns_table(game, tab, type_index, "A")
    sD = summed_scores(pol_D, theta, tab.states, tab.a_D)
    sA = summed_scores(pol_A, phi, tab.states, tab.a_A)
    live = np.flatnonzero(q > 0)
    thetas = theta[None, :] + eta * sD[live] * R_D[live, None]
    W = _weights_many(game, thetas, phi, tab)                              # (M, T)
    J_D = W @ R_D
    J_A = W @ R_A
    gA = W @ (R_A[:, None] * sA)                                           # grad_phi J_A at theta'
    H = game.H
    gD = pol_D.weighted_score_sums(thetas, tab.states, tab.a_D, W * R_D[None, :])
    # (I + eta * dg/dtheta)^T grad J(theta'), dg/dtheta = R * sum_t d^2 log pi_t (symmetric)
    st, at = tab.states[live], tab.a_D[live]
    hv = pol_D.score_hvp(theta, st.ravel(), at.ravel(), np.repeat(gD, H, axis=0))
    hv = hv.reshape(len(live), H, -1).sum(axis=1) * R_D[live, None]
    ql = q[live]
    grad_LD = ql @ (gD + eta * hv) + (ql * J_D) @ sD[live]
    grad_LA = ql @ gA + (ql * J_A) @ sA[live]
    return float(ql @ J_D), grad_LD, float(ql @ J_A), grad_LA


# ---------------------------------------------------------------------------
# Distances and bounds
# ---------------------------------------------------------------------------


def tv_distance(p, q) -> float:
    """Half the L1 distance between two tables on the same index set."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ShapeError("tv_distance needs tables on the same support")
    return 0.5 * float(np.abs(p - q).sum())


def marginal_residue(game: TabularBSMG, phi, tab: TrajTable | None = None) -> np.ndarray:
    """Trajectory factor left after removing the defender's policy terms.

    Indexed by the full trajectory rows of :func:`trajectory_table` (the
    transition kernel depends on the defender action, so the row keeps it).
    The table is not normalised: it sums to ``|A_D|**H``.
    """
    tab = trajectory_table(game) if tab is None else tab
    return tab.trans * _pi_factor(game.attacker, phi, tab.states, tab.a_A)[0]


@dataclass(frozen=True)
class BoundReport:
    lhs: float
    C: float
    G: float
    G_global: float
    holds: bool


def max_traj_grad_norm(game: TabularBSMG, thetas, tab: TrajTable, type_index: int = 0) -> float:
    R = returns_table(game, tab, type_index, "D")
    best = 0.0
    for th in np.atleast_2d(thetas):
        best = max(best, float(np.linalg.norm(traj_grads(game, th, tab, R), axis=1).max()))
    return best


def generalization_bound_check(game: TabularBSMG, theta, phis, phi_new, eta: float,
                               theta_set=None, type_index: int = 0) -> BoundReport:
    """Compare ``|V_new(theta) - mean_i V_i(theta)|`` with the type-distance bound ``C``.

    All types share the defender reward table ``type_index``. ``G`` is the
    largest single-trajectory gradient norm over ``theta_set`` (defaults to
    ``{theta}``) and every one-step adapted point reachable from ``theta``.
    """
    tab = trajectory_table(game)
    theta = np.asarray(theta, dtype=np.float64)
    phis = [np.asarray(p, dtype=np.float64) for p in phis]
    m = len(phis)
    if m < 1:
        raise ConfigurationError("need at least one seen attack policy")
    v_seen = [exact_meta_value(game, theta, p, eta, type_index, tab=tab) for p in phis]
    v_new = exact_meta_value(game, theta, phi_new, eta, type_index, tab=tab)
    lhs = abs(v_new - float(np.mean(v_seen)))

    R = returns_table(game, tab, type_index, "D")
    pts = [theta] if theta_set is None else [np.asarray(t, dtype=np.float64) for t in theta_set]
    adapted = theta[None, :] + eta * traj_grads(game, theta, tab, R)
    G = max(max_traj_grad_norm(game, np.stack(pts), tab, type_index),
            max_traj_grad_norm(game, adapted, tab, type_index))
    G_global = math.sqrt(2.0) * game.H * float(np.abs(R).max())

    d_new = marginal_residue(game, phi_new, tab)
    ds = [marginal_residue(game, p, tab) for p in phis]
    C = (2.0 * eta * G ** 2 / m) * sum(tv_distance(d_new, d) for d in ds) \
        + discount_mass(game.gamma, game.H) * tv_distance(d_new, np.mean(ds, axis=0))
    return BoundReport(lhs, C, G, G_global, lhs <= C)


# ---------------------------------------------------------------------------
# Equilibrium residuals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoseResidual:
    eps_D: float
    eps_A: float
    per_type_D: tuple[float, ...] = ()
    per_type_A: tuple[float, ...] = ()


def fose_residual_exact(game: TabularBSMG, theta, phis, eta: float) -> FoseResidual:
    """Unconstrained residual pair: prior-averaged ``||grad_theta L_D||`` and worst ``||grad_phi L_A||``.

    Non-adaptive types contribute to the defender side only.
    """
    tab = trajectory_table(game)
    phis = np.atleast_2d(np.asarray(phis, dtype=np.float64))
    gD_total = np.zeros(game.defender.n_params)
    per_D, per_A = [], []
    for k in range(game.n_types):
        _, gD, _, gA = exact_meta_grads(game, theta, phis[k], eta, k, tab)
        gD_total += game.prior[k] * gD
        per_D.append(float(np.linalg.norm(gD)))
        per_A.append(float(np.linalg.norm(gA)) if game.adaptive[k] else 0.0)
    return FoseResidual(float(np.linalg.norm(gD_total)), max(per_A) if per_A else 0.0,
                        tuple(per_D), tuple(per_A))


def pl_constant(points, value_fn, grad_fn) -> float:
    """Largest ``mu`` with ``||grad f(x)||^2 / (2 mu) >= max_grid f - f(x)`` on the grid.

    Returns ``inf`` when every gap is zero (condition vacuous) and ``0.0``
    when some point with a positive gap has zero gradient.
    """
    pts = [np.asarray(p, dtype=np.float64) for p in points]
    vals = np.array([value_fn(p) for p in pts])
    top = vals.max()
    mu = math.inf
    for p, v in zip(pts, vals):
        gap = top - v
        if gap <= 1e-14:
            continue
        gn2 = float(np.sum(np.asarray(grad_fn(p)) ** 2))
        mu = min(mu, gn2 / (2.0 * gap))
    return mu


def pl_probe(game: TabularBSMG, theta_grid, phi_grid, eta: float, type_index: int = 0):
    """Empirical PL constants ``(mu_D, mu_A)`` of the meta objectives over parameter grids.

    ``mu_A`` is the worst over ``theta_grid`` of the attacker's constant in
    ``phi``; ``mu_D`` is the worst over ``phi_grid`` of the defender's in ``theta``.
    """
    tab = trajectory_table(game)
    cache: dict = {}

    def grads(th, ph):
        key = (np.asarray(th).tobytes(), np.asarray(ph).tobytes())
        if key not in cache:
            cache[key] = exact_meta_grads(game, th, ph, eta, type_index, tab)
        return cache[key]

    mu_A = min((pl_constant(phi_grid, lambda ph, th=th: grads(th, ph)[2],
                            lambda ph, th=th: grads(th, ph)[3]) for th in theta_grid), default=math.inf)
    mu_D = min((pl_constant(theta_grid, lambda th, ph=ph: grads(th, ph)[0],
                            lambda th, ph=ph: grads(th, ph)[1]) for ph in phi_grid), default=math.inf)
    return mu_D, mu_A
