"""Independent reference implementations and the one-command oracle suite."""
from __future__ import annotations

import csv
import itertools
import math
from pathlib import Path

import numpy as np

from . import defenses as dfn
from . import flcore
from . import tabular as tb


# ---------------------------------------------------------------------------
# Brute-force references (plain loops, no shared code with the library)
# ---------------------------------------------------------------------------

def brute_trimmed_mean(rows, beta: float) -> np.ndarray:
    m, d = len(rows), len(rows[0])
    k = int(math.floor(beta * m))
    out = np.empty(d)
    for j in range(d):
        col = sorted(float(r[j]) for r in rows)
        keep = col[k:m - k]
        out[j] = math.fsum(keep) / len(keep)
    return out


def brute_krum_index(rows, f: int) -> int:
    m = len(rows)
    best, best_i = math.inf, -1
    for i in range(m):
        dists = sorted(math.fsum((float(a) - float(b)) ** 2 for a, b in zip(rows[i], rows[j]))
                       for j in range(m) if j != i)
        s = math.fsum(dists[:m - f - 2])
        if s < best:
            best, best_i = s, i
    return best_i


def central_fd(fn, x, h: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return out


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(float(np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(a - b)) / scale


# ---------------------------------------------------------------------------
# Random instances
# ---------------------------------------------------------------------------

def random_model_batch(rng: np.random.Generator):
    """Small tanh model (linear or one/two hidden layers) and a labelled batch."""
    d = int(rng.integers(2, 7))
    C = int(rng.integers(2, 5))
    depth = int(rng.integers(0, 3))
    dims = [d] + [int(rng.integers(2, 6)) for _ in range(depth)] + [C]
    model = flcore.init_model(dims, rng, 1.0)
    n = int(rng.integers(1, 9))
    X = rng.normal(size=(n, d))
    y = rng.integers(0, C, size=n)
    return model, X, y


def bound_instance(rng: np.random.Generator, m_seen: int = 2):
    """Tabular game with shared defender reward, ``m_seen`` seen types and one new type."""
    g = tb.random_tabular_game(rng, S=2, AD=2, AA=2, H=2, n_types=m_seen + 1, gamma=0.9,
                               shared_r_D=True)
    return g, list(g.phi[:m_seen]), g.phi[m_seen]


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

GRAD_TOL = 1e-5


def check_grad(rng) -> tuple[float, bool]:
    model, X, y = random_model_batch(rng)
    g = flcore.grad(model, (X, y))
    fd = central_fd(lambda w: flcore.forward_loss(model.with_weights(w), (X, y)), model.weights)
    e = rel_err(g, fd) if np.linalg.norm(fd) > 1e-10 else float(np.linalg.norm(g - fd))
    return e, e < GRAD_TOL


def check_trimmed(rng) -> tuple[float, bool]:
    m = int(rng.integers(3, 11))
    d = int(rng.integers(1, 6))
    U = rng.normal(size=(m, d))
    kmax = (m - 1) // 2
    beta = (int(rng.integers(0, kmax + 1)) + rng.random() * 0.99) / m
    if int(math.floor(beta * m)) > kmax:
        beta = kmax / m
    e = float(np.abs(dfn.trimmed_mean(list(U), beta) - brute_trimmed_mean(U.tolist(), beta)).max())
    return e, e <= 1e-12


def check_krum(rng) -> tuple[float, bool]:
    m = int(rng.integers(3, 11))
    d = int(rng.integers(1, 6))
    f = int(rng.integers(0, m - 2))
    U = rng.normal(size=(m, d))
    _, idx = dfn.krum(list(U), f)
    ref = brute_krum_index(U.tolist(), f)
    return float(idx != ref), idx == ref


def check_bound(rng) -> tuple[float, bool]:
    g, seen, new = bound_instance(rng)
    th = rng.normal(size=g.defender.n_params)
    rep = tb.generalization_bound_check(g, th, seen, new, 0.1)
    return rep.C - rep.lhs, bool(rep.holds)


def check_trajectory_tv(rng) -> tuple[float, bool]:
    g, seen, new = bound_instance(rng)
    th = rng.normal(size=g.defender.n_params)
    tab = tb.trajectory_table(g)
    q_i = tb.enumerate_traj_dist(g, th, seen[0], tab)
    q_j = tb.enumerate_traj_dist(g, th, new, tab)
    lhs = tb.tv_distance(q_i, q_j)
    rhs = tb.tv_distance(tb.marginal_residue(g, seen[0], tab), tb.marginal_residue(g, new, tab))
    return rhs - lhs, lhs <= rhs


def check_exact_grad(rng) -> tuple[float, bool]:
    g = tb.random_tabular_game(rng, S=2, AD=2, AA=2, H=2, n_types=1)
    th = rng.normal(size=g.defender.n_params)
    _, gr = tb.exact_value_and_grad(g, th, g.phi[0])
    fd = central_fd(lambda t: tb.exact_value_and_grad(g, t, g.phi[0])[0], th)
    e = rel_err(gr, fd)
    return e, e < 1e-6


def check_meta_grad(rng) -> tuple[float, bool]:
    g = tb.random_tabular_game(rng, S=2, AD=2, AA=2, H=2, n_types=1, adaptive=True)
    th = rng.normal(size=g.defender.n_params)
    ph = g.phi[0]
    _, gD, _, gA = tb.exact_meta_grads(g, th, ph, 0.1)
    fdD = central_fd(lambda t: tb.exact_meta_value(g, t, ph, 0.1), th)
    fdA = central_fd(lambda p: tb.exact_meta_grads(g, th, p, 0.1)[2], ph)
    e = max(rel_err(gD, fdD), rel_err(gA, fdA))
    return e, e < 1e-6


CHECKS = {
    "grad_fd": check_grad,
    "trimmed_mean_brute": check_trimmed,
    "krum_brute": check_krum,
    "exact_grad_fd": check_exact_grad,
    "exact_meta_grad_fd": check_meta_grad,
    "generalization_bound": check_bound,
    "trajectory_tv": check_trajectory_tv,
}


def oracle_suite(seed: int, n_instances: int, out_dir) -> tuple[Path, int]:
    """Run every check on ``n_instances`` seeded instances; exit code 1 if any fails."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, failed = [], 0
    for (name, fn), i in itertools.product(CHECKS.items(), range(n_instances)):
        rng = np.random.default_rng([seed, list(CHECKS).index(name), i])
        value, ok = fn(rng)
        failed += not ok
        rows.append((name, i, f"{value:.6e}", int(ok)))
    path = out / "oracle_report.csv"
    with path.open("w", newline="") as fh:
        fh.write(f"# metasg oracle seed={seed} n_instances={n_instances} failures={failed}\n")
        w = csv.writer(fh)
        w.writerow(["check", "instance", "value", "passed"])
        w.writerows(rows)
    return path, int(failed > 0)
