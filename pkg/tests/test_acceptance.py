"""Acceptance suite: one test per criterion, each printing a verdict line in the summary.

The directional FL experiments (8-10) run ten seeds each and take several
minutes apiece on one core.
"""
import time
from pathlib import Path

import numpy as np

from metasg import oracles
from metasg import tabular as tb
from metasg.config import ExperimentConfig, load_config
from metasg.env import TabularTaskEnv, sample_tabular
from metasg.meta import MetaTrainConfig, meta_sg_train
from metasg.pipeline import run_baseline_matrix, run_pipeline
from metasg.policy import adapted_params, debiased_meta_grad, hessian_estimate, params_digest, pg_estimate

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = range(10)


def _record(record_property, num, detail):
    record_property("criterion", num)
    record_property("detail", detail)


# ---------------------------------------------------------------------------
# 1-2: gradient and aggregation oracles
# ---------------------------------------------------------------------------

def test_c01_gradient_oracle(record_property):
    t = time.perf_counter()
    errs, ok = zip(*(oracles.check_grad(np.random.default_rng([1, i])) for i in range(100)))
    secs = time.perf_counter() - t
    _record(record_property, 1, f"max rel err {max(errs):.2e} (< 1e-5), {secs:.1f}s (< 10s)")
    assert all(ok) and secs < 10


def test_c02_aggregation_oracles(record_property):
    t = time.perf_counter()
    krum = [oracles.check_krum(np.random.default_rng([2, 0, i]))[1] for i in range(1000)]
    trim = [oracles.check_trimmed(np.random.default_rng([2, 1, i])) for i in range(1000)]
    secs = time.perf_counter() - t
    worst = max(e for e, _ in trim)
    _record(record_property, 2, f"krum {sum(krum)}/1000 exact, trimmed max err {worst:.1e}, {secs:.1f}s")
    assert all(krum) and all(ok for _, ok in trim) and secs < 10


# ---------------------------------------------------------------------------
# 3-4: policy-gradient estimators against exact enumeration
# ---------------------------------------------------------------------------

def test_c03_pg_estimate(record_property):
    t = time.perf_counter()
    g = tb.fixed_mdp(42)
    rng = np.random.default_rng(0)
    th = rng.normal(size=g.defender.n_params)
    _, exact = tb.exact_value_and_grad(g, th, g.phi[0])
    sizes = (2_000, 20_000, 200_000)
    rms = []
    for n in sizes:
        errs = [oracles.rel_err(pg_estimate(sample_tabular(g, th, g.phi[0], 0, n, rng), g.defender, th,
                                            mode="reward_to_go").vector, exact) for _ in range(8)]
        rms.append(float(np.sqrt(np.mean(np.square(errs)))))
        if n == sizes[-1]:
            top = errs[0]
    slope = float(np.polyfit(np.log(sizes), np.log(rms), 1)[0])
    secs = time.perf_counter() - t
    _record(record_property, 3, f"err at 2e5 {top:.4f} (< 0.02), slope {slope:.3f} (-0.5 +- 0.1), {secs:.1f}s")
    assert top < 0.02 and abs(slope + 0.5) <= 0.1 and secs < 60


def test_c04_debiased_and_hessian(record_property):
    t = time.perf_counter()
    g = tb.fixed_mdp(42)
    pol = g.defender
    th = np.zeros(pol.n_params)
    phi, eta = g.phi[0], 0.1
    fd = oracles.central_fd(lambda x: tb.exact_meta_value(g, x, phi, eta), th)
    rng = np.random.default_rng(1)
    ests = []
    for _ in range(100):
        b1 = sample_tabular(g, th, phi, 0, 10_000, rng)
        tp = adapted_params(pol, th, eta, b1, inner_size=1)
        b2 = sample_tabular(g, tp, phi, 0, len(tp), rng, group=np.arange(len(tp)))
        b2.digest_D = params_digest(tp)
        ests.append(debiased_meta_grad(pol, th, eta, b1, b2, inner_size=1).vector)
    meta_err = oracles.rel_err(np.mean(ests, axis=0), fd)

    g1 = tb.one_param_game()
    th1 = np.array([0.3])
    h = 1e-4
    H_fd = (tb.exact_value_and_grad(g1, th1 + h, g1.phi[0])[1]
            - tb.exact_value_and_grad(g1, th1 - h, g1.phi[0])[1]) / (2 * h)
    H_est = hessian_estimate(sample_tabular(g1, th1, g1.phi[0], 0, 500_000, rng), g1.defender, th1)
    h_err = abs(H_est[0, 0] - H_fd[0]) / abs(H_fd[0])
    secs = time.perf_counter() - t
    _record(record_property, 4, f"meta-grad err {meta_err:.4f}, hessian err {h_err:.4f} (< 0.05), {secs:.0f}s")
    assert meta_err < 0.05 and h_err < 0.05 and secs < 300


# ---------------------------------------------------------------------------
# 5-6: generalization bound and the trajectory TV bound by enumeration
# ---------------------------------------------------------------------------

def _instances():
    for i in range(100):
        rng = np.random.default_rng([5, i])
        g, seen, new = oracles.bound_instance(rng)
        yield rng, g, seen, new


def test_c05_generalization_bound(record_property):
    t = time.perf_counter()
    held, tight = 0, np.inf
    for rng, g, seen, new in _instances():
        for _ in range(10):
            rep = tb.generalization_bound_check(g, rng.normal(size=g.defender.n_params), seen, new, 0.1)
            held += rep.holds
            tight = min(tight, rep.C - rep.lhs)
    secs = time.perf_counter() - t
    _record(record_property, 5, f"{held}/1000 hold, min slack {tight:.3g}, {secs:.0f}s (< 120s)")
    assert held == 1000 and secs < 120


def test_c06_trajectory_tv(record_property):
    t = time.perf_counter()
    held = 0
    for rng, g, seen, new in _instances():
        tab = tb.trajectory_table(g)
        d_new = tb.marginal_residue(g, new, tab)
        d_old = tb.marginal_residue(g, seen[0], tab)
        rhs = tb.tv_distance(d_old, d_new)
        for _ in range(10):
            th = rng.normal(size=g.defender.n_params)
            lhs = tb.tv_distance(tb.enumerate_traj_dist(g, th, seen[0], tab),
                                 tb.enumerate_traj_dist(g, th, new, tab))
            held += lhs <= rhs
    secs = time.perf_counter() - t
    _record(record_property, 6, f"{held}/1000 hold, {secs:.1f}s (< 60s)")
    assert held == 1000 and secs < 60


# ---------------------------------------------------------------------------
# 7: convergence to an approximate meta-FOSE on tabular games
# ---------------------------------------------------------------------------

def test_c07_fose_convergence(record_property):
    t = time.perf_counter()
    hits, finals = 0, []
    for seed in SEEDS:
        rng = np.random.default_rng(seed)
        g = tb.random_tabular_game(rng, S=3, AD=2, AA=2, H=3, n_types=2, zero_sum=True, adaptive=True,
                                   gamma=0.9, reward_scale=3.0)
        th0 = rng.normal(size=g.defender.n_params)
        cfg = MetaTrainConfig(N_D=200, N_A=5, K=2, kappa_D=1.0, kappa_A=1.0, eta=0.05, N_b=200,
                              variant="reptile", seed=seed, step_decay=0.05)
        th, phis, _ = meta_sg_train(TabularTaskEnv(g), cfg, th0, g.phi.copy())
        r = tb.fose_residual_exact(g, th, phis, 0.05)
        finals.append(max(r.eps_D, r.eps_A))
        hits += finals[-1] < 0.1
    secs = time.perf_counter() - t
    _record(record_property, 7, f"{hits}/10 seeds below 0.1 (need 8), worst {max(finals):.3f}, {secs:.0f}s")
    assert hits >= 8 and secs < 600


# ---------------------------------------------------------------------------
# 8-10: directional FL experiments
# ---------------------------------------------------------------------------

def _with_attack(cfg: ExperimentConfig, attack: dict | None, out) -> ExperimentConfig:
    d = cfg.model_dump(mode="json")
    if attack is not None:
        d["adapt"]["attack"] = attack
    d["output"]["dir"] = str(out)
    return ExperimentConfig.model_validate(d)


def _arms(cfg_path, tmp, seed):
    """Learned defense (full pipeline) plus FedAvg without and with the online attack."""
    cfg = load_config(cfg_path).with_overrides(seed=seed)
    base = tmp / str(seed)
    full = run_pipeline(_with_attack(cfg, None, base / "full"), plots=False).summary
    na = run_pipeline(_with_attack(cfg, {"method": "NA"}, base / "na"), ["evaluate"], plots=False).summary
    att = run_pipeline(_with_attack(cfg, None, base / "fedavg"), ["evaluate"], plots=False).summary
    return na, att, full


def test_c08_untargeted_direction(record_property, tmp_path):
    t = time.perf_counter()
    rows = [_arms(CONFIGS / "untargeted.yaml", tmp_path, s) for s in SEEDS]
    na, ipm, learned = (np.median([r[i]["final_clean_acc"] for r in rows]) for i in range(3))
    secs = time.perf_counter() - t
    _record(record_property, 8, f"median acc NA {na:.3f}, FedAvg+IPM {ipm:.3f} (drop {na - ipm:.3f} >= 0.10), "
                                f"learned {learned:.3f} (gap {na - learned:.3f} <= 0.05), {secs:.0f}s")
    assert na - ipm >= 0.10 and na - learned <= 0.05 and secs < 900


def test_c09_backdoor_direction(record_property, tmp_path):
    rows = [_arms(CONFIGS / "backdoor.yaml", tmp_path, s) for s in SEEDS]
    na_acc = np.median([r[0]["final_clean_acc"] for r in rows])
    fed_bac = np.median([r[1]["final_backdoor_acc"] for r in rows])
    bac = np.median([r[2]["final_backdoor_acc"] for r in rows])
    acc = np.median([r[2]["final_clean_acc"] for r in rows])
    _record(record_property, 9, f"median FedAvg+BFL backdoor {fed_bac:.3f} (>= 0.8), learned backdoor {bac:.3f} "
                                f"(<= 0.3), learned acc {acc:.3f} vs NA {na_acc:.3f} (within 0.10)")
    assert fed_bac >= 0.8 and bac <= 0.3 and na_acc - acc <= 0.10


def test_c10_ablations(record_property, tmp_path):
    gaps_pre, gaps_rand = [], []
    for seed in SEEDS:
        cfg = load_config(CONFIGS / "heldout.yaml").with_overrides(seed=seed)
        base = tmp_path / str(seed)
        full = run_pipeline(_with_attack(cfg, None, base / "full"), plots=False)
        pre = run_pipeline(_with_attack(cfg, None, base / "pre"), ["evaluate"],
                           checkpoint=full.out_dir / "pretrain.npz", plots=False)
        rand = run_pipeline(_with_attack(cfg, None, base / "rand"), ["adapt", "evaluate"], init="random",
                            plots=False)
        gaps_pre.append(full.summary["def_return"] - pre.summary["def_return"])
        gaps_rand.append(full.summary["def_return"] - rand.summary["def_return"])
    mp, mr = float(np.median(gaps_pre)), float(np.median(gaps_rand))
    _record(record_property, 10, f"median return gap vs pretrain-only {mp:.4f}, vs adapt-from-random {mr:.4f} (> 0)")
    assert mp > 0 and mr > 0


# ---------------------------------------------------------------------------
# 11: determinism
# ---------------------------------------------------------------------------

def test_c11_determinism(record_property, tmp_path):
    names = ("metrics.csv", "summary.csv", "train_log.csv", "adapt_log.csv")
    same = []
    for cfg_name in ("smoke.yaml", "heldout.yaml"):
        cfg = load_config(CONFIGS / cfg_name)
        if cfg_name != "smoke.yaml":
            d = cfg.model_dump(mode="json")
            d["train"]["N_D"], d["fl"]["rounds"] = 2, 5
            cfg = ExperimentConfig.model_validate(d)
        for run in ("a", "b"):
            run_pipeline(cfg, out_dir=tmp_path / cfg_name / run, plots=False)
            run_baseline_matrix(cfg, out_dir=tmp_path / cfg_name / run / "m", plots=False)
        for n in names + ("m/matrix.csv",):
            same.append((tmp_path / cfg_name / "a" / n).read_bytes() == (tmp_path / cfg_name / "b" / n).read_bytes())
    _record(record_property, 11, f"{sum(same)}/{len(same)} CSVs byte-identical across reruns")
    assert all(same)
