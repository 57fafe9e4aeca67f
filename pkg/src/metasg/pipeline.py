"""Pretrain -> adapt -> evaluate pipeline, the baseline matrix and artifact writing."""
from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_sha, dump_config
from .defenses import PostTrainSpec
from .env import ACTION_DIM, BSMGConfig, FLTaskEnv, FLWorld, make_world, rollout
from .errors import ConfigurationError, ProtocolError
from .flcore import FLConfig
from .meta import MetaTrainConfig, TrainLog, meta_sg_train, online_adapt
from .policy import GaussianPolicy, discounts, params_digest

STAGES = ("pretrain", "adapt", "evaluate")
METRIC_COLUMNS = ("run_id", "round", "clean_acc", "clean_loss", "backdoor_acc", "r_D", "r_xi",
                  "action_alpha", "action_beta", "action_psi")
SERIES = METRIC_COLUMNS[2:]
WORKERS_ENV = "METASG_WORKERS"


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------

def build_fl(cfg: ExperimentConfig) -> FLConfig:
    f = cfg.fl
    return FLConfig(n_clients=f.n_clients, n_targeted=f.n_targeted, n_untargeted=f.n_untargeted,
                    subsample_rate=f.subsample_rate, local_lr=f.local_lr, server_lr=f.server_lr,
                    local_iters=f.local_iters, batch_size=f.batch_size, rounds=f.rounds,
                    non_iid_q=f.non_iid_q, seed=cfg.seed, lr_schedule=tuple(f.lr_schedule))


def build_world(cfg: ExperimentConfig) -> FLWorld:
    g = cfg.game
    return make_world(cfg.seed, n_examples=g.n_examples, dim=g.dim, n_classes=g.n_classes,
                      separation=g.separation, n_clients=cfg.fl.n_clients, q=cfg.fl.non_iid_q,
                      hidden=g.hidden, init_scale=g.init_scale, root_size=g.root_size,
                      n_test=g.n_test)


def build_game(cfg: ExperimentConfig, world: FLWorld, types=None, prior=None, H=None) -> BSMGConfig:
    d = cfg.defense
    types = cfg.domain_types() if types is None else tuple(types)
    prior = cfg.prior() if prior is None else tuple(prior)
    return BSMGConfig(build_fl(cfg), world, types, prior, H=H or cfg.fl.rounds, gamma=cfg.game.gamma,
                      posttrain=PostTrainSpec(d.posttrain, d.psi_low, d.psi_high),
                      obs_round=cfg.game.obs_round, backdoor_penalty=cfg.game.backdoor_penalty,
                      baseline_beta=d.baseline_beta, baseline_f=d.baseline_f,
                      baseline_alpha=d.baseline_alpha, baseline_psi=d.baseline_psi,
                      baseline_prune=d.baseline_prune)


def build_policy(cfg: ExperimentConfig, game: BSMGConfig) -> GaussianPolicy:
    return GaussianPolicy(game.obs_dim(), ACTION_DIM, tuple(cfg.defense.policy_hidden),
                          cfg.defense.log_std_init)


def train_config(cfg: ExperimentConfig) -> MetaTrainConfig:
    return MetaTrainConfig(seed=cfg.seed, **cfg.train.model_dump())


def eval_seeds(seed: int, n: int) -> list[int]:
    """Episode seeds shared by every arm evaluated under the same master seed."""
    return [int(s) for s in np.random.default_rng([seed, 3]).integers(0, 2 ** 31 - 1, size=n)]


def csv_header(cfg: ExperimentConfig, kind: str) -> str:
    return f"# metasg {__version__} {kind} seed={cfg.seed} config_sha={config_sha(cfg)}"


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, theta, phis, cfg: ExperimentConfig, stage: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"version": __version__, "stage": stage, "seed": cfg.seed, "config_sha": config_sha(cfg),
            "theta_digest": params_digest(theta)}
    arrays = {"theta": np.asarray(theta, dtype=np.float64), "meta": np.array(json.dumps(meta, sort_keys=True))}
    if phis is not None:
        arrays["phis"] = np.asarray(phis, dtype=np.float64)
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise ProtocolError(f"no checkpoint at {path}")
    with np.load(path, allow_pickle=False) as z:
        theta = z["theta"].copy()
        phis = z["phis"].copy() if "phis" in z else None
        meta = json.loads(str(z["meta"]))
    if params_digest(theta) != meta["theta_digest"]:
        raise ProtocolError(f"checkpoint {path} is corrupted (digest mismatch)")
    return theta, phis, meta


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

@dataclass
class RunArtifact:
    out_dir: Path
    seed: int
    config_sha: str
    version: str
    stages: tuple[str, ...]
    config_snapshot: Path | None = None
    checkpoint: Path | None = None
    train_log: Path | None = None
    adapt_log: Path | None = None
    metrics: Path | None = None
    summary_csv: Path | None = None
    plots: list[Path] = field(default_factory=list)
    summary: dict = field(default_factory=dict)


def _check_stages(stages) -> tuple[str, ...]:
    stages = tuple(stages)
    unknown = [s for s in stages if s not in STAGES]
    if unknown or not stages:
        raise ConfigurationError(f"stages must be a nonempty subset of {STAGES}, got {stages}")
    if len(set(stages)) != len(stages) or list(stages) != sorted(stages, key=STAGES.index):
        raise ConfigurationError("stages must be distinct and ordered pretrain, adapt, evaluate")
    return stages


def _online_phi(cfg: ExperimentConfig, env: FLTaskEnv, phis, xi) -> np.ndarray | None:
    if not xi.adaptive:
        return None
    names = [t.name for t in cfg.domain_types()]
    if phis is not None and xi.name in names:
        return np.asarray(phis)[names.index(xi.name)]
    return np.zeros(env.attacker.n_params)


def evaluate_policy(game: BSMGConfig, policy, theta, xi, seeds, phi=None, baseline=None):
    """Deterministic episodes against ``xi``; each series averaged over ``seeds``."""
    trajs = [rollout(game, policy, theta, xi, s, None if phi is None else _attacker(game), phi,
                     deterministic=True, baseline=baseline) for s in seeds]
    cols = {
        "clean_acc": [[i.clean_acc for i in t.info] for t in trajs],
        "clean_loss": [[i.clean_loss for i in t.info] for t in trajs],
        "backdoor_acc": [[i.backdoor_acc for i in t.info] for t in trajs],
        "r_D": [t.r_D for t in trajs],
        "r_xi": [t.r_A for t in trajs],
        "action_alpha": [[i.alpha for i in t.info] for t in trajs],
        "action_beta": [[i.beta for i in t.info] for t in trajs],
        "action_psi": [[i.psi for i in t.info] for t in trajs],
    }
    series = {k: np.mean(np.asarray(v, dtype=np.float64), axis=0) for k, v in cols.items()}
    w = discounts(game.gamma, game.H)
    ret = float(np.mean([w @ t.r_D for t in trajs]))
    return series, ret


def _attacker(game: BSMGConfig) -> GaussianPolicy:
    return GaussianPolicy(game.obs_dim(), ACTION_DIM)


def summarize(series: dict, def_return: float) -> dict:
    acc, bac = series["clean_acc"], series["backdoor_acc"]
    return {"final_clean_acc": float(acc[-1]), "mean_clean_acc": float(acc.mean()),
            "final_backdoor_acc": float(bac[-1]), "mean_backdoor_acc": float(bac.mean()),
            "def_return": def_return}


def write_metrics_csv(path, series: dict, run_id: str, header: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = len(series["clean_acc"])
    with path.open("w", newline="") as fh:
        fh.write(header + "\n")
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for t in range(n):
            w.writerow([run_id, t] + [_num(series[c][t]) for c in SERIES])
    return path


def write_summary_csv(path, summary: dict, run_id: str, header: str) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        fh.write(header + "\n")
        w = csv.writer(fh)
        w.writerow(["run_id", *summary])
        w.writerow([run_id, *(_num(v) for v in summary.values())])
    return path


def _num(v) -> str:
    v = float(v)
    return "nan" if np.isnan(v) else f"{v:.10g}"


def _find_checkpoint(out: Path, explicit, adapting: bool) -> Path | None:
    if explicit is not None:
        return Path(explicit)
    names = ("pretrain.npz",) if adapting else ("adapted.npz", "pretrain.npz")
    for n in names:
        if (out / n).exists():
            return out / n
    return None


def run_pipeline(cfg: ExperimentConfig, stages=STAGES, init: str = "checkpoint", out_dir=None,
                 checkpoint=None, plots: bool | None = None) -> RunArtifact:
    """Run the requested stages and write the artifact into ``out_dir``.

    ``init`` picks where ``adapt`` starts when pretraining is not part of this
    call: ``checkpoint`` loads ``checkpoint`` (default ``out_dir/pretrain.npz``),
    ``random`` starts from a freshly initialised policy.
    """
    stages = _check_stages(stages)
    if init not in ("checkpoint", "random"):
        raise ConfigurationError("init must be 'checkpoint' or 'random'")
    out = Path(out_dir or cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    run_id = cfg.output.run_id
    sha = config_sha(cfg)
    art = RunArtifact(out, cfg.seed, sha, __version__, stages)
    art.config_snapshot = out / "config.yaml"
    art.config_snapshot.write_text(f"# config_sha={sha}\n" + dump_config(cfg))

    world = build_world(cfg)
    full_game = build_game(cfg, world)
    policy = build_policy(cfg, full_game)
    theta = phis = None

    if "pretrain" in stages:
        H_pre = cfg.game.pretrain_rounds or cfg.fl.rounds
        env = FLTaskEnv(replace(full_game, H=H_pre), policy)
        theta0 = policy.init(np.random.default_rng([cfg.seed, 5]), cfg.defense.init_scale)
        theta, phis, log = meta_sg_train(env, train_config(cfg), theta0)
        art.train_log = log.to_csv(out / "train_log.csv", csv_header(cfg, "train_log"))
        art.checkpoint = save_checkpoint(out / "pretrain.npz", theta, phis, cfg, "pretrain")
    elif init == "checkpoint":
        path = _find_checkpoint(out, checkpoint, adapting="adapt" in stages)
        if path is None and "adapt" in stages:
            raise ProtocolError(f"adapt needs a pre-trained checkpoint; none in {out} "
                                "(run pretrain first or pass --init random)")
        if path is not None:
            theta, phis, _ = load_checkpoint(path)
    elif init == "random":
        theta = policy.init(np.random.default_rng([cfg.seed, 5]), cfg.defense.init_scale)

    xi_online = cfg.adapt.attack.attack_type()
    online_game = build_game(cfg, world, types=(xi_online,), prior=(1.0,))
    if "adapt" in stages:
        a = cfg.adapt
        env = FLTaskEnv(replace(online_game, H=a.block_rounds), policy)
        phi = _online_phi(cfg, env, phis, xi_online)
        theta, alog = online_adapt(env, theta, 0, a.blocks, a.eta, a.N_b,
                                   np.random.default_rng([cfg.seed, 7]), phi, cfg.train.pg_mode)
        art.adapt_log = alog.to_csv(out / "adapt_log.csv", csv_header(cfg, "adapt_log"))
        art.checkpoint = save_checkpoint(out / "adapted.npz", theta, phis, cfg, "adapt")

    if "evaluate" in stages:
        seeds = eval_seeds(cfg.seed, cfg.adapt.eval_episodes)
        if theta is None:
            series, ret = evaluate_policy(online_game, None, None, xi_online, seeds, baseline="fedavg")
        else:
            phi = _online_phi(cfg, FLTaskEnv(online_game, policy), phis, xi_online)
            series, ret = evaluate_policy(online_game, policy, theta, xi_online, seeds, phi)
        art.summary = summarize(series, ret)
        art.metrics = write_metrics_csv(out / "metrics.csv", series, run_id, csv_header(cfg, "metrics"))
        art.summary_csv = write_summary_csv(out / "summary.csv", art.summary, run_id,
                                            csv_header(cfg, "summary"))
        if cfg.output.plots if plots is None else plots:
            from .plotting import emit_plots
            art.plots = emit_plots(art.metrics, out / "plots")
    return art


# ---------------------------------------------------------------------------
# Baseline matrix
# ---------------------------------------------------------------------------

def _cell(task):
    cfg_json, defense, attack_idx, cell_path = task
    cfg = ExperimentConfig.model_validate(json.loads(cfg_json))
    xi = cfg.matrix.attacks[attack_idx].attack_type()
    world = build_world(cfg)
    game = build_game(cfg, world, types=(xi,), prior=(1.0,))
    series, ret = evaluate_policy(game, None, None, xi, eval_seeds(cfg.seed, cfg.adapt.eval_episodes),
                                  baseline=defense)
    s = summarize(series, ret)
    row = {"defense": defense, "attack": xi.name, **s}
    with open(cell_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(row))
        w.writerow([row["defense"], row["attack"], *(_num(v) for v in s.values())])
    return cell_path


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def run_baseline_matrix(cfg: ExperimentConfig, defenses=None, attacks=None, out_dir=None,
                        workers: int | None = None, plots: bool | None = None) -> Path:
    """One (accuracy, backdoor accuracy) cell per defense x attack; rows are defenses.

    Cells run in a process pool (``METASG_WORKERS``) and each writes its own
    file; the merge below reads them back in a fixed order.
    """
    if defenses is not None or attacks is not None:
        data = cfg.model_dump(mode="json")
        if defenses is not None:
            data["matrix"]["defenses"] = list(defenses)
        if attacks is not None:
            data["matrix"]["attacks"] = [a.model_dump(mode="json") if hasattr(a, "model_dump") else a
                                         for a in attacks]
        cfg = ExperimentConfig.model_validate(data)
    out = Path(out_dir or cfg.output.dir)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)
    cfg_json = json.dumps(cfg.model_dump(mode="json"), sort_keys=True)
    tasks = [(cfg_json, d, j, str(cells_dir / f"{i:03d}_{j:03d}.csv"))
             for i, d in enumerate(cfg.matrix.defenses) for j in range(len(cfg.matrix.attacks))]
    n_workers = worker_count() if workers is None else max(1, workers)
    if n_workers == 1:
        for t in tasks:
            _cell(t)
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(_cell, tasks))

    cells = {}
    for _, d, j, p in tasks:
        with open(p, newline="") as fh:
            rows = list(csv.reader(fh))
        cells[(d, j)] = dict(zip(rows[0], rows[1]))
    names = [a.attack_type().name for a in cfg.matrix.attacks]
    path = out / "matrix.csv"
    with path.open("w", newline="") as fh:
        fh.write(csv_header(cfg, "matrix") + "\n")
        w = csv.writer(fh)
        w.writerow(["defense"] + [f"{n}_{m}" for n in names for m in ("acc", "mean_acc", "bac")])
        for d in cfg.matrix.defenses:
            row = [d]
            for j in range(len(names)):
                c = cells[(d, j)]
                row += [c["final_clean_acc"], c["mean_clean_acc"], c["final_backdoor_acc"]]
            w.writerow(row)
    if cfg.output.plots if plots is None else plots:
        from .plotting import emit_matrix_plot
        emit_matrix_plot(path, out / "plots")
    return path


def read_matrix(path) -> dict:
    """``{(defense, attack): {"acc", "mean_acc", "bac"}}`` from a matrix CSV."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    head, body = rows[0], rows[1:]
    out = {}
    for r in body:
        for col, val in zip(head[1:], r[1:]):
            att, metric = col.rsplit("_", 1) if not col.endswith("mean_acc") else (col[:-9], "mean_acc")
            out.setdefault((r[0], att), {})[metric] = float(val)
    return out
