"""Experiment configuration: strict YAML schema, validation and round-tripping."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .attacks import AttackType
from .defenses import BASELINES
from .errors import ConfigurationError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FLSection(_Strict):
    n_clients: int = Field(20, ge=1)
    n_targeted: int = Field(0, ge=0)
    n_untargeted: int = Field(4, ge=0)
    subsample_rate: float = Field(0.5, gt=0.0, le=1.0)
    local_lr: float = Field(0.1, ge=0.0)
    server_lr: float = Field(1.0, ge=0.0)
    local_iters: int = Field(1, ge=1)
    batch_size: int = Field(1000, ge=1)
    rounds: int = Field(50, ge=1)
    non_iid_q: float = Field(0.2, ge=0.0, le=1.0)
    lr_schedule: list[float] = Field(default_factory=list)

    @model_validator(mode="after")
    def _attackers_fit(self):
        if self.n_targeted + self.n_untargeted > self.n_clients:
            raise ValueError("n_targeted + n_untargeted exceeds n_clients")
        return self


class GameSection(_Strict):
    n_examples: int = Field(10000, ge=1)
    dim: int = Field(20, ge=2)
    n_classes: int = Field(5, ge=2)
    separation: float = Field(2.0, gt=0.0)
    hidden: int = Field(0, ge=0)
    init_scale: float = Field(3.0, ge=0.0)
    root_size: int = Field(100, ge=1)
    n_test: int = Field(1000, ge=1)
    gamma: float = Field(0.99, gt=0.0, le=1.0)
    obs_round: bool = True
    backdoor_penalty: float = Field(0.0, ge=0.0)
    pretrain_rounds: Optional[int] = Field(None, ge=1)


class AttackEntry(_Strict):
    method: str
    name: str = ""
    config: dict = Field(default_factory=dict)
    weight: float = Field(1.0, ge=0.0)

    @model_validator(mode="after")
    def _builds(self):
        try:
            self.attack_type()
        except ConfigurationError as exc:
            raise ValueError(str(exc)) from None
        return self

    def attack_type(self) -> AttackType:
        return AttackType.from_dict({"name": self.name, "method": self.method, "config": self.config})


class DefenseSection(_Strict):
    posttrain: Literal["clip", "prune"] = "clip"
    psi_low: float = 0.5
    psi_high: float = 10.0
    policy_hidden: list[int] = Field(default_factory=list)
    log_std_init: float = -0.5
    init_scale: float = Field(0.0, ge=0.0)
    baseline_beta: float = Field(0.2, ge=0.0, lt=0.5)
    baseline_f: int = Field(1, ge=0)
    baseline_alpha: float = Field(1.0, gt=0.0)
    baseline_psi: float = Field(2.0, gt=0.0)
    baseline_prune: float = Field(0.5, ge=0.0, le=1.0)


class TrainSection(_Strict):
    variant: Literal["meta-rl", "reptile", "debiased"] = "reptile"
    N_D: int = Field(20, ge=1)
    N_A: int = Field(5, ge=0)
    K: int = Field(1, ge=1)
    kappa_D: float = Field(0.01, ge=0.0)
    kappa_A: float = Field(0.01, ge=0.0)
    eta: float = Field(0.01, ge=0.0)
    N_b: int = Field(8, ge=1)
    adapt_steps: int = Field(1, ge=1)
    pg_mode: Literal["vanilla", "reward_to_go"] = "reward_to_go"
    N_b2: int = Field(1, ge=1)
    inner_size: Optional[int] = Field(None, ge=1)
    step_decay: float = Field(0.0, ge=0.0)
    max_step: Optional[float] = Field(None, gt=0.0)


class AdaptSection(_Strict):
    attack: AttackEntry = Field(default_factory=lambda: AttackEntry(method="IPM"))
    blocks: int = Field(2, ge=0)
    block_rounds: int = Field(10, ge=1)
    N_b: int = Field(4, ge=1)
    eta: float = Field(0.01, ge=0.0)
    eval_episodes: int = Field(1, ge=1)


class OutputSection(_Strict):
    dir: str = "runs"
    run_id: str = "run"
    plots: bool = True


class MatrixSection(_Strict):
    defenses: list[str] = Field(default_factory=lambda: ["fedavg", "median", "trimmed_mean", "krum"])
    attacks: list[AttackEntry] = Field(default_factory=lambda: [AttackEntry(method="NA"),
                                                                AttackEntry(method="IPM")])

    @field_validator("defenses")
    @classmethod
    def _known(cls, v):
        bad = [d for d in v if d not in BASELINES]
        if bad:
            raise ValueError(f"unknown baseline defenses {bad}; choose from {list(BASELINES)}")
        if not v:
            raise ValueError("defense list must be nonempty")
        return v

    @field_validator("attacks")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("attack list must be nonempty")
        return v


class ExperimentConfig(_Strict):
    seed: int = 0
    fl: FLSection = Field(default_factory=FLSection)
    game: GameSection = Field(default_factory=GameSection)
    attack_domain: list[AttackEntry] = Field(default_factory=lambda: [AttackEntry(method="NA"),
                                                                      AttackEntry(method="IPM")])
    defense: DefenseSection = Field(default_factory=DefenseSection)
    train: TrainSection = Field(default_factory=TrainSection)
    adapt: AdaptSection = Field(default_factory=AdaptSection)
    output: OutputSection = Field(default_factory=OutputSection)
    matrix: MatrixSection = Field(default_factory=MatrixSection)

    @field_validator("attack_domain")
    @classmethod
    def _domain(cls, v):
        if not v:
            raise ValueError("attack domain must list at least one type")
        if sum(e.weight for e in v) <= 0:
            raise ValueError("attack domain weights must not all be zero")
        names = [e.attack_type().name for e in v]
        if len(set(names)) != len(names):
            raise ValueError(f"attack type names must be unique, got {names}")
        return v

    def prior(self) -> tuple[float, ...]:
        w = [e.weight for e in self.attack_domain]
        s = sum(w)
        return tuple(x / s for x in w)

    def domain_types(self) -> tuple[AttackType, ...]:
        return tuple(e.attack_type() for e in self.attack_domain)

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        data = self.model_dump(mode="json")
        if seed is not None:
            data["seed"] = int(seed)
        if out is not None:
            data["output"]["dir"] = str(out)
        return ExperimentConfig.model_validate(data)


def _violations(exc: ValidationError) -> list[str]:
    out = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        out.append(f"{loc}: {err['msg']}")
    return out


def parse_config(data) -> ExperimentConfig:
    """Validate a mapping; every violation is reported in one error."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping")
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        lines = _violations(exc)
        raise ConfigurationError("invalid config:\n  " + "\n  ".join(lines)) from None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    with path.open() as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"{path}: not valid YAML ({exc})") from None
    return parse_config(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def config_sha(cfg: ExperimentConfig) -> str:
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
