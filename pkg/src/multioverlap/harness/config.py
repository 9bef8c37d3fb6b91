"""Experiment configuration: a JSON document validated into dataclasses."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

from ..models import MODEL_FAMILIES
from ..perturbation import RegularizationSchedule, TruncationPolicy
from ..sampler import McmcConfig

SEED_ENV = "MULTIOVERLAP_SEED"
THREADS_ENV = "MULTIOVERLAP_THREADS"

ESTIMATORS = (
    "thermal_variance",      # per disorder; params: k
    "quenched_variance",     # per (N, t); params: k
    "decorrelation",         # per (N, t); params: h, k_sites, mode
    "energy_concentration",  # per (N, t); params: I
    "fds",                   # per (N, t); params: I, f, n, depth
    "free_entropy_variance", # per (N, t); params: V (separable models only)
    "mean_gap",              # per N, pairs t=0 with the largest t; params: k
)


class ConfigError(ValueError):
    """Invalid experiment configuration."""


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ESTIMATORS:
            raise ConfigError(f"unknown estimator {self.name!r}; choose from {ESTIMATORS}")


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_id: str
    model: str
    N_grid: tuple
    seed: int
    n_disorder: int = 8
    n_replicas: int = 64
    model_params: dict = field(default_factory=dict)
    schedule: RegularizationSchedule = field(default_factory=RegularizationSchedule)
    t_values: tuple = (1.0,)
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    estimators: tuple = ()
    policy: TruncationPolicy = field(default_factory=TruncationPolicy)
    output: str = "results"
    chunk_disorders: int = 16
    oracle_gate: bool = True
    lambda_groups: int = 0

    def __post_init__(self):
        if self.model not in MODEL_FAMILIES:
            raise ConfigError(f"unknown model {self.model!r}; choose from {MODEL_FAMILIES}")
        grid = tuple(int(n) for n in self.N_grid)
        if not grid:
            raise ConfigError("N grid must be non-empty")
        if any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] < 1:
            raise ConfigError("N grid must be positive and strictly increasing")
        object.__setattr__(self, "N_grid", grid)
        try:
            self.schedule.check(grid)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        ts = tuple(float(t) for t in self.t_values)
        if not ts or any(not 0.0 <= t <= 1.0 for t in ts) or len(set(ts)) != len(ts):
            raise ConfigError("t values must be distinct numbers in [0, 1]")
        object.__setattr__(self, "t_values", ts)
        if self.seed is None or isinstance(self.seed, bool) or not isinstance(self.seed, int):
            raise ConfigError("an integer seed is required")
        if self.n_disorder < 1 or self.n_replicas < 2 or self.chunk_disorders < 1:
            raise ConfigError("n_disorder, chunk_disorders >= 1 and n_replicas >= 2 required")
        if any(e.name == "mean_gap" for e in self.estimators) and 0.0 not in ts:
            raise ConfigError("mean_gap needs t = 0 among the t values")
        if self.lambda_groups < 0:
            raise ConfigError("lambda_groups must be non-negative")
        if any(e.name == "fds" for e in self.estimators):
            if self.lambda_groups < 1 or self.n_disorder < 2 * self.lambda_groups:
                raise ConfigError("fds needs lambda_groups >= 1 with at least 2 disorders per group")

    def cells(self):
        """Work cells in their canonical order."""
        return [(N, t, d) for N in self.N_grid for t in self.t_values for d in range(self.n_disorder)]

    def to_json(self) -> str:
        doc = {
            "experiment_id": self.experiment_id,
            "model": self.model,
            "model_params": self.model_params,
            "N_grid": list(self.N_grid),
            "seed": self.seed,
            "n_disorder": self.n_disorder,
            "n_replicas": self.n_replicas,
            "schedule": {"eps_rule": self.schedule.eps_rule, "s_rule": self.schedule.s_rule},
            "t_values": list(self.t_values),
            "mcmc": {k: v for k, v in asdict(self.mcmc).items()},
            "estimators": [{"name": e.name, **e.params} for e in self.estimators],
            "truncation": {"k_max": self.policy.k_max, "m_max": self.policy.m_max},
            "output": self.output,
            "chunk_disorders": self.chunk_disorders,
            "oracle_gate": self.oracle_gate,
            "lambda_groups": self.lambda_groups,
        }
        return json.dumps(doc, indent=2, sort_keys=True)


def config_from_dict(doc: dict, env=None) -> ExperimentConfig:
    env = os.environ if env is None else env
    doc = dict(doc)
    if env.get(SEED_ENV):
        try:
            doc["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    required = ("experiment_id", "model", "N_grid", "seed")
    missing = [k for k in required if k not in doc]
    if missing:
        raise ConfigError(f"missing config keys: {missing}")
    known = {"experiment_id", "model", "model_params", "N_grid", "seed", "n_disorder", "n_replicas",
             "schedule", "t_values", "mcmc", "estimators", "truncation", "output",
             "chunk_disorders", "oracle_gate", "lambda_groups"}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    try:
        schedule = RegularizationSchedule(**doc.get("schedule", {}))
        mcmc = McmcConfig(**doc.get("mcmc", {}))
        trunc = doc.get("truncation", {})
        policy = TruncationPolicy(trunc.get("k_max", 8), trunc.get("m_max", 3))
        ests = tuple(EstimatorSpec(e["name"], {k: v for k, v in e.items() if k != "name"})
                     for e in doc.get("estimators", []))
        return ExperimentConfig(
            experiment_id=str(doc["experiment_id"]),
            model=doc["model"],
            N_grid=tuple(doc["N_grid"]),
            seed=doc["seed"],
            n_disorder=int(doc.get("n_disorder", 8)),
            n_replicas=int(doc.get("n_replicas", 64)),
            model_params=dict(doc.get("model_params", {})),
            schedule=schedule,
            t_values=tuple(doc.get("t_values", (1.0,))),
            mcmc=mcmc,
            estimators=ests,
            policy=policy,
            output=str(doc.get("output", "results")),
            chunk_disorders=int(doc.get("chunk_disorders", 16)),
            oracle_gate=bool(doc.get("oracle_gate", True)),
            lambda_groups=int(doc.get("lambda_groups", 0)),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path, env=None) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return config_from_dict(doc, env)
