"""Experiment configuration, seeding and the seen-then-new benchmark pipeline."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .core import ModelConfig, ParamVector
from .errors import ConfigError
from .evaluation import (
    ComparisonPolicy,
    EvalSettings,
    ResultLedger,
    bwt_metrics,
    evaluate_tasks,
    run_finetune_baseline,
    run_joint_baseline,
)
from .memory import MemoryBuffer
from .meta import HyperParams, train_space, with_hyper
from .online import ExpansionConfig, expand_space
from .tasks import SuiteSpec, TaskSuite, generate_task_suite
from .telemetry import NULL, Telemetry

METHODS = ("maml", "snp", "snp++", "finetune", "joint")
EXPANSION_MODES = {"add": "snp_add", "remove": "snp_remove", "interpolate": "snp_interpolate"}


@dataclass(frozen=True)
class ExpansionSettings:
    mode: str = "add"                 # add | remove | interpolate
    remove_task: str | None = None
    residual_beta: float = 0.0
    beta_int: float = 1.0

    def __post_init__(self):
        if self.mode not in EXPANSION_MODES:
            raise ConfigError(f"expansion.mode must be one of {sorted(EXPANSION_MODES)}")
        if self.mode == "remove" and self.remove_task is None:
            raise ConfigError("expansion.mode 'remove' needs expansion.remove_task")

    def for_hyper(self, hyper: HyperParams) -> ExpansionConfig:
        mode = EXPANSION_MODES[self.mode]
        return ExpansionConfig(
            hyper, mode,
            remove_task=self.remove_task if mode == "snp_remove" else None,
            residual_beta=self.residual_beta, beta_int=self.beta_int,
        )


def _default_model(suite: SuiteSpec) -> ModelConfig:
    return ModelConfig(suite.input_dim, suite.descriptor_dim, 8, (32,), "relu", 10.0)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run depends on.  Two runs from equal configs and seeds are bit-identical."""

    suite: SuiteSpec = field(default_factory=SuiteSpec)
    model: ModelConfig | None = None
    hyper: HyperParams = field(default_factory=HyperParams)
    methods: tuple[str, ...] = METHODS
    n_train_tasks: int = 3
    expansion: ExpansionSettings = field(default_factory=ExpansionSettings)
    eval: EvalSettings = field(default_factory=lambda: EvalSettings(episodes=6))
    policy: ComparisonPolicy = field(default_factory=lambda: ComparisonPolicy(reference_until=0))
    seeds: tuple[int, ...] = (0,)
    out: str = "runs"
    paper_fidelity: bool = False

    def __post_init__(self):
        if self.model is None:
            object.__setattr__(self, "model", _default_model(self.suite))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        bad = set(self.methods) - set(METHODS)
        if bad:
            raise ConfigError(f"unknown methods {sorted(bad)}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 1 <= self.n_train_tasks <= self.suite.n_seen:
            raise ConfigError("n_train_tasks must lie between 1 and suite.n_seen")
        if self.model.input_dim != self.suite.input_dim or self.model.descriptor_dim != self.suite.descriptor_dim:
            raise ConfigError("model input/descriptor dims must match the suite")

    def settings(self) -> EvalSettings:
        """Evaluation settings with the adaptation step taken from the hyperparameters."""
        return dataclasses.replace(self.eval, K=self.hyper.K, lr_base=self.hyper.lr_base)

    def to_dict(self) -> dict:
        return {
            "suite": self.suite.to_dict(),
            "model": self.model.to_dict(),
            "hyper": self.hyper.to_dict(),
            "methods": list(self.methods),
            "n_train_tasks": self.n_train_tasks,
            "expansion": dataclasses.asdict(self.expansion),
            "eval": {k: v for k, v in dataclasses.asdict(self.eval).items() if k not in ("K", "lr_base")},
            "policy": self.policy.to_dict(),
            "seeds": list(self.seeds),
            "out": self.out,
            "paper_fidelity": self.paper_fidelity,
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)


_SECTIONS = {"suite", "model", "hyper", "methods", "n_train_tasks", "expansion", "eval", "policy",
             "seeds", "out", "paper_fidelity"}


def _section(cls, data, name, base=None):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    values = dataclasses.asdict(base) if base is not None else {}
    values.update(data)
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc


def config_from_dict(data: dict | None, *, paper_fidelity: bool | None = None) -> ExperimentConfig:
    """Build a config; absent fields take the documented defaults."""
    data = dict(data or {})
    unknown = set(data) - _SECTIONS
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    fidelity = bool(data.get("paper_fidelity", False)) if paper_fidelity is None else paper_fidelity
    suite = _section(SuiteSpec, data.get("suite"), "suite")
    hyper = _section(HyperParams, data.get("hyper"), "hyper",
                     HyperParams.paper_fidelity() if fidelity else HyperParams())
    model = _section(ModelConfig, data.get("model"), "model", _default_model(suite))
    try:
        return ExperimentConfig(
            suite=suite,
            model=model,
            hyper=hyper,
            methods=tuple(data.get("methods", METHODS)),
            n_train_tasks=int(data.get("n_train_tasks", 3)),
            expansion=_section(ExpansionSettings, data.get("expansion"), "expansion"),
            eval=_section(EvalSettings, data.get("eval"), "eval", EvalSettings(episodes=6)),
            policy=_section(ComparisonPolicy, data.get("policy"), "policy", ComparisonPolicy(reference_until=0)),
            seeds=tuple(data.get("seeds", (0,))),
            out=str(data.get("out", "runs")),
            paper_fidelity=fidelity,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None, *, paper_fidelity: bool | None = None) -> ExperimentConfig:
    if path is None:
        return config_from_dict({}, paper_fidelity=paper_fidelity)
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return config_from_dict(data, paper_fidelity=paper_fidelity)


def with_overrides(config: ExperimentConfig, **hyper_changes) -> ExperimentConfig:
    changes = {k: v for k, v in hyper_changes.items() if v is not None}
    if not changes:
        return config
    return dataclasses.replace(config, hyper=with_hyper(config.hyper, **changes))


# ------------------------------------------------------------------- pipelines


@dataclass
class TrainedStart:
    """Meta parameters trained on the seen tasks, one per training flavour."""

    snp: ParamVector | None
    memory: MemoryBuffer | None
    maml: ParamVector | None


@dataclass
class BenchResult:
    seed: int
    ledger: ResultLedger
    bwt: dict
    params: dict
    memory: MemoryBuffer | None
    telemetry: Telemetry
    beta_histories: dict


def split_tasks(config: ExperimentConfig, suite: TaskSuite):
    seen = list(suite.seen)
    return seen[:config.n_train_tasks], seen[config.n_train_tasks:]


def maml_hyper(hyper: HyperParams) -> HyperParams:
    return with_hyper(hyper, beta_meta=0.0, beta_base_default=0.0)


def train_starts(config: ExperimentConfig, suite: TaskSuite, seed: int, methods,
                 telemetry: Telemetry = NULL) -> TrainedStart:
    train, _ = split_tasks(config, suite)
    snp = memory = maml = None
    if {"snp", "snp++"} & set(methods):
        snp, memory = train_space(train, config.hyper, config.model, store_memory=True,
                                  rng_seed=seed, telemetry=telemetry)
    if {"maml", "finetune", "joint"} & set(methods):
        maml, _ = train_space(train, maml_hyper(config.hyper), config.model, rng_seed=seed)
    return TrainedStart(snp, memory, maml)


def run_bench(config: ExperimentConfig, seed: int, telemetry: Telemetry | None = None) -> BenchResult:
    """Train on the first ``n_train_tasks`` seen tasks, then learn the rest one by one.

    Stage 0 holds every method's evaluation after training; stage ``k`` the
    evaluation after the ``k``-th new task.  Fine-tuning always runs because
    the comparison policy may reference it.  MAML, fine-tuning and joint
    training start from the unregularized meta-trained parameters.
    """
    telemetry = telemetry or Telemetry()
    methods = list(dict.fromkeys([*config.methods, "finetune"]))
    suite = generate_task_suite(seed, config.suite)
    train, new = split_tasks(config, suite)
    eval_tasks = train + new
    settings = dataclasses.replace(config.settings(), seed=seed)
    hyper = config.hyper
    starts = train_starts(config, suite, seed, methods, telemetry)

    ledger = ResultLedger()
    params, histories = {}, {}
    memory = None
    for method in methods:
        if method == "joint":
            continue
        start = starts.snp if method in ("snp", "snp++") else starts.maml
        ledger.extend(evaluate_tasks(start, config.model, eval_tasks, 0, method, settings))
        if method == "finetune":
            traj, led = run_finetune_baseline(start, new, hyper, config.model, eval_tasks,
                                              settings=settings, telemetry=telemetry)
            theta = traj[-1]
        else:
            if method == "maml":
                exp = ExpansionConfig(maml_hyper(hyper), "snp")
                mem = None
            elif method == "snp":
                exp = ExpansionConfig(hyper, "snp")
                mem = None
            else:
                exp = config.expansion.for_hyper(hyper)
                mem = starts.memory
            res = expand_space(start, new, mem, exp, config.model, (seed, 7), telemetry=telemetry,
                               eval_tasks=eval_tasks, eval_settings=settings, method=method)
            theta, led = res.theta, res.ledger
            histories[method] = [hyper.beta_meta if method != "maml" else 0.0, *res.beta_history]
            if method == "snp++":
                memory = res.memory
        ledger.extend(led)
        params[method] = theta
    if "joint" in methods and len(eval_tasks) >= 2:
        theta, led = run_joint_baseline(starts.maml, eval_tasks, hyper, config.model, eval_tasks,
                                        settings=settings, stage=len(new), telemetry=telemetry)
        ledger.extend(led)
        params["joint"] = theta
    bwt = bwt_metrics(ledger, config.policy)
    telemetry.emit("bench_done", seed=seed, policy=config.policy.to_dict(),
                   bwt={f"{s}:{m}": v for (s, m), v in bwt.items()})
    return BenchResult(seed, ledger, bwt, params, memory, telemetry, histories)
