"""Run configuration: nested dataclasses loaded from JSON.

A config file is a JSON object whose top-level keys mirror :class:`RunConfig`;
nested sections (``generator``, ``episode``, ``model``, ``outer``, ``train``,
``ho``, ``check_grad``, ``pretrain``, ``sweep``) may be partial, and missing
keys keep their defaults.  Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..data import TaskGeneratorConfig
from ..exceptions import ConfigurationError
from ..meta import VARIANTS, MetaConfig, ReprModel

MODES = ("check_grad", "ho", "meta_train", "meta_eval", "sweep_T", "pretrain_baseline", "report")


@dataclass(frozen=True)
class EpisodeConfig:
    n_way: int = 5
    k_shot: int = 1
    val_per_class: int = 15

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.val_per_class < 1:
            raise ConfigurationError("episodes need n_way >= 2, k_shot >= 1 and val_per_class >= 1")


@dataclass(frozen=True)
class ModelConfig:
    """Hyper-representation shape; ``hidden=()`` is a single affine map."""

    hidden: tuple = ()
    output_dim: int = 32
    learned_init: bool = False
    learned_reg: bool = False

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.output_dim < 1 or any(h < 1 for h in self.hidden):
            raise ConfigurationError("layer widths must be positive")


@dataclass(frozen=True)
class OuterConfig:
    """Adam on the hyperparameters, with ``lr * decay`` every ``decay_every`` steps."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.97
    decay_every: int = 100

    def __post_init__(self):
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1:
            raise ConfigurationError("need lr >= 0 and betas in [0, 1)")
        if self.decay_every < 1:
            raise ConfigurationError("decay_every must be positive")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "full"
    horizon: int = 5
    meta_batch: int = 4
    max_iters: int = 1500
    eval_interval: int = 50
    eval_episodes: int = 100
    patience: int = 10
    test_episodes: int = 300
    # classic variant: per-episode ground weights get their own Adam, and each
    # meta-batch is reused for this many joint steps
    classic_lr: float = 0.01
    classic_steps: int = 4

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.horizon < 0:
            raise ConfigurationError("horizon must be non-negative")
        for name in ("meta_batch", "eval_interval", "patience", "classic_steps"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.max_iters < 0:
            raise ConfigurationError("max_iters must be non-negative")
        if self.eval_episodes < 2 or self.test_episodes < 2:
            raise ConfigurationError("evaluation needs at least two episodes")


@dataclass(frozen=True)
class HOConfig:
    """Single-dataset step-size tuning of a logistic regression."""

    method: str = "rtho"
    n_classes: int = 5
    train_per_class: int = 20
    val_per_class: int = 50
    batch_size: int = 10
    kind: str = "GD"
    momentum: float = 0.0
    horizon: int = 40
    interval: int = 10
    init_step: float = 0.1353352832366127
    outer_lr: float = 5.0
    outer_steps: int = 10
    learned_reg: bool = False
    grid: tuple = (0.01, 0.03, 0.1, 0.3)
    tolerance: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        if self.method not in ("rtho", "full"):
            raise ConfigurationError("ho.method must be 'rtho' or 'full'")
        if self.init_step <= 0 or any(g <= 0 for g in self.grid):
            raise ConfigurationError("step sizes must be positive")
        if self.horizon < 1 or self.interval < 1 or self.horizon % self.interval:
            raise ConfigurationError("ho.interval must be a positive divisor of ho.horizon")


@dataclass(frozen=True)
class CheckGradConfig:
    problems: tuple = ("quadratic", "episode", "logistic")
    count: int = 20
    eps: float = 1e-5
    fd_tol: float = 1e-5
    mode_tol: float = 1e-9
    max_fd_coords: int = 300

    def __post_init__(self):
        object.__setattr__(self, "problems", tuple(self.problems))
        unknown = set(self.problems) - {"quadratic", "episode", "logistic"}
        if unknown:
            raise ConfigurationError(f"unknown check-grad problem kinds {sorted(unknown)}")
        if not self.problems or self.count < 1:
            raise ConfigurationError("check-grad needs at least one problem")


@dataclass(frozen=True)
class PretrainConfig:
    steps: int = 2000
    lr: float = 1e-2
    batch_size: int = 64
    examples_per_class: int = 50

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.examples_per_class < 1:
            raise ConfigurationError("invalid pretrain settings")


@dataclass(frozen=True)
class SweepConfig:
    """``train=False`` evaluates the checkpoint at every horizon; ``True`` retrains per horizon."""

    T_values: tuple = tuple(range(9))
    train: bool = False

    def __post_init__(self):
        object.__setattr__(self, "T_values", tuple(int(t) for t in self.T_values))
        if not self.T_values or min(self.T_values) < 0:
            raise ConfigurationError("sweep needs non-negative horizons")


_SECTIONS = {
    "generator": TaskGeneratorConfig, "episode": EpisodeConfig, "model": ModelConfig, "outer": OuterConfig,
    "train": TrainConfig, "ho": HOConfig, "check_grad": CheckGradConfig, "pretrain": PretrainConfig,
    "sweep": SweepConfig,
}


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on.  ``seed`` drives hyperparameter init and
    sampling inside the run; ``data_seed`` fixes which episodes are drawn."""

    mode: str = "meta_train"
    seed: int = 0
    data_seed: int = 1
    generator: TaskGeneratorConfig = field(default_factory=TaskGeneratorConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    outer: OuterConfig = field(default_factory=OuterConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ho: HOConfig = field(default_factory=HOConfig)
    check_grad: CheckGradConfig = field(default_factory=CheckGradConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    checkpoint: str | None = None
    logs: tuple = ()
    record_wallclock: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; choose from {MODES}")
        object.__setattr__(self, "logs", tuple(str(p) for p in self.logs))

    @classmethod
    def from_json(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a JSON object")
        kwargs = {}
        names = {f.name for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in names:
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[key] = _section(key, value) if key in _SECTIONS else value
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigurationError(str(exc)) from None

    def to_json(self) -> dict:
        out = dataclasses.asdict(self)
        return json.loads(json.dumps(out))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_section(self, name: str, **changes) -> "RunConfig":
        return dataclasses.replace(self, **{name: dataclasses.replace(getattr(self, name), **changes)})

    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def meta_config(self) -> MetaConfig:
        model = ReprModel(self.generator.observed_dim, self.model.hidden, self.model.output_dim)
        return MetaConfig(model, self.episode.n_way, self.model.learned_init, self.model.learned_reg)


def _section(name, value):
    cls = _SECTIONS[name]
    if not isinstance(value, dict):
        raise ConfigurationError(f"section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(value) - known
    if unknown:
        raise ConfigurationError(f"unknown keys in {name!r}: {sorted(unknown)}")
    try:
        return cls(**value)
    except TypeError as exc:
        raise ConfigurationError(f"{name}: {exc}") from None


def load_config(path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc}") from None
    return RunConfig.from_json(data)
