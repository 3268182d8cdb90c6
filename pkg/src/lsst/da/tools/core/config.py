"""Run configuration.

A run configuration is one YAML (or JSON) document with the sections
`system`, `data`, `model`, `train`, `eval` and `io`.  Missing values take
the published defaults of the chosen benchmark system; unknown keys are
rejected.  Command-line flags are applied on top with `apply_overrides`.
"""

from __future__ import annotations

import datetime
import enum
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Optional, TypeVar

import yaml

from ..ssm.systems import SystemSpec, default_system_spec
from .utils import ConfigurationError, FilterMethod, PoolMode, SystemName, safe_makedirs

RESOLVED_CONFIG_FILE = "config.resolved.json"

SECTIONS = ("system", "data", "model", "train", "eval", "io")


def _check_choice(enum_type: type[enum.Enum], value: str, key: str) -> None:
    if value not in enum_type.__members__:
        raise ConfigurationError(f"{key} must be one of {list(enum_type.__members__)}, got {value}")


@dataclass
class DataConfig:
    """Number and length of training and test trajectories"""

    k_train: int = 20
    t_train: int = 400
    k_test: int = 50
    t_test: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("k_train", "t_train", "k_test", "t_test"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"data.{name} must be positive, got {getattr(self, name)}")


@dataclass
class ModelConfig:
    """Surrogate architecture

    `architecture` is "mlp" or "conv_bilinear"; `actor_class` may name a
    plug-in Network class instead.  `critic_units` are the widths of the
    particle encoder, the observation encoder and the head.
    """

    architecture: str = "mlp"
    actor_class: Optional[str] = None
    actor_layers: int = 4
    actor_units: int = 64
    activation: str = "tanh"
    residual: bool = False
    critic_layers: int = 2
    critic_units: list[int] = field(default_factory=lambda: [32, 32, 64])
    critic_pool: str = "sum"
    beta_init: float = -4.600166

    def __post_init__(self) -> None:
        if self.architecture not in ("mlp", "conv_bilinear"):
            raise ConfigurationError(
                f"model.architecture must be mlp or conv_bilinear, got {self.architecture}"
            )
        if len(self.critic_units) != 3:
            raise ConfigurationError(f"model.critic_units needs 3 widths, got {self.critic_units}")
        if self.critic_units[0] != self.critic_units[1]:
            raise ConfigurationError(
                f"Particle and observation encoders must share a width, got {self.critic_units[:2]}"
            )
        if self.actor_layers < 1 or self.critic_layers < 1:
            raise ConfigurationError("Networks need at least one hidden layer")
        _check_choice(PoolMode, self.critic_pool, "model.critic_pool")


@dataclass
class TrainConfig:
    """PPO settings"""

    iterations: int = 300
    epochs: int = 10
    minibatch: int = 512
    lr_actor: float = 3e-4
    lr_critic: float = 1e-3
    gamma: float = 1.0
    lam: float = 0.9
    clip_eps: float = 0.2
    n_particles: int = 20
    n_episodes: Optional[int] = None
    max_grad_norm: float = 5.0
    normalize_advantages: bool = True
    backend: str = "enkf"
    control: bool = False
    plateau_window: int = 20
    plateau_tol: float = 1e-3
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"train.lam must be in [0, 1], got {self.lam}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigurationError(f"train.gamma must be in [0, 1], got {self.gamma}")
        if self.clip_eps <= 0.0:
            raise ConfigurationError(f"train.clip_eps must be positive, got {self.clip_eps}")
        if self.iterations < 0 or self.epochs < 1 or self.minibatch < 1:
            raise ConfigurationError("train.iterations must be >= 0, epochs and minibatch >= 1")
        if self.n_particles < 2:
            raise ConfigurationError(f"train.n_particles must be at least 2, got {self.n_particles}")
        if self.backend not in (FilterMethod.enkf.name, FilterMethod.pf.name):
            raise ConfigurationError(f"train.backend must be enkf or pf, got {self.backend}")

    @property
    def filter_method(self) -> FilterMethod:
        return FilterMethod[self.backend]


@dataclass
class EvalConfig:
    """Assimilation and forecast settings

    `horizons` are RMSE-f lead times in model time units; `assimilate_steps`
    limits assimilation to the first steps of every test trajectory, after
    which `forecast_steps` steps are forecast.
    """

    n_particles: int = 20
    method: str = "enkf"
    horizons: list[float] = field(default_factory=lambda: [1.0])
    n_initial: int = 1000
    assimilate_steps: Optional[int] = 450
    forecast_steps: int = 50
    seed: int = 1

    def __post_init__(self) -> None:
        _check_choice(FilterMethod, self.method, "eval.method")
        if self.n_particles < 1 or self.n_initial < 1:
            raise ConfigurationError("eval.n_particles and eval.n_initial must be positive")
        if any(horizon <= 0.0 for horizon in self.horizons):
            raise ConfigurationError(f"eval.horizons must be positive, got {self.horizons}")

    def horizon_steps(self, dt: float) -> list[int]:
        """Lead times converted to steps, at least one"""
        return [max(1, int(round(horizon / dt))) for horizon in self.horizons]


@dataclass
class IoConfig:
    output_dir: str = "output"
    dataset_dir: Optional[str] = None
    checkpoint: Optional[str] = None


@dataclass
class RunConfig:
    system: SystemSpec
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    io: IoConfig = field(default_factory=IoConfig)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = dict(system=self.system.to_dict())
        for section in SECTIONS[1:]:
            out[section] = asdict(getattr(self, section))
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> RunConfig:
        """Build a RunConfig, filling missing values from the system presets"""
        data = {key_: val_ for key_, val_ in data.items() if key_ != "meta"}
        unknown = set(data) - set(SECTIONS)
        if unknown:
            raise ConfigurationError(f"Unknown config sections {sorted(unknown)}")
        system_data = dict(data.get("system") or {})
        if "name" not in system_data:
            raise ConfigurationError("The system section needs a name")
        config = default_run_config(system_data.pop("name"), **system_data)
        for section in SECTIONS[1:]:
            values = data.get(section) or {}
            setattr(config, section, _update_section(getattr(config, section), values, section))
        return config


_Section = TypeVar("_Section")


def _update_section(current: _Section, values: dict[str, Any], section: str) -> _Section:
    known = {field_.name for field_ in fields(current)}  # type: ignore[arg-type]
    unknown = set(values) - known
    if unknown:
        raise ConfigurationError(f"Unknown keys {sorted(unknown)} in section '{section}'")
    return replace(current, **values)  # type: ignore[type-var]


def default_run_config(system_name: SystemName | str, **system_overrides: Any) -> RunConfig:
    """Return the published settings for one benchmark system

    Parameters
    ----------
    system_name : SystemName | str
        Which benchmark

    system_overrides : Any
        SystemSpec fields to change, e.g. obs_operator or obs_dim
    """
    if isinstance(system_name, str):
        try:
            system_name = SystemName[system_name]
        except KeyError as msg:
            raise ConfigurationError(f"Unknown system {system_name}") from msg
    known = set(SystemSpec.__dataclass_fields__)
    unknown = set(system_overrides) - known
    if unknown:
        raise ConfigurationError(f"Unknown keys {sorted(unknown)} in section 'system'")
    system = default_system_spec(system_name, **system_overrides)
    if system_name == SystemName.circular_motion:
        return RunConfig(system=system)
    if system_name == SystemName.lorenz63:
        return RunConfig(
            system=system,
            data=DataConfig(k_train=10, t_train=400, k_test=10, t_test=1000),
            eval=EvalConfig(horizons=[0.04], assimilate_steps=None, forecast_steps=0),
        )
    if system_name == SystemName.lorenz96:
        return RunConfig(
            system=system,
            data=DataConfig(k_train=4, t_train=1000, k_test=5, t_test=1000),
            model=ModelConfig(architecture="conv_bilinear", critic_units=[60, 60, 120]),
            train=TrainConfig(n_particles=50),
            eval=EvalConfig(n_particles=50, horizons=[0.2], assimilate_steps=None, forecast_steps=0),
        )
    control = system_name == SystemName.allen_cahn_control
    units = 150 if control else 100
    return RunConfig(
        system=system,
        data=DataConfig(k_train=10, t_train=200, k_test=10, t_test=200),
        model=ModelConfig(actor_units=units, critic_units=[units // 2, units // 2, units]),
        train=TrainConfig(control=control),
        eval=EvalConfig(horizons=[0.1], assimilate_steps=100, forecast_steps=100),
    )


def load_run_config(path: Optional[str] = None, system: Optional[str] = None) -> RunConfig:
    """Read a run configuration file

    Parameters
    ----------
    path : str | None
        YAML or JSON file; if None, the defaults of `system` are used

    system : str | None
        System name, used when there is no file or the file names none

    Returns
    -------
    config : RunConfig
        The fully resolved configuration
    """
    data: dict[str, Any] = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigurationError(f"Config file {path} does not exist")
        with open(path, "rt", encoding="utf-8") as fin:
            data = yaml.safe_load(fin) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"Config file {path} does not hold a mapping")
    if system is not None:
        system_data = dict(data.get("system") or {})
        if system_data.get("name", system) != system:
            # switching systems invalidates the dimension-dependent keys
            system_data = {}
        system_data["name"] = system
        data["system"] = system_data
    return RunConfig.from_dict(data)


def apply_overrides(config: RunConfig, section: str, **values: Any) -> RunConfig:
    """Replace values of one section; None means "not given on the command line" """
    given = {key_: val_ for key_, val_ in values.items() if val_ is not None}
    if not given:
        return config
    if section == "system":
        system_data = config.system.to_dict()
        system_data.update(given)
        return replace(config, system=SystemSpec.from_dict(system_data))
    return replace(config, **{section: _update_section(getattr(config, section), given, section)})


def write_resolved_config(config: RunConfig, dirname: str) -> str:
    """Write config.resolved.json into dirname and return its path

    The document is the fully expanded configuration plus a `meta`
    section holding the creation time, the only field that changes
    between identical runs.
    """
    safe_makedirs(dirname)
    doc = config.to_dict()
    doc["meta"] = dict(created=datetime.datetime.now(datetime.timezone.utc).isoformat())
    path = os.path.join(dirname, RESOLVED_CONFIG_FILE)
    with open(path, "wt", encoding="utf-8") as fout:
        json.dump(doc, fout, indent=2, sort_keys=True)
        fout.write("\n")
    return path
