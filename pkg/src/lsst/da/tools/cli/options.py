from enum import Enum
from functools import partial, wraps
from typing import Any, Callable, Type, TypeVar, cast

import click
from click.decorators import _AnyCallable

from ..core.config import RunConfig, load_run_config
from ..core.handler import Handler
from ..core.utils import FilterMethod, ObsOperator, SystemName

__all__ = [
    "backend",
    "checkpoint",
    "control",
    "dataset",
    "dump_ensembles",
    "horizon",
    "iterations",
    "log_level",
    "method",
    "n_particles",
    "obs_dim",
    "obs_operator",
    "output",
    "output_dir",
    "rmse_f",
    "run_config",
    "seed",
    "sensors",
    "snr",
    "snr_db",
    "state",
    "truth_model",
    "until",
    "workers",
]


EnumType_co = TypeVar("EnumType_co", bound=Type[Enum], covariant=True)


class EnumChoice(click.Choice):
    """A version of click.Choice specialized for enum types"""

    def __init__(self, enum: EnumType_co, case_sensitive: bool = True) -> None:
        self._enum = enum
        super().__init__(list(enum.__members__.keys()), case_sensitive=case_sensitive)

    def convert(self, value: Any, param: click.Parameter | None, ctx: click.Context | None) -> EnumType_co:
        if isinstance(value, self._enum):
            return cast(EnumType_co, value)
        converted_str = super().convert(value, param, ctx)
        return self._enum.__members__[converted_str]


class PartialOption:
    """Wraps click.option with partial arguments for convenient reuse"""

    def __init__(self, *param_decls: Any, **kwargs: Any) -> None:
        self._partial = partial(click.option, *param_decls, cls=partial(click.Option), **kwargs)

    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self._partial(*args, **kwargs)


config_file = PartialOption(
    "--config",
    "config_file",
    type=click.Path(exists=True, dir_okay=False),
    help="Run configuration, YAML or JSON.",
)

system = PartialOption(
    "--system",
    type=EnumChoice(SystemName),
    default=None,
    help="Benchmark system; its published settings fill every key the config file leaves out.",
)

plugin_dir = PartialOption(
    "--plugin-dir",
    help="Additional directory to search for system and network plug-ins.",
    envvar="DA_PLUGINS",
    show_envvar=True,
)

log_level = PartialOption(
    "--log-level",
    type=click.Choice(["DEBUG", "VERBOSE", "INFO", "WARNING", "ERROR"], case_sensitive=False),
    default="INFO",
    envvar="DA_LOG_LEVEL",
    show_envvar=True,
    show_default=True,
    help="Logging level.",
)

workers = PartialOption(
    "--workers",
    type=click.IntRange(min=1),
    default=1,
    envvar="DA_WORKERS",
    show_envvar=True,
    show_default=True,
    help="Threads used to collect training episodes.",
)

output_dir = PartialOption(
    "--output-dir",
    type=click.Path(file_okay=False),
    default=None,
    envvar="DA_OUTPUT_DIR",
    show_envvar=True,
    help="Output directory [io.output_dir].",
)

dataset = PartialOption(
    "--dataset",
    type=click.Path(file_okay=False),
    default=None,
    help="Dataset directory written by `da gen` [io.dataset_dir].",
)

checkpoint = PartialOption(
    "--checkpoint",
    type=click.Path(dir_okay=False),
    default=None,
    help="Surrogate checkpoint written by `da train` [io.checkpoint].",
)

truth_model = PartialOption(
    "--truth-model",
    "use_truth",
    is_flag=True,
    default=False,
    help="Use the true system instead of a checkpoint.",
)

state = PartialOption(
    "--state",
    type=click.Path(file_okay=False),
    default=None,
    help="Output directory of `da assimilate` holding the final ensembles.",
)

seed = PartialOption(
    "--seed",
    type=int,
    default=None,
    help="Random seed of this command's section.",
)

n_particles = PartialOption(
    "--n-particles",
    type=click.IntRange(min=1),
    default=None,
    help="Ensemble size.",
)

method = PartialOption(
    "--method",
    type=EnumChoice(FilterMethod),
    default=None,
    help="Filter used for assimilation [eval.method].",
)

backend = PartialOption(
    "--backend",
    type=click.Choice([FilterMethod.enkf.name, FilterMethod.pf.name]),
    default=None,
    help="Filter used inside training episodes [train.backend].",
)

control = PartialOption(
    "--control/--no-control",
    default=None,
    help="Feed control inputs to the surrogate [train.control].",
)

iterations = PartialOption(
    "--iterations",
    type=click.IntRange(min=0),
    default=None,
    help="Maximum number of PPO iterations [train.iterations].",
)

until = PartialOption(
    "--until",
    type=click.IntRange(min=0),
    default=None,
    help="Assimilate only the first steps of every trajectory [eval.assimilate_steps].",
)

horizon = PartialOption(
    "--horizon",
    type=click.IntRange(min=0),
    default=None,
    help="Number of forecast steps [eval.forecast_steps].",
)

dump_ensembles = PartialOption(
    "--dump-ensembles",
    is_flag=True,
    default=False,
    help="Also write the posterior particles of every step.",
)

rmse_f = PartialOption(
    "--rmse-f/--no-rmse-f",
    default=True,
    show_default=True,
    help="Compute forecast skill at eval.horizons.",
)

obs_operator = PartialOption(
    "--obs-operator",
    type=EnumChoice(ObsOperator),
    default=None,
    help="Observation operator [system.obs_operator].",
)

obs_dim = PartialOption(
    "--obs-dim",
    type=click.IntRange(min=1),
    default=None,
    help="Number of sensors of the subsample operator [system.obs_dim].",
)

snr_db = PartialOption(
    "--snr-db",
    type=float,
    default=None,
    help="Signal-to-noise ratio in dB defining R [system.snr_db].",
)

snr = PartialOption(
    "--snr",
    type=float,
    multiple=True,
    help="SNR level in dB; repeat for several levels.",
)

sensors = PartialOption(
    "--sensors",
    type=click.IntRange(min=1),
    multiple=True,
    help="Number of sensors; repeat for several levels.",
)

output = PartialOption(
    "--output",
    type=click.Path(dir_okay=False),
    default=None,
    help="Output CSV file; printed to stdout if not given.",
)


def run_config() -> Callable[[_AnyCallable], _AnyCallable]:
    """Read the run configuration and pass it on as `config`"""

    def decorator(f: _AnyCallable) -> _AnyCallable:
        @config_file(expose_value=False, callback=record_meta)
        @system(expose_value=False, callback=record_meta)
        @plugin_dir(expose_value=False, callback=record_meta)
        @click.option("--run-config", "config", hidden=True, callback=make_config)
        @wraps(f)
        def wrapper(*args, **kwargs):  # type: ignore
            return f(*args, **kwargs)

        return cast(_AnyCallable, wrapper)

    def record_meta(ctx: click.Context, param: click.Parameter, value: Any) -> None:
        if value and param.name:
            ctx.meta[param.name] = value

    def make_config(ctx: click.Context, param: click.Parameter, value: Any) -> RunConfig:
        Handler.plugin_dir = ctx.meta.get("plugin_dir")
        system_name = ctx.meta.get("system")
        config_path = ctx.meta.get("config_file")
        if config_path is None and system_name is None:
            raise click.UsageError("Give a run configuration with --config, or a system with --system")
        return load_run_config(config_path, None if system_name is None else system_name.name)

    return decorator
