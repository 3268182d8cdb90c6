import logging
import os
from typing import Any, Optional

import click
import pandas as pd
import yaml
from lsst.utils.logging import getLogger

from lsst.da.tools.cli import options

from ..core.config import RunConfig, apply_overrides, write_resolved_config
from ..core.utils import (
    ConfigurationError,
    ContractError,
    FilterMethod,
    NumericError,
    ObsOperator,
    SystemName,
    make_rng,
    read_jsonl,
    write_jsonl,
)
from ..eval.report import (
    EVAL_STREAM,
    EvalReport,
    assimilate_test_set,
    evaluate,
    merge_reports,
    read_report,
)
from ..eval.sweep import sensor_sweep, snr_sweep
from ..filters.runner import (
    FilterModel,
    ensemble_from_record,
    ensemble_record,
    final_ensemble,
    forecast_records,
    posterior_records,
    propagate,
    truth_model,
)
from ..rl.ppo import CHECKPOINT_FILE, LOG_FILE, train
from ..rl.surrogate import Surrogate
from ..ssm.dataset import Dataset, generate_dataset, read_dataset, write_dataset
from ..ssm.systems import BenchmarkSystem, SystemSpec

_LOG = getLogger(__name__)

EXIT_CONFIG_ERROR = 2
EXIT_NUMERIC_ERROR = 3

POSTERIOR_FILE = "posterior.jsonl"
STATE_FILE = "final_ensembles.jsonl"
FORECAST_FILE = "forecast.jsonl"
SWEEP_FILE = "sweep.csv"


class DaGroup(click.Group):
    """Command group that turns configuration and numerical failures into exit codes"""

    def invoke(self, ctx: click.Context) -> Any:
        try:
            return super().invoke(ctx)
        except ConfigurationError as msg:
            click.echo(f"Configuration error: {msg}", err=True)
            ctx.exit(EXIT_CONFIG_ERROR)
        except NumericError as msg:
            click.echo(f"Numerical failure: {msg}", err=True)
            ctx.exit(EXIT_NUMERIC_ERROR)


@click.group(cls=DaGroup)
@click.version_option(package_name="lsst.da.tools")
@options.log_level()
def cli(log_level: str) -> None:
    """Data assimilation with surrogate models learned from observations"""
    level = logging.getLevelName(log_level.upper())
    logging.basicConfig(level=level if isinstance(level, int) else logging.INFO)


def _output_dir(config: RunConfig, output_dir: Optional[str]) -> str:
    return config.io.output_dir if output_dir is None else output_dir


def _load_dataset(config: RunConfig, dataset: Optional[str]) -> tuple[RunConfig, Dataset]:
    """Read the dataset and make its system the system of the run"""
    dirname = dataset or config.io.dataset_dir
    if dirname is None:
        raise ConfigurationError("No dataset: give --dataset or io.dataset_dir")
    data = read_dataset(dirname)
    config = apply_overrides(config, "io", dataset_dir=dirname)
    return RunConfig(data.spec, config.data, config.model, config.train, config.eval, config.io), data


def _load_model(
    config: RunConfig,
    spec: SystemSpec,
    checkpoint: Optional[str],
    use_truth: bool,
) -> FilterModel:
    """The true model, or the surrogate stored in a checkpoint"""
    system = BenchmarkSystem.from_spec(spec)
    if use_truth:
        return truth_model(system)
    path = checkpoint or config.io.checkpoint
    if path is None:
        raise ConfigurationError("No model: give --checkpoint, io.checkpoint or --truth-model")
    surrogate, _ = Surrogate.load(path)
    surrogate.check_system(spec)
    return surrogate.filter_model(system.observer, system.obs_var, system.prior())


@cli.command()
@options.run_config()
@options.output_dir()
@options.seed()
@options.obs_operator()
@options.obs_dim()
@options.snr_db()
def gen(
    config: RunConfig,
    output_dir: Optional[str],
    seed: Optional[int],
    obs_operator: Optional[ObsOperator],
    obs_dim: Optional[int],
    snr_db: Optional[float],
) -> None:
    """Generate training and test trajectories

    Reads system.*, data.k_train, data.t_train, data.k_test, data.t_test,
    data.seed and io.output_dir.  Writes header.json, train.jsonl and
    test.jsonl.
    """
    if obs_operator is not None or obs_dim is not None:
        # changing the operator changes n and the shape of R
        system_data = config.system.to_dict()
        system_data.pop("obs_var")
        system_data.pop("obs_dim")
        for key, value in dict(obs_operator=obs_operator, obs_dim=obs_dim).items():
            if value is not None:
                system_data[key] = value
        config = RunConfig.from_dict(dict(config.to_dict(), system=system_data))
    config = apply_overrides(config, "system", snr_db=snr_db)
    config = apply_overrides(config, "data", seed=seed)
    dirname = _output_dir(config, output_dir)
    data = config.data
    dataset = generate_dataset(config.system, data.k_train, data.t_train, data.k_test, data.t_test, data.seed)
    write_dataset(dataset, dirname)
    write_resolved_config(apply_overrides(config, "io", dataset_dir=dirname), dirname)
    summary = pd.DataFrame(
        [
            dict(split=name, trajectories=len(trajs), steps=trajs[0].n_steps if trajs else 0)
            for name, trajs in (("train", dataset.train), ("test", dataset.test))
        ]
    )
    click.echo(f"{dataset.spec.name.name}: m={dataset.spec.state_dim}, n={dataset.spec.obs_dim}")
    click.echo(summary.to_string(index=False))


@cli.command(name="train")
@options.run_config()
@options.dataset()
@options.output_dir()
@options.seed()
@options.iterations()
@options.backend()
@options.control()
@options.n_particles()
@options.workers()
def train_command(
    config: RunConfig,
    dataset: Optional[str],
    output_dir: Optional[str],
    seed: Optional[int],
    iterations: Optional[int],
    backend: Optional[str],
    control: Optional[bool],
    n_particles: Optional[int],
    workers: int,
) -> None:
    """Learn a surrogate model from the training observations

    Reads model.*, train.* and io.dataset_dir; the system comes from the
    dataset header.  Writes checkpoint.json and train_log.csv.
    """
    config, data = _load_dataset(config, dataset)
    config = apply_overrides(
        config,
        "train",
        seed=seed,
        iterations=iterations,
        backend=backend,
        control=control,
        n_particles=n_particles,
    )
    dirname = _output_dir(config, output_dir)
    checkpoint_path = os.path.join(dirname, CHECKPOINT_FILE)
    write_resolved_config(apply_overrides(config, "io", checkpoint=checkpoint_path), dirname)
    result = train(
        data.train,
        data.spec,
        config.train,
        config.model,
        workers=workers,
        checkpoint_path=checkpoint_path,
    )
    result.log.write_csv(os.path.join(dirname, LOG_FILE))
    returns = result.log.mean_returns()
    if len(returns):
        click.echo(f"Final mean return {returns[-1]:.4f}, best {result.best_return:.4f}")
    click.echo(f"Wrote {checkpoint_path} after {result.iterations} iterations")


@cli.command()
@options.run_config()
@options.dataset()
@options.checkpoint()
@options.truth_model()
@options.output_dir()
@options.method()
@options.n_particles()
@options.seed()
@options.until()
@options.dump_ensembles()
@options.rmse_f()
def assimilate(
    config: RunConfig,
    dataset: Optional[str],
    checkpoint: Optional[str],
    use_truth: bool,
    output_dir: Optional[str],
    method: Optional[FilterMethod],
    n_particles: Optional[int],
    seed: Optional[int],
    until: Optional[int],
    dump_ensembles: bool,
    rmse_f: bool,
) -> None:
    """Filter the test trajectories with a learned or the true model

    Reads eval.method, eval.n_particles, eval.seed, eval.assimilate_steps,
    eval.horizons, eval.n_initial, io.dataset_dir and io.checkpoint.
    Writes posterior.jsonl, final_ensembles.jsonl, report.json and
    report.csv.
    """
    config, data = _load_dataset(config, dataset)
    config = apply_overrides(
        config,
        "eval",
        method=None if method is None else method.name,
        n_particles=n_particles,
        seed=seed,
        assimilate_steps=until,
    )
    config = apply_overrides(config, "io", checkpoint=checkpoint)
    model = _load_model(config, data.spec, checkpoint, use_truth)
    filter_method = FilterMethod[config.eval.method]
    dirname = _output_dir(config, output_dir)
    write_resolved_config(config, dirname)

    eval_config = config.eval
    results = assimilate_test_set(
        model,
        data.test,
        filter_method,
        eval_config.n_particles,
        eval_config.seed,
        eval_config.assimilate_steps,
    )
    posteriors: list[dict[str, Any]] = []
    states: list[dict[str, Any]] = []
    for traj, result in zip(data.test, results):
        posteriors.extend(posterior_records(result, traj.id, full=dump_ensembles))
        if result.posteriors:
            rng = make_rng(eval_config.seed, EVAL_STREAM, traj.id, 1)
            final = final_ensemble(result.posteriors[-1], eval_config.n_particles, rng)
            states.append(ensemble_record(final, traj.id))
    write_jsonl(os.path.join(dirname, POSTERIOR_FILE), posteriors)
    write_jsonl(os.path.join(dirname, STATE_FILE), states)

    system = BenchmarkSystem.from_spec(data.spec)
    report = evaluate(model, system, data.test, config.eval, filter_method, forecast=rmse_f, results=results)
    report.meta["model"] = "truth" if use_truth else config.io.checkpoint
    report.write(dirname)
    if report.n_traj:
        click.echo(pd.DataFrame([report.aggregate()]).to_string(index=False))
    else:
        click.echo("No test trajectories to score")


@cli.command()
@options.run_config()
@options.state()
@options.dataset()
@options.checkpoint()
@options.truth_model()
@options.output_dir()
@options.horizon()
@options.seed()
def forecast(
    config: RunConfig,
    state: Optional[str],
    dataset: Optional[str],
    checkpoint: Optional[str],
    use_truth: bool,
    output_dir: Optional[str],
    horizon: Optional[int],
    seed: Optional[int],
) -> None:
    """Propagate the final assimilation ensembles without further analysis

    Reads eval.forecast_steps, eval.seed, io.dataset_dir and
    io.checkpoint.  The dataset supplies the controls of controlled
    systems.  Writes forecast.jsonl.
    """
    config, data = _load_dataset(config, dataset)
    config = apply_overrides(config, "eval", forecast_steps=horizon, seed=seed)
    model = _load_model(config, data.spec, checkpoint, use_truth)
    dirname = _output_dir(config, output_dir)
    state_path = os.path.join(state or dirname, STATE_FILE)
    if not os.path.exists(state_path):
        raise ContractError(f"No assimilation state at {state_path}; run `da assimilate` first")
    trajectories = {traj.id: traj for traj in data.test}
    n_steps = config.eval.forecast_steps
    records: list[dict[str, Any]] = []
    for record in read_jsonl(state_path):
        traj_id, ens = ensemble_from_record(record)
        controls = None
        if data.spec.control_dim:
            traj = trajectories.get(traj_id)
            if traj is None or traj.c is None or len(traj.c) < ens.t + n_steps:
                raise ContractError(
                    f"No controls for {n_steps} steps after t={ens.t} of trajectory {traj_id}"
                )
            controls = traj.c[ens.t : ens.t + n_steps]
        rng = make_rng(config.eval.seed, EVAL_STREAM, traj_id, 2)
        records.extend(forecast_records(propagate(model, ens, n_steps, rng, controls), traj_id))
    write_resolved_config(config, dirname)
    write_jsonl(os.path.join(dirname, FORECAST_FILE), records)
    click.echo(f"Wrote {len(records)} forecast records to {os.path.join(dirname, FORECAST_FILE)}")


@cli.command(name="eval")
@click.argument("reports", nargs=-1, required=True, type=click.Path(exists=True))
@options.output()
def eval_command(reports: tuple[str, ...], output: Optional[str]) -> None:
    """Merge evaluation reports into one long-format CSV

    The columns are system, method, snr_db, metric, value and n_traj.
    """
    table = merge_reports(read_report(path) for path in reports)
    if output is None:
        click.echo(table.to_csv(index=False), nl=False)
    else:
        table.to_csv(output, index=False)
        click.echo(f"Wrote {len(table)} rows to {output}")


@cli.command(name="config")
@options.run_config()
def show_config(config: RunConfig) -> None:
    """Print the fully resolved run configuration as YAML"""
    click.echo(yaml.safe_dump(config.to_dict(), sort_keys=False), nl=False)


@cli.command()
@options.run_config()
@options.output_dir()
@options.snr()
@options.sensors()
@options.method()
@options.workers()
def sweep(
    config: RunConfig,
    output_dir: Optional[str],
    snr: tuple[float, ...],
    sensors: tuple[int, ...],
    method: Optional[FilterMethod],
    workers: int,
) -> None:
    """Generate, train and evaluate at several noise levels or sensor counts

    Reads every section of the run configuration.  Each level writes its
    own subdirectory; the merged table goes to sweep.csv.
    """
    if bool(snr) == bool(sensors):
        raise ConfigurationError("Give either --snr or --sensors levels")
    dirname = _output_dir(config, output_dir)
    write_resolved_config(config, dirname)
    reports: list[EvalReport]
    if snr:
        reports = snr_sweep(config, snr, method, workers, dirname)
    else:
        if config.system.name != SystemName.lorenz96:
            _LOG.warning("Sensor sweeps are meant for lorenz96, running %s", config.system.name.name)
        reports = sensor_sweep(config, sensors, method, workers, dirname)
    table = merge_reports(reports)
    table.to_csv(os.path.join(dirname, SWEEP_FILE), index=False)
    click.echo(table.to_string(index=False))
