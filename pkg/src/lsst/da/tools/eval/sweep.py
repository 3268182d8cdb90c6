"""Train-and-evaluate runs over a range of noise levels or sensor counts."""

from __future__ import annotations

import os
from dataclasses import replace
from typing import Iterable, Optional

from lsst.utils.logging import getLogger

from ..core.config import RunConfig, write_resolved_config
from ..core.utils import ConfigurationError, FilterMethod, ObsOperator
from ..rl.ppo import CHECKPOINT_FILE, LOG_FILE, train
from ..ssm.dataset import generate_dataset, write_dataset
from ..ssm.observation import Observer
from ..ssm.systems import BenchmarkSystem
from .report import EvalReport, evaluate

_LOG = getLogger(__name__)


def run_pipeline(
    config: RunConfig,
    method: Optional[FilterMethod] = None,
    workers: int = 1,
    output_dir: Optional[str] = None,
) -> EvalReport:
    """Generate data, train a surrogate and evaluate it on the test set

    If `output_dir` is given the resolved config, the dataset, the
    checkpoint, the training log and the report are written there.
    """
    data = config.data
    dataset = generate_dataset(config.system, data.k_train, data.t_train, data.k_test, data.t_test, data.seed)
    checkpoint_path = None
    if output_dir is not None:
        write_resolved_config(config, output_dir)
        write_dataset(dataset, os.path.join(output_dir, "data"))
        checkpoint_path = os.path.join(output_dir, CHECKPOINT_FILE)
    result = train(
        dataset.train,
        dataset.spec,
        config.train,
        config.model,
        workers=workers,
        checkpoint_path=checkpoint_path,
    )
    if output_dir is not None:
        result.log.write_csv(os.path.join(output_dir, LOG_FILE))
    system = BenchmarkSystem.from_spec(dataset.spec)
    model = result.surrogate.filter_model(system.observer, system.obs_var, system.prior())
    report = evaluate(model, system, dataset.test, config.eval, method)
    report.meta.update(train_backend=config.train.backend, **result.meta())
    if output_dir is not None:
        report.write(output_dir)
    return report


def snr_sweep(
    config: RunConfig,
    snr_levels: Iterable[float],
    method: Optional[FilterMethod] = None,
    workers: int = 1,
    output_dir: Optional[str] = None,
) -> list[EvalReport]:
    """One full pipeline run per signal-to-noise ratio

    The observation noise of each level is calibrated from the clean
    signal, see `ssm.dataset.calibrate_obs_var`.  Each level writes into
    `output_dir/snr_<level>` when `output_dir` is given.
    """
    reports = []
    for level in snr_levels:
        _LOG.info("SNR sweep: %s at %g dB", config.system.name.name, level)
        level_config = replace(config, system=replace(config.system, snr_db=float(level)))
        subdir = None if output_dir is None else os.path.join(output_dir, f"snr_{level:g}")
        reports.append(run_pipeline(level_config, method, workers, subdir))
    return reports


def sensor_sweep(
    config: RunConfig,
    sensor_counts: Iterable[int],
    method: Optional[FilterMethod] = None,
    workers: int = 1,
    output_dir: Optional[str] = None,
) -> list[EvalReport]:
    """One full pipeline run per number of randomly placed sensors

    Every level observes n components through the subsample operator,
    keeping the per-component noise variance of `config`.
    """
    reports = []
    obs_level = config.system.obs_var[0]
    for n_sensors in sensor_counts:
        if n_sensors < 1:
            raise ConfigurationError(f"Sensor counts must be positive, got {n_sensors}")
        _LOG.info("Sensor sweep: %s with %d sensors", config.system.name.name, n_sensors)
        spec = replace(
            config.system,
            obs_operator=ObsOperator.subsample,
            obs_dim=int(n_sensors),
            obs_var=[obs_level] * int(n_sensors),
        )
        Observer(spec.obs_operator, spec.state_dim, spec.obs_dim)
        subdir = None if output_dir is None else os.path.join(output_dir, f"sensors_{n_sensors}")
        report = run_pipeline(replace(config, system=spec), method, workers, subdir)
        report.meta["n_sensors"] = int(n_sensors)
        reports.append(report)
    return reports

