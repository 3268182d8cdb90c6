"""Evaluation reports and the long-format tables used for plotting."""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Any, Iterable, Optional

import numpy as np
import pandas as pd
from lsst.utils.logging import getLogger

from ..core.config import EvalConfig
from ..core.utils import ConfigurationError, ContractError, FilterMethod, NumericError, safe_makedirs
from ..filters.runner import FilterModel, FilterResult, run_filter
from ..ssm.dataset import Trajectory
from ..ssm.systems import BenchmarkSystem
from .metrics import forecast_errors, score_result

_LOG = getLogger(__name__)

SUMMARY_COLUMNS = ["system", "method", "snr_db", "metric", "value", "n_traj"]
TRAJECTORY_COLUMNS = ["system", "method", "snr_db", "id", "metric", "value"]

REPORT_FILE = "report.json"
REPORT_CSV = "report.csv"
EVAL_STREAM = 3


def horizon_label(horizon: float) -> str:
    return f"rmse_f@{horizon:g}"


@dataclass
class EvalReport:
    """Scores of one model on one test set

    `trajectories` holds one {"id", "rmse_a", "crps"} entry per test
    trajectory; `rmse_f` maps the horizon labels to forecast errors.
    """

    system: str
    method: str
    n_particles: int
    seed: int
    snr_db: Optional[float] = None
    trajectories: list[dict[str, float]] = field(default_factory=list)
    rmse_f: dict[str, float] = field(default_factory=dict)
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for entry in self.trajectories:
            for key in ("rmse_a", "crps"):
                self._check_value(f"{key} of trajectory {entry.get('id')}", entry[key])
        for label, value in self.rmse_f.items():
            self._check_value(label, value)

    @staticmethod
    def _check_value(what: str, value: float) -> None:
        if not math.isfinite(value):
            raise NumericError(f"Non-finite {what}: {value}")
        if value < 0.0:
            raise ContractError(f"Negative {what}: {value}")

    @property
    def n_traj(self) -> int:
        return len(self.trajectories)

    def aggregate(self) -> dict[str, float]:
        """Trajectory-averaged RMSE-a and CRPS, plus the RMSE-f values"""
        out: dict[str, float] = {}
        if self.trajectories:
            for key in ("rmse_a", "crps"):
                out[key] = float(np.mean([entry[key] for entry in self.trajectories]))
        out.update(self.rmse_f)
        return out

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["aggregate"] = self.aggregate()
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EvalReport:
        data = {key_: val_ for key_, val_ in data.items() if key_ != "aggregate"}
        missing = {"system", "method", "n_particles", "seed"} - set(data)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if missing or unknown:
            raise ConfigurationError(
                f"Not an evaluation report: missing {sorted(missing)}, unknown {sorted(unknown)}"
            )
        return cls(**data)

    def summary_frame(self) -> pd.DataFrame:
        rows = [
            dict(
                system=self.system,
                method=self.method,
                snr_db=self.snr_db,
                metric=metric,
                value=value,
                n_traj=self.n_traj,
            )
            for metric, value in self.aggregate().items()
        ]
        return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)

    def trajectory_frame(self) -> pd.DataFrame:
        rows = [
            dict(
                system=self.system,
                method=self.method,
                snr_db=self.snr_db,
                id=entry["id"],
                metric=key,
                value=entry[key],
            )
            for entry in self.trajectories
            for key in ("rmse_a", "crps")
        ]
        return pd.DataFrame(rows, columns=TRAJECTORY_COLUMNS)

    def write(self, dirname: str) -> str:
        """Write report.json and the per-trajectory report.csv into dirname"""
        safe_makedirs(dirname)
        path = os.path.join(dirname, REPORT_FILE)
        with open(path, "wt", encoding="utf-8") as fout:
            json.dump(self.to_dict(), fout, indent=2, sort_keys=True)
            fout.write("\n")
        self.trajectory_frame().to_csv(os.path.join(dirname, REPORT_CSV), index=False)
        return path


def read_report(path: str) -> EvalReport:
    """Read a report.json; a directory is taken to contain one"""
    if os.path.isdir(path):
        path = os.path.join(path, REPORT_FILE)
    if not os.path.exists(path):
        raise ConfigurationError(f"No evaluation report at {path}")
    with open(path, "rt", encoding="utf-8") as fin:
        data = json.load(fin)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} is not an evaluation report")
    return EvalReport.from_dict(data)


def merge_reports(reports: Iterable[EvalReport]) -> pd.DataFrame:
    """Long-format table keyed by (system, method, snr_db, metric)

    Raises
    ------
    ContractError
        No reports were given
    """
    frames = [report.summary_frame() for report in reports]
    if not frames:
        raise ContractError("Merging needs at least one report")
    return pd.concat(frames, ignore_index=True)[SUMMARY_COLUMNS]


def assimilate_test_set(
    model: FilterModel,
    test: list[Trajectory],
    method: FilterMethod,
    n_particles: int,
    seed: int,
    n_steps: Optional[int] = None,
) -> list[FilterResult]:
    """Filter every test trajectory, each with its own random stream

    `n_steps` limits assimilation to the first steps of each trajectory.
    """
    results = []
    for traj in test:
        if n_steps is not None:
            traj = traj.head(min(n_steps, traj.n_steps))
        result = run_filter(method, model, traj, n_particles, (seed, EVAL_STREAM, traj.id))
        _LOG.debug("Trajectory %d: log-likelihood %.4f", traj.id, result.loglik)
        results.append(result)
    return results


def evaluate(
    model: FilterModel,
    system: BenchmarkSystem,
    test: list[Trajectory],
    config: EvalConfig,
    method: Optional[FilterMethod] = None,
    forecast: bool = True,
    results: Optional[list[FilterResult]] = None,
) -> EvalReport:
    """Assimilate the test set with a model and score it

    Parameters
    ----------
    model : FilterModel
        Learned surrogate or true model

    system : BenchmarkSystem
        The true system, for RMSE-f

    test : list[Trajectory]
        Test trajectories, which must carry their states

    config : EvalConfig
        Ensemble size, horizons, assimilation window and seed

    method : FilterMethod | None
        Overrides `config.method`

    forecast : bool
        Also compute RMSE-f at the configured horizons

    results : list[FilterResult] | None
        Filter runs to score instead of running `assimilate_test_set`
    """
    method = FilterMethod[config.method] if method is None else method
    if results is None:
        results = assimilate_test_set(
            model, test, method, config.n_particles, config.seed, config.assimilate_steps
        )
    entries = []
    for traj, result in zip(test, results):
        if traj.x is None:
            raise ContractError(f"Test trajectory {traj.id} has no states")
        if not result.posteriors:
            continue
        entries.append(dict(id=traj.id, **score_result(result, traj.x[1:])))
    rmse_f: dict[str, float] = {}
    if forecast and test:
        steps = config.horizon_steps(system.spec.dt)
        errors = forecast_errors(model, system, max(steps), config.n_initial, config.n_particles, config.seed)
        for horizon, step in zip(config.horizons, steps):
            rmse_f[horizon_label(horizon)] = float(errors[step - 1])
    return EvalReport(
        system=system.spec.name.name,
        method=method.name,
        n_particles=config.n_particles,
        seed=config.seed,
        snr_db=system.spec.snr_db,
        trajectories=entries,
        rmse_f=rmse_f,
        meta=dict(model=model.name),
    )
