"""Scores of assimilation and forecast results.

All scores are averaged over the state components and time steps, so they
are in the units of the state.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
from lsst.utils.logging import getLogger
from scipy.stats import norm

from ..core.utils import ContractError, DimensionError, make_rng
from ..filters.ensemble import Ensemble
from ..filters.kalman import KalmanBelief
from ..filters.runner import FilterModel, FilterResult, propagate
from ..ssm.systems import BenchmarkSystem

_LOG = getLogger(__name__)

DEFAULT_INITIAL_CONDITIONS = 1000

# Streams of the forecast-skill runs
INITIAL_STREAM = 0
MODEL_STREAM = 1
TRUTH_STREAM = 2


def _check_pair(ensembles: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    ensembles = np.asarray(ensembles, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if ensembles.ndim != 3 or truth.ndim != 2:
        raise DimensionError(
            f"Expected ensembles [T, N, m] and truth [T, m], got {ensembles.shape}, {truth.shape}"
        )
    if ensembles.shape[0] != truth.shape[0] or ensembles.shape[2] != truth.shape[1]:
        raise DimensionError(f"Ensembles {ensembles.shape} do not match truth {truth.shape}")
    if truth.shape[0] == 0:
        raise ContractError("Cannot score an empty sequence")
    return ensembles, truth


def rmse_from_means(means: np.ndarray, truth: np.ndarray) -> float:
    """sqrt(1/(mT) sum_t |mean_t - x_t|^2)"""
    means = np.asarray(means, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if means.shape != truth.shape:
        raise DimensionError(f"Means {means.shape} do not match truth {truth.shape}")
    if truth.size == 0:
        raise ContractError("Cannot score an empty sequence")
    return math.sqrt(float(np.mean((means - truth) ** 2)))


def rmse_a(ensembles: np.ndarray, truth: np.ndarray) -> float:
    """Root-mean-square error of the posterior ensemble mean

    Parameters
    ----------
    ensembles : np.ndarray
        Posterior particles at t = 1 .. T, shape [T, N, m]

    truth : np.ndarray
        True states x_1 .. x_T, shape [T, m]

    Returns
    -------
    score : float
        sqrt(1/(mT) sum_t |(1/N) sum_i x_t^i - x_t|^2)

    Raises
    ------
    ContractError
        T is zero
    """
    ensembles, truth = _check_pair(ensembles, truth)
    return rmse_from_means(ensembles.mean(axis=1), truth)


def crps_terms(samples: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """CRPS of empirical ensembles, one per leading index

    `samples` is [..., N] and `truth` is [...].  Uses
    (1/N) sum_i |x_i - x*| - (1/(2N^2)) sum_ij |x_i - x_j|, with the pair
    sum computed from the sorted members as 2 sum_i (2i - N - 1) x_(i).
    """
    samples = np.sort(np.asarray(samples, dtype=np.float64), axis=-1)
    truth = np.asarray(truth, dtype=np.float64)
    n_members = samples.shape[-1]
    if n_members < 1:
        raise ContractError("CRPS needs at least one ensemble member")
    spread_weights = 2.0 * np.arange(1, n_members + 1) - n_members - 1.0
    skill = np.abs(samples - truth[..., None]).mean(axis=-1)
    spread = (samples * spread_weights).sum(axis=-1) / n_members**2
    return np.maximum(skill - spread, 0.0)


def crps(ensembles: np.ndarray, truth: np.ndarray) -> float:
    """Continuous ranked probability score, averaged over components and steps

    Parameters
    ----------
    ensembles : np.ndarray
        Posterior particles at t = 1 .. T, shape [T, N, m]

    truth : np.ndarray
        True states, shape [T, m]
    """
    ensembles, truth = _check_pair(ensembles, truth)
    return float(crps_terms(np.swapaxes(ensembles, 1, 2), truth).mean())


def crps_gaussian(mean: np.ndarray, std: np.ndarray, truth: np.ndarray) -> float:
    """CRPS of independent Gaussian marginals, for Kalman filter beliefs"""
    mean, std, truth = (np.asarray(val_, dtype=np.float64) for val_ in (mean, std, truth))
    if truth.size == 0:
        raise ContractError("Cannot score an empty sequence")
    std = np.maximum(std, 1e-300)
    zval = (truth - mean) / std
    terms = std * (zval * (2.0 * norm.cdf(zval) - 1.0) + 2.0 * norm.pdf(zval) - 1.0 / math.sqrt(math.pi))
    return float(terms.mean())


def score_result(result: FilterResult, truth: np.ndarray) -> dict[str, float]:
    """RMSE-a and CRPS of a filter run against x_1 .. x_T

    Ensemble posteriors are scored with the empirical CRPS, Kalman beliefs
    with the Gaussian one.
    """
    if not result.posteriors:
        raise ContractError("Cannot score an empty filter run")
    truth = np.asarray(truth, dtype=np.float64)[: len(result.posteriors)]
    if isinstance(result.posteriors[0], KalmanBelief):
        return dict(
            rmse_a=rmse_from_means(result.means(), truth),
            crps=crps_gaussian(result.means(), result.stds(), truth),
        )
    ensembles = result.ensembles()
    return dict(rmse_a=rmse_a(ensembles, truth), crps=crps(ensembles, truth))


def forecast_errors(
    model: FilterModel,
    system: BenchmarkSystem,
    max_horizon: int,
    n_initial: int = DEFAULT_INITIAL_CONDITIONS,
    n_particles: int = 20,
    seed: int = 0,
) -> np.ndarray:
    """RMSE-f at every horizon 1 .. max_horizon

    For each of `n_initial` initial conditions drawn from the system's
    attractor (burn-in) distribution, an ensemble of `n_particles` copies is
    propagated under `model` and, with independent noise, under the true
    system; the ensemble means are compared.  Controlled systems draw one
    control sequence per initial condition.

    Returns
    -------
    errors : np.ndarray
        sqrt(1/(mP) sum_p |mean_model_t^p - mean_true_t^p|^2), shape [max_horizon]
    """
    if max_horizon < 1:
        raise ContractError(f"Forecast horizon must be at least 1, got {max_horizon}")
    if model.state_dim != system.spec.state_dim:
        raise DimensionError(f"Model has m={model.state_dim}, system has m={system.spec.state_dim}")
    init_rng = make_rng(seed, INITIAL_STREAM)
    model_rng = make_rng(seed, MODEL_STREAM)
    truth_rng = make_rng(seed, TRUTH_STREAM)
    initial = system.initial_states(init_rng, n_initial)
    state_dim = system.spec.state_dim

    def _truth_step(
        particles: np.ndarray, rng: np.random.Generator, control: Optional[np.ndarray]
    ) -> np.ndarray:
        return system.step(particles, rng, control)

    true_model = FilterModel(_truth_step, model.observer, model.obs_var, model.prior_mean, model.prior_var)
    if system.spec.control_dim == 0:
        # all initial conditions in one [P N, m] ensemble
        start = Ensemble.uniform(np.repeat(initial, n_particles, axis=0))
        model_runs = propagate(model, start, max_horizon, model_rng)
        true_runs = propagate(true_model, start, max_horizon, truth_rng)
        sq_err = np.array(
            [
                (
                    model_runs[h].particles.reshape(n_initial, n_particles, state_dim).mean(axis=1)
                    - true_runs[h].particles.reshape(n_initial, n_particles, state_dim).mean(axis=1)
                )
                ** 2
                for h in range(1, max_horizon + 1)
            ]
        )
    else:
        sq_err = np.zeros((max_horizon, n_initial, state_dim))
        for p in range(n_initial):
            controls = system.draw_controls(init_rng, max_horizon)
            start = Ensemble.uniform(np.repeat(initial[p : p + 1], n_particles, axis=0))
            model_runs = propagate(model, start, max_horizon, model_rng, controls)
            true_runs = propagate(true_model, start, max_horizon, truth_rng, controls)
            for h in range(1, max_horizon + 1):
                sq_err[h - 1, p] = (model_runs[h].mean() - true_runs[h].mean()) ** 2
    return np.sqrt(sq_err.reshape(max_horizon, -1).mean(axis=1))


def rmse_f(
    model: FilterModel,
    system: BenchmarkSystem,
    horizon: int,
    n_initial: int = DEFAULT_INITIAL_CONDITIONS,
    n_particles: int = 20,
    seed: int = 0,
) -> float:
    """RMSE of the `horizon`-step ensemble-mean forecast of `model`

    Parameters
    ----------
    model : FilterModel
        The forecast model, usually `Surrogate.filter_model`

    system : BenchmarkSystem
        The true system, which supplies the initial conditions and the
        reference forecasts

    horizon : int
        Lead time in steps, at least 1

    n_initial : int
        Number of initial conditions P

    n_particles : int
        Ensemble size N of both forecasts

    seed : int
        Seed of the initial conditions and of both noise streams
    """
    return float(forecast_errors(model, system, horizon, n_initial, n_particles, seed)[-1])
