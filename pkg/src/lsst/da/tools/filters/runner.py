from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

import numpy as np
from lsst.utils.logging import getLogger

from ..core.utils import ConfigurationError, FilterMethod, make_rng
from ..ssm.dataset import Trajectory
from ..ssm.observation import Observer
from ..ssm.systems import BenchmarkSystem
from .ensemble import (
    Ensemble,
    ObsFunction,
    Transition,
    effective_sample_size,
    enkf_analysis,
    enkf_forecast,
    enkf_loglik_increment,
    pf_forecast,
    pf_resample,
    pf_weights,
)
from .kalman import KalmanBelief, kf_predict, kf_update

_LOG = getLogger(__name__)

# Warn when the effective sample size drops below this fraction of N
DEGENERACY_FRACTION = 0.01

StepFunction = Callable[[np.ndarray, np.random.Generator, Optional[np.ndarray]], np.ndarray]
Posterior = Union[Ensemble, KalmanBelief]


@dataclass
class FilterModel:
    """Everything a filter needs to know about a state-space model

    `step` maps (particles [N, m], rng, control or None) to the next
    particles.  `linear` holds (A, Q, H) when the model is linear-Gaussian,
    which is required by the exact Kalman filter.
    """

    step: StepFunction
    observer: Observer
    obs_var: np.ndarray
    prior_mean: np.ndarray
    prior_var: np.ndarray
    linear: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None
    name: str = ""

    @property
    def state_dim(self) -> int:
        return self.observer.state_dim

    def transition_for(self, traj: Optional[Trajectory], k: int) -> Transition:
        """The transition from x_k to x_{k+1} of a trajectory"""
        control = None if traj is None or traj.c is None else traj.c[k]

        def _transition(particles: np.ndarray, rng: np.random.Generator) -> np.ndarray:
            return self.step(particles, rng, control)

        return _transition

    def h_for(self, traj: Trajectory, k: int) -> ObsFunction:
        """The observation operator producing y_{k+1} of a trajectory"""
        idx = None if traj.obs_idx is None else traj.obs_idx[k]

        def _h(particles: np.ndarray) -> np.ndarray:
            return self.observer.apply(particles, idx)

        return _h

    def sample_prior(self, rng: np.random.Generator, n_particles: int) -> np.ndarray:
        noise = rng.normal(size=(n_particles, self.state_dim))
        return self.prior_mean + noise * np.sqrt(self.prior_var)


def truth_model(
    system: BenchmarkSystem,
    prior: Optional[tuple[np.ndarray, np.ndarray]] = None,
    obs_var: Optional[np.ndarray] = None,
) -> FilterModel:
    """FilterModel that uses the true transition of a benchmark system"""
    prior_mean, prior_var = system.prior() if prior is None else prior

    def _step(particles: np.ndarray, rng: np.random.Generator, control: Optional[np.ndarray]) -> np.ndarray:
        return system.step(particles, rng, control)

    return FilterModel(
        step=_step,
        observer=system.observer,
        obs_var=system.obs_var if obs_var is None else np.asarray(obs_var),
        prior_mean=np.asarray(prior_mean, dtype=np.float64),
        prior_var=np.asarray(prior_var, dtype=np.float64),
        linear=system.linear_model(),
        name=f"truth:{system.spec.name.name}",
    )


def _posterior_mean(post: Posterior) -> np.ndarray:
    return post.mean() if isinstance(post, Ensemble) else post.mean


@dataclass
class FilterResult:
    """Posterior at t = 1 .. T and the per-step log-likelihood increments"""

    posteriors: list[Posterior] = field(default_factory=list)
    increments: list[float] = field(default_factory=list)

    @property
    def loglik(self) -> float:
        return float(np.sum(self.increments)) if self.increments else 0.0

    def means(self) -> np.ndarray:
        return np.array([_posterior_mean(post) for post in self.posteriors])

    def stds(self) -> np.ndarray:
        return np.array([post.std() for post in self.posteriors])

    def ensembles(self) -> np.ndarray:
        """Stacked posterior particles [T, N, m]; ensemble filters only"""
        return np.array([post.particles for post in self.posteriors if isinstance(post, Ensemble)])


def run_filter(
    method: FilterMethod,
    model: FilterModel,
    traj: Trajectory,
    n_particles: int,
    seed: int | tuple[int, ...],
    initial: Optional[Ensemble] = None,
) -> FilterResult:
    """Filter a whole observation sequence

    Parameters
    ----------
    method : FilterMethod
        EnKF, PF (resampling every step), or exact KF

    model : FilterModel
        Transition and observation model

    traj : Trajectory
        Observations, with controls and sensor indices when present

    n_particles : int
        Ensemble size (ignored by the KF)

    seed : int | tuple[int, ...]
        Seed, or tuple of keys, of the filter's random stream

    initial : Ensemble | None
        Initial ensemble; drawn from the model prior by default

    Returns
    -------
    result : FilterResult
        Posterior ensembles (or beliefs) and log-likelihood increments
    """
    result = FilterResult()
    if method == FilterMethod.kf:
        return _run_kalman(model, traj, result)
    rng = make_rng(*seed) if isinstance(seed, tuple) else make_rng(seed)
    ens = initial if initial is not None else Ensemble.uniform(model.sample_prior(rng, n_particles))
    for k in range(traj.n_steps):
        transition = model.transition_for(traj, k)
        h = model.h_for(traj, k)
        if method == FilterMethod.enkf:
            forecast = enkf_forecast(ens, transition, rng)
            result.increments.append(enkf_loglik_increment(forecast, traj.y[k], h, model.obs_var))
            ens = enkf_analysis(forecast, traj.y[k], h, model.obs_var, rng)
        else:
            forecast = pf_forecast(ens, transition, rng)
            weights, increment = pf_weights(forecast, traj.y[k], h, model.obs_var)
            result.increments.append(increment)
            ess = effective_sample_size(weights)
            if ess < DEGENERACY_FRACTION * forecast.size:
                _LOG.warning("Particle degeneracy at t=%d: ESS %.2f for N=%d", k + 1, ess, forecast.size)
            ens = pf_resample(forecast.particles, weights, rng, forecast.t)
        result.posteriors.append(ens)
    return result


def _run_kalman(model: FilterModel, traj: Trajectory, result: FilterResult) -> FilterResult:
    if model.linear is None:
        raise ConfigurationError(f"The Kalman filter needs a linear-Gaussian model, {model.name} is not")
    if traj.c is not None:
        raise ConfigurationError("The Kalman filter does not support control inputs")
    trans_matrix, process_cov, obs_matrix = model.linear
    obs_cov = np.diag(model.obs_var)
    belief = KalmanBelief(model.prior_mean, np.diag(model.prior_var))
    for k in range(traj.n_steps):
        predicted = kf_predict(belief, trans_matrix, process_cov)
        belief, increment = kf_update(predicted, traj.y[k], obs_matrix, obs_cov)
        result.posteriors.append(belief)
        result.increments.append(increment)
    return result


def propagate(
    model: FilterModel,
    ens: Ensemble,
    horizon: int,
    rng: np.random.Generator,
    controls: Optional[np.ndarray] = None,
) -> list[Ensemble]:
    """Forecast an ensemble `horizon` steps with no analysis

    Returns the ensembles at horizons 0 .. horizon; `controls[k]` is used
    for the k-th step when given.
    """
    out = [ens]
    for k in range(horizon):
        control = None if controls is None else controls[k]
        particles = model.step(ens.particles, rng, control)
        ens = Ensemble.uniform(particles, ens.t + 1)
        out.append(ens)
    return out


def posterior_records(
    result: FilterResult,
    traj_id: int,
    full: bool = False,
    t_offset: int = 0,
) -> list[dict[str, Any]]:
    """One JSON-ready record per step: id, t, mean, std, loglik_inc (and particles)"""
    records = []
    for k, post in enumerate(result.posteriors):
        record: dict[str, Any] = dict(
            id=traj_id,
            t=t_offset + k + 1,
            mean=_posterior_mean(post).tolist(),
            std=post.std().tolist(),
        )
        if k < len(result.increments):
            record["loglik_inc"] = result.increments[k]
        if full and isinstance(post, Ensemble):
            record["particles"] = post.particles.tolist()
        records.append(record)
    return records


def final_ensemble(post: Posterior, n_particles: int, rng: np.random.Generator) -> Ensemble:
    """The last posterior as an ensemble; Kalman beliefs are sampled"""
    if isinstance(post, Ensemble):
        return post
    particles = rng.multivariate_normal(post.mean, post.covariance, size=n_particles)
    return Ensemble.uniform(particles, post.t)


def ensemble_record(ens: Ensemble, traj_id: int) -> dict[str, Any]:
    return dict(id=traj_id, t=ens.t, particles=ens.particles.tolist(), weights=ens.weights.tolist())


def ensemble_from_record(record: dict[str, Any]) -> tuple[int, Ensemble]:
    """Inverse of `ensemble_record`"""
    ens = Ensemble(np.asarray(record["particles"]), np.asarray(record["weights"]), int(record["t"]))
    return int(record["id"]), ens


def forecast_records(ensembles: list[Ensemble], traj_id: int) -> list[dict[str, Any]]:
    """One record per lead time h = 0 .. H: id, t, h, mean, std"""
    t_start = ensembles[0].t
    return [
        dict(id=traj_id, t=ens.t, h=ens.t - t_start, mean=ens.mean().tolist(), std=ens.std().tolist())
        for ens in ensembles
    ]
