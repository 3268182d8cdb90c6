"""Ensemble Kalman filter and bootstrap particle filter steps.

All functions work on whole ensembles at once; h maps [N, m] to [N, n]
and transitions map ([N, m], rng) to [N, m].  Observation noise
covariances are diagonal and given by their diagonal `obs_var`.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from ..core.diffmath import LOG_2PI
from ..core.utils import ContractError, DimensionError, DomainError, NumericError, check_finite

Transition = Callable[[np.ndarray, np.random.Generator], np.ndarray]
ObsFunction = Callable[[np.ndarray], np.ndarray]

WEIGHT_TOLERANCE = 1e-12


@dataclass
class Ensemble:
    """N particles of dimension m with normalized weights, at time step t"""

    particles: np.ndarray
    weights: np.ndarray
    t: int = 0

    def __post_init__(self) -> None:
        self.particles = np.asarray(self.particles, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.particles.ndim != 2 or self.weights.shape != (self.particles.shape[0],):
            raise DimensionError(
                f"Ensemble needs particles [N, m] and weights [N], got {self.particles.shape} "
                f"and {self.weights.shape}"
            )
        if np.any(self.weights < 0.0) or abs(self.weights.sum() - 1.0) > WEIGHT_TOLERANCE:
            raise ContractError("Ensemble weights must be non-negative and sum to one")

    @classmethod
    def uniform(cls, particles: np.ndarray, t: int = 0) -> Ensemble:
        n_particles = len(particles)
        return cls(particles, np.full(n_particles, 1.0 / n_particles), t)

    @property
    def size(self) -> int:
        return self.particles.shape[0]

    @property
    def dim(self) -> int:
        return self.particles.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.particles

    def std(self) -> np.ndarray:
        """Per-component spread; the unbiased sample std for uniform weights"""
        centered = self.particles - self.mean()
        if self.size < 2:
            return np.zeros(self.dim)
        var = self.weights @ centered**2
        return np.sqrt(var * self.size / (self.size - 1))

    def covariance(self) -> np.ndarray:
        centered = self.particles - self.mean()
        return (centered.T * self.weights) @ centered * self.size / max(self.size - 1, 1)


def enkf_forecast(ens: Ensemble, transition: Transition, rng: np.random.Generator) -> Ensemble:
    """Push every particle through the stochastic transition"""
    forecast = np.asarray(transition(ens.particles, rng), dtype=np.float64)
    if forecast.shape != ens.particles.shape:
        raise DimensionError(f"Transition returned shape {forecast.shape}, expected {ens.particles.shape}")
    check_finite(forecast, "forecast particles")
    return Ensemble.uniform(forecast, ens.t + 1)


def pf_forecast(ens: Ensemble, transition: Transition, rng: np.random.Generator) -> Ensemble:
    """Particle filter forecast; identical to the EnKF forecast"""
    return enkf_forecast(ens, transition, rng)


def _check_obs_var(obs_var: np.ndarray, n_obs: int) -> np.ndarray:
    obs_var = np.asarray(obs_var, dtype=np.float64)
    if obs_var.shape != (n_obs,):
        raise DimensionError(f"Observation variance {obs_var.shape} does not match n={n_obs}")
    if not np.all(obs_var > 0.0):
        raise DomainError("Observation noise variances must be strictly positive")
    return obs_var


def enkf_analysis(
    forecast: Ensemble,
    y: np.ndarray,
    h: ObsFunction,
    obs_var: np.ndarray,
    rng: np.random.Generator,
) -> Ensemble:
    """Stochastic EnKF update with perturbed observations

    Parameters
    ----------
    forecast : Ensemble
        Forecast ensemble, N >= 2

    y : np.ndarray
        Observation [n]

    h : ObsFunction
        Observation operator applied to the whole ensemble

    obs_var : np.ndarray
        Diagonal of R [n], all strictly positive

    rng : np.random.Generator
        Source of the observation perturbations

    Returns
    -------
    analysis : Ensemble
        x_i + K (y + eta_i - h(x_i)), with the gain
        K = C_xy (C_yy + R)^-1 built from ensemble anomalies
    """
    n_particles = forecast.size
    if n_particles < 2:
        raise ContractError(f"EnKF analysis needs at least 2 particles, got {n_particles}")
    y = np.asarray(y, dtype=np.float64)
    obs_var = _check_obs_var(obs_var, y.shape[0])
    hx = np.asarray(h(forecast.particles), dtype=np.float64)
    anom_x = forecast.particles - forecast.particles.mean(axis=0)
    anom_y = hx - hx.mean(axis=0)
    cov_xy = anom_x.T @ anom_y / (n_particles - 1)
    cov_yy = anom_y.T @ anom_y / (n_particles - 1) + np.diag(obs_var)
    try:
        gain_t = scipy.linalg.solve(cov_yy, cov_xy.T, assume_a="pos")
    except (scipy.linalg.LinAlgError, ValueError) as msg:
        raise NumericError(f"Singular innovation covariance in EnKF analysis: {msg}") from msg
    perturbed = y + rng.normal(size=hx.shape) * np.sqrt(obs_var)
    analysis = forecast.particles + (perturbed - hx) @ gain_t
    check_finite(analysis, "analysis particles")
    return Ensemble.uniform(analysis, forecast.t)


def particle_loglik(hx: np.ndarray, y: np.ndarray, obs_var: np.ndarray) -> np.ndarray:
    """log N(y; h(x_i), diag(obs_var)) for every particle, shape [N]"""
    y = np.asarray(y, dtype=np.float64)
    obs_var = _check_obs_var(obs_var, y.shape[0])
    resid = y - hx
    return -0.5 * np.sum(np.log(obs_var) + LOG_2PI + resid**2 / obs_var, axis=-1)


def enkf_loglik_increment(forecast: Ensemble, y: np.ndarray, h: ObsFunction, obs_var: np.ndarray) -> float:
    """log of the mean observation likelihood over the forecast particles"""
    logw = particle_loglik(np.asarray(h(forecast.particles), dtype=np.float64), y, obs_var)
    return float(logsumexp(logw) - np.log(forecast.size))


def pf_weights(
    forecast: Ensemble,
    y: np.ndarray,
    h: ObsFunction,
    obs_var: np.ndarray,
) -> tuple[np.ndarray, float]:
    """Normalized importance weights and the log-likelihood increment

    Returns
    -------
    weights : np.ndarray
        w_i / sum_j w_j with w_i = N(y; h(x_i), R), normalized in log space

    increment : float
        log((1/N) sum_i w_i)
    """
    logw = particle_loglik(np.asarray(h(forecast.particles), dtype=np.float64), y, obs_var)
    if not np.isfinite(np.max(logw)):
        raise NumericError("All particle log-weights are non-finite")
    log_norm = logsumexp(logw)
    weights = np.exp(logw - log_norm)
    return weights / weights.sum(), float(log_norm - np.log(forecast.size))


def systematic_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Systematic resampling: strata i/N + u, u ~ U(0, 1/N)"""
    n_particles = len(weights)
    positions = (np.arange(n_particles) + rng.uniform()) / n_particles
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    return np.searchsorted(cumulative, positions, side="right")


def pf_resample(particles: np.ndarray, weights: np.ndarray, rng: np.random.Generator, t: int = 0) -> Ensemble:
    """Draw N equally weighted particles by systematic resampling"""
    idx = systematic_indices(np.asarray(weights, dtype=np.float64), rng)
    return Ensemble.uniform(np.asarray(particles)[idx], t)


def effective_sample_size(weights: np.ndarray) -> float:
    return float(1.0 / np.sum(np.asarray(weights) ** 2))
