from __future__ import annotations

from typing import Optional

import numpy as np

from ..core.utils import ConfigurationError, ContractError, DimensionError, DomainError, ObsOperator

# Radius below which the polar observation of a point is undefined
POLAR_MIN_RADIUS = 1e-12


def obs_dim_for(operator: ObsOperator, state_dim: int, n_sensors: Optional[int] = None) -> int:
    """Return the observation dimension implied by an operator"""
    if operator == ObsOperator.circle_polar:
        return 3
    if operator == ObsOperator.subsample:
        return state_dim if n_sensors is None else n_sensors
    return state_dim


class Observer:
    """Observation operator h, without the noise

    Parameters
    ----------
    operator : ObsOperator
        Which operator to apply

    state_dim : int
        Dimension m of the state

    obs_dim : int
        Dimension n of the observation

    Notes
    -----
    For `ObsOperator.subsample` the observed indices change at every
    time step.  They are drawn with `draw_indices` when the data are
    generated, stored with the trajectory, and passed back to `apply`.
    """

    def __init__(self, operator: ObsOperator, state_dim: int, obs_dim: int) -> None:
        self.operator = operator
        self.state_dim = state_dim
        self.obs_dim = obs_dim
        if operator == ObsOperator.subsample:
            if obs_dim > state_dim:
                raise ConfigurationError(f"Cannot subsample {obs_dim} sensors from a {state_dim}-d state")
        elif obs_dim != obs_dim_for(operator, state_dim):
            raise ConfigurationError(
                f"Operator {operator.name} maps {state_dim} to {obs_dim_for(operator, state_dim)}, "
                f"not {obs_dim}"
            )
        if operator == ObsOperator.circle_polar and state_dim != 2:
            raise ConfigurationError(f"circle_polar needs a 2-d state, not {state_dim}")
        if operator == ObsOperator.lorenz63_nonlinear and state_dim != 3:
            raise ConfigurationError(f"lorenz63_nonlinear needs a 3-d state, not {state_dim}")

    @property
    def needs_indices(self) -> bool:
        return self.operator == ObsOperator.subsample

    def draw_indices(self, rng: np.random.Generator) -> Optional[np.ndarray]:
        """Draw this step's sensor locations, uniformly without replacement"""
        if not self.needs_indices:
            return None
        return np.sort(rng.choice(self.state_dim, size=self.obs_dim, replace=False))

    def apply(self, x: np.ndarray, idx: Optional[np.ndarray] = None) -> np.ndarray:
        """Apply h to a state [m] or to an ensemble [N, m]"""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.state_dim:
            raise DimensionError(f"Observer expects states of dimension {self.state_dim}, got {x.shape}")
        if self.operator == ObsOperator.identity:
            return x.copy()
        if self.operator == ObsOperator.arctan:
            return np.arctan(x)
        if self.operator == ObsOperator.subsample:
            if idx is None:
                raise ContractError("subsample observation needs the recorded sensor indices")
            return x[..., np.asarray(idx, dtype=int)]
        if self.operator == ObsOperator.lorenz63_nonlinear:
            return np.stack(
                [
                    x[..., 0] + 0.5 * np.sin(x[..., 0]),
                    x[..., 1] + np.cos(x[..., 2]),
                    x[..., 1] + x[..., 2],
                ],
                axis=-1,
            )
        radius = np.linalg.norm(x, axis=-1)
        if np.any(radius < POLAR_MIN_RADIUS):
            raise DomainError("circle_polar observation is undefined at the origin")
        return np.stack(
            [
                radius,
                np.arcsin(np.clip(x[..., 0] / radius, -1.0, 1.0)),
                np.arccos(np.clip(x[..., 1] / radius, -1.0, 1.0)),
            ],
            axis=-1,
        )


def observe(
    x: np.ndarray,
    observer: Observer,
    obs_var: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    idx: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Return h(x) plus N(0, diag(obs_var)) noise

    With `rng` or `obs_var` left as None the noise is switched off.
    """
    y_clean = observer.apply(x, idx)
    if rng is None or obs_var is None:
        return y_clean
    return y_clean + rng.normal(size=y_clean.shape) * np.sqrt(np.asarray(obs_var, dtype=np.float64))


def snr_to_sigma(n_obs: int, snr_db: float, signals: np.ndarray) -> np.ndarray:
    """Observation noise variances giving a signal-to-noise ratio

    Parameters
    ----------
    n_obs : int
        Observation dimension n

    snr_db : float
        Target signal-to-noise ratio, in dB

    signals : np.ndarray
        Sample of noise-free observations, shape [..., n]

    Returns
    -------
    obs_var : np.ndarray
        Diagonal of R, all entries equal to P_signal / 10^(snr_db / 10),
        where P_signal is the mean squared centered signal pooled over
        components
    """
    signals = np.asarray(signals, dtype=np.float64)
    if signals.size == 0:
        raise ContractError("snr_to_sigma needs a non-empty signal sample")
    flat = signals.reshape(-1, signals.shape[-1])
    power = float(np.mean((flat - flat.mean(axis=0)) ** 2))
    return np.full(n_obs, power / 10.0 ** (snr_db / 10.0))
