from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from ..core.diffmath import LOG_2PI
from ..core.utils import DimensionError, NumericError


@dataclass
class KalmanBelief:
    """Gaussian belief N(mean, covariance) of the exact Kalman filter"""

    mean: np.ndarray
    covariance: np.ndarray
    t: int = 0

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.covariance, dtype=np.float64)
        if cov.shape != (self.mean.size, self.mean.size):
            raise DimensionError(f"Covariance {cov.shape} does not match mean {self.mean.shape}")
        self.covariance = 0.5 * (cov + cov.T)

    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.covariance), 0.0, None))


def kf_predict(belief: KalmanBelief, trans_matrix: np.ndarray, process_cov: np.ndarray) -> KalmanBelief:
    """Propagate the belief through x' = A x + xi, xi ~ N(0, Q)"""
    mean = trans_matrix @ belief.mean
    cov = trans_matrix @ belief.covariance @ trans_matrix.T + process_cov
    return KalmanBelief(mean, cov, belief.t + 1)


def kf_update(
    belief: KalmanBelief,
    y: np.ndarray,
    obs_matrix: np.ndarray,
    obs_cov: np.ndarray,
) -> tuple[KalmanBelief, float]:
    """Condition the belief on y = H x + eta, eta ~ N(0, R)

    Returns
    -------
    posterior : KalmanBelief
        The filtering distribution

    loglik : float
        log N(y; H m, H P H^T + R), the exact log-marginal-likelihood increment
    """
    y = np.asarray(y, dtype=np.float64)
    innovation = y - obs_matrix @ belief.mean
    innov_cov = obs_matrix @ belief.covariance @ obs_matrix.T + obs_cov
    try:
        chol = scipy.linalg.cho_factor(innov_cov, lower=True)
    except scipy.linalg.LinAlgError as msg:
        raise NumericError(f"Innovation covariance is not positive definite: {msg}") from msg
    cross = belief.covariance @ obs_matrix.T
    gain = scipy.linalg.cho_solve(chol, cross.T).T
    mean = belief.mean + gain @ innovation
    cov = belief.covariance - gain @ innov_cov @ gain.T
    log_det = 2.0 * np.sum(np.log(np.diag(chol[0])))
    maha = float(innovation @ scipy.linalg.cho_solve(chol, innovation))
    loglik = -0.5 * (log_det + maha + LOG_2PI * y.size)
    return KalmanBelief(mean, cov, belief.t), float(loglik)
