"""Filtering as a Markov decision process.

The state is the posterior ensemble plus the next observation (and control),
the action is a forecast ensemble drawn from the surrogate, the transition
is the filter analysis, and the reward is the log-mean observation
likelihood of the forecast, so the return of an episode estimates the
log-marginal-likelihood of its observation sequence.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from lsst.utils.logging import getLogger

from ..core.utils import ContractError, DimensionError, FilterMethod, NumericError, make_rng
from ..filters.ensemble import Ensemble, enkf_analysis, enkf_loglik_increment, pf_resample, pf_weights
from ..ssm.dataset import Trajectory
from ..ssm.observation import Observer
from .surrogate import Surrogate, obs_input

_LOG = getLogger(__name__)


@dataclass
class MdpState:
    """Posterior particles x_t, and y_{t+1} (with its sensor indices and c_t) unless terminal"""

    particles: np.ndarray
    t: int
    y_next: Optional[np.ndarray] = None
    obs_idx: Optional[np.ndarray] = None
    control: Optional[np.ndarray] = None
    terminal: bool = False


@dataclass
class MdpAction:
    """Forecast particles; the observation part of the action is implied by the state"""

    forecasts: np.ndarray


@dataclass(frozen=True)
class Episode:
    """One observation sequence to be filtered with a fixed backend"""

    traj: Trajectory
    backend: FilterMethod
    n_particles: int
    observer: Observer
    obs_var: np.ndarray

    def __post_init__(self) -> None:
        if self.backend not in (FilterMethod.enkf, FilterMethod.pf):
            raise ContractError(f"Episodes run with the enkf or pf backend, not {self.backend.name}")

    @property
    def length(self) -> int:
        return self.traj.n_steps


def state_at(episode: Episode, particles: np.ndarray, t: int) -> MdpState:
    """The MDP state holding particles x_t"""
    traj = episode.traj
    if t == traj.n_steps:
        return MdpState(particles, t, terminal=True)
    return MdpState(
        particles,
        t,
        y_next=traj.y[t],
        obs_idx=None if traj.obs_idx is None else traj.obs_idx[t],
        control=None if traj.c is None else traj.c[t],
    )


def reset(episode: Episode, prior: tuple[np.ndarray, np.ndarray], rng: np.random.Generator) -> MdpState:
    """Draw x_0 ~ N(mu_0, diag(var_0)) and return the initial state"""
    if episode.length < 1:
        raise ContractError(f"Episode of trajectory {episode.traj.id} has no observations")
    prior_mean, prior_var = (np.asarray(val_, dtype=np.float64) for val_ in prior)
    noise = rng.normal(size=(episode.n_particles, prior_mean.size))
    return state_at(episode, prior_mean + noise * np.sqrt(prior_var), 0)


def env_step(
    state: MdpState,
    action: MdpAction,
    episode: Episode,
    rng: np.random.Generator,
) -> tuple[MdpState, float]:
    """Apply the filter analysis to the action and score it

    Returns
    -------
    next_state : MdpState
        State holding the analysis particles x_{t+1}

    reward : float
        log((1/N) sum_i N(y_{t+1}; h(x_hat_i), R)), computed before any resampling
    """
    if state.terminal:
        raise ContractError(f"Cannot step the terminal state of trajectory {episode.traj.id}")
    forecasts = np.asarray(action.forecasts, dtype=np.float64)
    if forecasts.shape != state.particles.shape:
        raise DimensionError(f"Action has shape {forecasts.shape}, state has {state.particles.shape}")
    forecast = Ensemble.uniform(forecasts, state.t + 1)
    idx = state.obs_idx

    def _h(particles: np.ndarray) -> np.ndarray:
        return episode.observer.apply(particles, idx)

    reward = enkf_loglik_increment(forecast, state.y_next, _h, episode.obs_var)
    if episode.backend == FilterMethod.enkf:
        analysis = enkf_analysis(forecast, state.y_next, _h, episode.obs_var, rng)
    else:
        weights, _ = pf_weights(forecast, state.y_next, _h, episode.obs_var)
        analysis = pf_resample(forecast.particles, weights, rng, forecast.t)
    return state_at(episode, analysis.particles, state.t + 1), reward


@dataclass
class EpisodeRecord:
    """Everything one episode contributes to the rollout buffer"""

    episode_id: int
    particles: np.ndarray
    obs_inputs: np.ndarray
    controls: Optional[np.ndarray]
    forecasts: np.ndarray
    rewards: np.ndarray
    logprobs: np.ndarray
    values: np.ndarray


def run_episode(
    surrogate: Surrogate,
    episode: Episode,
    prior: tuple[np.ndarray, np.ndarray],
    rng: np.random.Generator,
    episode_id: int = 0,
) -> EpisodeRecord:
    """Play one episode with the current actor and value it with the current critic"""
    state = reset(episode, prior, rng)
    particles: list[np.ndarray] = []
    obs_inputs: list[np.ndarray] = []
    controls: list[Optional[np.ndarray]] = []
    forecasts: list[np.ndarray] = []
    rewards: list[float] = []
    logprobs: list[float] = []
    while not state.terminal:
        forecast, logprob = surrogate.actor.sample(state.particles, state.control, rng)
        next_state, reward = env_step(state, MdpAction(forecast), episode, rng)
        particles.append(state.particles)
        obs_inputs.append(obs_input(state.y_next, state.control if surrogate.control_dim else None))
        controls.append(state.control)
        forecasts.append(forecast)
        rewards.append(reward)
        logprobs.append(float(np.sum(logprob)))
        state = next_state
    particle_array = np.array(particles)
    obs_array = np.array(obs_inputs)
    return EpisodeRecord(
        episode_id=episode_id,
        particles=particle_array,
        obs_inputs=obs_array,
        controls=np.array(controls) if surrogate.control_dim else None,
        forecasts=np.array(forecasts),
        rewards=np.array(rewards),
        logprobs=np.array(logprobs),
        values=surrogate.critic.values(particle_array, obs_array),
    )


@dataclass
class RolloutBuffer:
    """Transitions of K episodes, flattened in episode order

    `terminals` flags the last transition of every episode, whose next state
    is terminal and has value 0.  `starts[k]` is the index of the first
    transition of the k-th collected episode; `failed` lists the ids of the
    episodes that were dropped.
    """

    episode_ids: np.ndarray
    ts: np.ndarray
    terminals: np.ndarray
    particles: np.ndarray
    obs_inputs: np.ndarray
    controls: Optional[np.ndarray]
    forecasts: np.ndarray
    rewards: np.ndarray
    logprobs: np.ndarray
    values: np.ndarray
    starts: list[int]
    failed: list[int] = field(default_factory=list)
    advantages: Optional[np.ndarray] = None
    targets: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_records(cls, records: list[EpisodeRecord], failed: list[int]) -> RolloutBuffer:
        if not records:
            raise NumericError(f"Every episode failed: {failed}")
        lengths = [len(rec.rewards) for rec in records]
        starts = list(np.cumsum([0] + lengths[:-1]))
        controls = None
        if records[0].controls is not None:
            controls = np.concatenate([rec.controls for rec in records])  # type: ignore[misc]
        return cls(
            episode_ids=np.concatenate([np.full(len(rec.rewards), rec.episode_id) for rec in records]),
            ts=np.concatenate([np.arange(len_) for len_ in lengths]),
            terminals=np.concatenate([np.arange(len_) == len_ - 1 for len_ in lengths]),
            particles=np.concatenate([rec.particles for rec in records]),
            obs_inputs=np.concatenate([rec.obs_inputs for rec in records]),
            controls=controls,
            forecasts=np.concatenate([rec.forecasts for rec in records]),
            rewards=np.concatenate([rec.rewards for rec in records]),
            logprobs=np.concatenate([rec.logprobs for rec in records]),
            values=np.concatenate([rec.values for rec in records]),
            starts=[int(start) for start in starts],
            failed=failed,
        )

    def episode_slices(self) -> list[slice]:
        ends = self.starts[1:] + [len(self)]
        return [slice(start, end) for start, end in zip(self.starts, ends)]

    def episode_returns(self) -> np.ndarray:
        """Undiscounted return of every collected episode"""
        return np.array([self.rewards[slc].sum() for slc in self.episode_slices()])

    def logprob_digest(self) -> str:
        """Hash of the behavior log-probabilities"""
        return hashlib.sha256(np.ascontiguousarray(self.logprobs).tobytes()).hexdigest()


def rollout(
    surrogate: Surrogate,
    episodes: list[Episode],
    prior: tuple[np.ndarray, np.ndarray],
    seed_keys: tuple[int, ...],
    workers: int = 1,
) -> RolloutBuffer:
    """Collect one episode per trajectory

    Parameters
    ----------
    surrogate : Surrogate
        Policy and critic; not modified

    episodes : list[Episode]
        The K episodes, sharing N, m and n

    prior : tuple[np.ndarray, np.ndarray]
        Mean and diagonal variance of the initial ensembles

    seed_keys : tuple[int, ...]
        Episode k uses the random stream keyed by (*seed_keys, k)

    workers : int
        Number of threads; the result does not depend on it

    Returns
    -------
    buffer : RolloutBuffer
        Transitions in episode order; episodes that fail numerically are
        logged and left out
    """
    shapes = {(ep.n_particles, ep.observer.state_dim, ep.observer.obs_dim) for ep in episodes}
    if len(shapes) > 1:
        raise DimensionError(f"Episodes do not share (N, m, n): {sorted(shapes)}")

    def _run(k: int) -> Optional[EpisodeRecord]:
        try:
            return run_episode(surrogate, episodes[k], prior, make_rng(*seed_keys, k), k)
        except (NumericError, FloatingPointError) as msg:
            _LOG.warning("Episode %d (trajectory %d) failed: %s", k, episodes[k].traj.id, msg)
            return None

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run, range(len(episodes))))
    else:
        results = [_run(k) for k in range(len(episodes))]
    records = [rec for rec in results if rec is not None]
    failed = [k for k, rec in enumerate(results) if rec is None]
    return RolloutBuffer.from_records(records, failed)
