"""Proximal policy optimization of the surrogate.

Every iteration plays one filtering episode per training trajectory with
the current actor, computes generalized advantages from the critic values,
and then runs several epochs of minibatch updates of the clipped actor loss
and the critic regression loss.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np
import pandas as pd
from lsst.utils.logging import getLogger
from lsst.utils.timer import time_this

from ..core import diffmath as dm
from ..core.config import ModelConfig, TrainConfig
from ..core.diffmath import Tape, Tensor
from ..core.optim import Adam, clip_grad_norm
from ..core.utils import ContractError, NumericError, TrainingAbortedError, make_rng
from ..ssm.dataset import Trajectory
from ..ssm.systems import BenchmarkSystem, SystemSpec
from .mdpenv import Episode, RolloutBuffer, rollout
from .surrogate import Actor, Critic, Surrogate, build_surrogate

_LOG = getLogger(__name__)

LOG_COLUMNS = ["iteration", "mean_return", "actor_loss", "critic_loss", "grad_norm", "wall_ms"]
CHECKPOINT_FILE = "checkpoint.json"
LOG_FILE = "train_log.csv"

# Keys of the random streams used by training
INIT_STREAM = 0
ROLLOUT_STREAM = 1
SHUFFLE_STREAM = 2


def compute_gae(
    rewards: np.ndarray,
    values: np.ndarray,
    gamma: float,
    lam: float,
    last_value: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates of one episode

    Parameters
    ----------
    rewards, values : np.ndarray
        r_t and V(s_t) for t = 0 .. T-1

    gamma, lam : float
        Discount and GAE weight

    last_value : float
        V(s_T), 0 for a terminal state

    Returns
    -------
    advantages : np.ndarray
        A_t = delta_t + gamma lam A_{t+1}, delta_t = r_t + gamma V(s_{t+1}) - V(s_t)

    targets : np.ndarray
        A_t + V(s_t)
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if rewards.shape != values.shape or rewards.ndim != 1:
        raise ContractError(
            f"compute_gae needs matching 1-D sequences, got {rewards.shape} and {values.shape}"
        )
    advantages = np.empty_like(rewards)
    next_value = last_value
    running = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        running = delta + gamma * lam * running
        advantages[t] = running
        next_value = values[t]
    return advantages, advantages + values


def compute_buffer_gae(buffer: RolloutBuffer, gamma: float, lam: float) -> None:
    """Fill the advantages and value targets of a buffer, episode by episode"""
    advantages = np.empty(len(buffer))
    targets = np.empty(len(buffer))
    for slc in buffer.episode_slices():
        advantages[slc], targets[slc] = compute_gae(buffer.rewards[slc], buffer.values[slc], gamma, lam)
    buffer.advantages = advantages
    buffer.targets = targets


def normalize(advantages: np.ndarray) -> np.ndarray:
    """Shift to mean 0 and scale to std 1, if there is any spread"""
    if advantages.size < 2:
        return advantages
    std = advantages.std()
    centered = advantages - advantages.mean()
    return centered / std if std > 0.0 else centered


def actor_loss(
    tape: Tape,
    actor: Actor,
    particles: np.ndarray,
    forecasts: np.ndarray,
    controls: Optional[np.ndarray],
    old_logprobs: np.ndarray,
    advantages: np.ndarray,
    clip_eps: float,
) -> Tensor:
    """Clipped surrogate loss of a minibatch

    Returns
    -------
    loss : Tensor
        -mean_t min(p_t A_t, clip(p_t, 1 - eps, 1 + eps) A_t), with the
        ratio p_t = exp(log pi_theta(a_t | s_t) - old_logprobs_t)
    """
    logprob = actor.logprob_tensor(tape, particles, forecasts, controls)
    log_ratio = dm.sub(logprob, tape.constant(old_logprobs))
    ratio = dm.exp(log_ratio)
    bad = np.flatnonzero(~np.isfinite(ratio.value))
    if bad.size:
        raise NumericError(
            f"Non-finite probability ratio for transition {int(bad[0])} of the minibatch "
            f"(log ratio {log_ratio.value[bad[0]]})"
        )
    adv = tape.constant(advantages)
    unclipped = dm.mul(ratio, adv)
    clipped = dm.mul(dm.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv)
    return dm.neg(dm.mean(dm.minimum(unclipped, clipped)))


def critic_loss(
    tape: Tape,
    critic: Critic,
    particles: np.ndarray,
    obs_inputs: np.ndarray,
    targets: np.ndarray,
) -> Tensor:
    """Mean squared error between the value targets and the critic"""
    values = critic.value_tensor(tape, particles, obs_inputs)
    return dm.mean(dm.square(dm.sub(values, tape.constant(targets))))


@dataclass
class TrainingLog:
    rows: list[dict[str, float]] = field(default_factory=list)

    def append(self, **row: float) -> None:
        self.rows.append(row)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=LOG_COLUMNS)

    def write_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False)

    def mean_returns(self) -> np.ndarray:
        return np.array([row["mean_return"] for row in self.rows])


@dataclass
class TrainResult:
    """Best surrogate found, with the training history"""

    surrogate: Surrogate
    log: TrainingLog
    best_return: float
    iterations: int
    stopped_early: bool = False

    def meta(self) -> dict[str, Any]:
        return dict(
            best_return=self.best_return,
            iterations=self.iterations,
            stopped_early=self.stopped_early,
        )


class _Updater:
    """Minibatch optimization of one iteration's buffer"""

    def __init__(self, surrogate: Surrogate, config: TrainConfig) -> None:
        self.surrogate = surrogate
        self.config = config
        self.actor_opt = Adam(surrogate.actor.store, config.lr_actor)
        self.critic_opt = Adam(surrogate.critic.store, config.lr_critic)

    def halve_learning_rates(self) -> None:
        for opt in (self.actor_opt, self.critic_opt):
            opt.lr *= 0.5
            opt.reset()

    def run(self, buffer: RolloutBuffer, rng: np.random.Generator) -> dict[str, float]:
        config = self.config
        actor, critic = self.surrogate.actor, self.surrogate.critic
        assert buffer.advantages is not None and buffer.targets is not None
        actor_losses, critic_losses, grad_norms = [], [], []
        for _ in range(config.epochs):
            order = rng.permutation(len(buffer))
            for start in range(0, len(buffer), config.minibatch):
                idx = order[start : start + config.minibatch]
                advantages = buffer.advantages[idx]
                if config.normalize_advantages:
                    advantages = normalize(advantages)
                controls = None if buffer.controls is None else buffer.controls[idx]

                actor.store.zero_grad()
                tape = Tape()
                loss = actor_loss(
                    tape,
                    actor,
                    buffer.particles[idx],
                    buffer.forecasts[idx],
                    controls,
                    buffer.logprobs[idx],
                    advantages,
                    config.clip_eps,
                )
                _check_loss(loss, "actor")
                tape.backward(loss)
                grad_norms.append(clip_grad_norm(actor.store, config.max_grad_norm))
                self.actor_opt.step()
                actor_losses.append(loss.item())

                critic.store.zero_grad()
                tape = Tape()
                loss = critic_loss(
                    tape, critic, buffer.particles[idx], buffer.obs_inputs[idx], buffer.targets[idx]
                )
                _check_loss(loss, "critic")
                tape.backward(loss)
                clip_grad_norm(critic.store, config.max_grad_norm)
                self.critic_opt.step()
                critic_losses.append(loss.item())
        return dict(
            actor_loss=float(np.mean(actor_losses)),
            critic_loss=float(np.mean(critic_losses)),
            grad_norm=float(np.mean(grad_norms)),
        )


def _check_loss(loss: Tensor, what: str) -> None:
    if not math.isfinite(loss.item()):
        raise NumericError(f"Non-finite {what} loss {loss.item()}")


def make_episodes(
    trajectories: list[Trajectory],
    system: BenchmarkSystem,
    config: TrainConfig,
) -> list[Episode]:
    """One training episode per trajectory, all with the configured backend"""
    count = len(trajectories) if config.n_episodes is None else min(config.n_episodes, len(trajectories))
    return [
        Episode(traj, config.filter_method, config.n_particles, system.observer, system.obs_var)
        for traj in trajectories[:count]
    ]


def plateaued(best_returns: list[float], window: int, tol: float) -> bool:
    """True if the best return improved by less than tol (relative) over the last window iterations"""
    if window < 1 or len(best_returns) <= window:
        return False
    old, new = best_returns[-window - 1], best_returns[-1]
    if not math.isfinite(old):
        return False
    return new - old < tol * abs(old)


def train(
    trajectories: list[Trajectory],
    spec: SystemSpec,
    config: TrainConfig,
    model: ModelConfig,
    surrogate: Optional[Surrogate] = None,
    workers: int = 1,
    checkpoint_path: Optional[str] = None,
) -> TrainResult:
    """Learn a surrogate from observation sequences

    Parameters
    ----------
    trajectories : list[Trajectory]
        Training observations; states are not used

    spec : SystemSpec
        Supplies the observation operator, R, the dimensions and the
        default initial ensemble

    config : TrainConfig
        PPO settings

    model : ModelConfig
        Architecture of a new surrogate

    surrogate : Surrogate | None
        Starting point; a new one is built from `model` if None

    workers : int
        Threads used to collect episodes

    checkpoint_path : str | None
        If given, the best surrogate is written there on every improvement
        and at exit

    Returns
    -------
    result : TrainResult
        The surrogate with the best mean episode return, and the log

    Raises
    ------
    TrainingAbortedError
        A second numerical failure after the learning rates were halved
    """
    if not trajectories:
        raise ContractError("Training needs at least one trajectory")
    system = BenchmarkSystem.from_spec(spec)
    prior = system.prior()
    episodes = make_episodes(trajectories, system, config)
    if surrogate is None:
        surrogate = build_surrogate(spec, model, make_rng(config.seed, INIT_STREAM), config.control)
    surrogate.check_system(spec)
    updater = _Updater(surrogate, config)
    log = TrainingLog()
    best = surrogate.copy()
    best_return = -math.inf
    best_history: list[float] = []
    recoveries = 0
    stopped_early = False
    n_done = 0

    def _save() -> None:
        if checkpoint_path is not None:
            best.save(
                checkpoint_path,
                system=spec.to_dict(),
                best_return=best_return if math.isfinite(best_return) else None,
                iteration=n_done,
            )

    for iteration in range(config.iterations):
        start = time.perf_counter()
        snapshot = surrogate.copy()
        try:
            with time_this(log=_LOG, msg=f"Rollout {iteration}", level=logging.DEBUG):
                seed_keys = (config.seed, ROLLOUT_STREAM, iteration)
                buffer = rollout(surrogate, episodes, prior, seed_keys, workers)
            compute_buffer_gae(buffer, config.gamma, config.lam)
            digest = buffer.logprob_digest()
            with time_this(log=_LOG, msg=f"Update {iteration}", level=logging.DEBUG):
                stats = updater.run(buffer, make_rng(config.seed, SHUFFLE_STREAM, iteration))
            if buffer.logprob_digest() != digest:
                raise ContractError("Behavior log-probabilities changed during the update")
        except NumericError as msg:
            surrogate.actor.store.assign(snapshot.actor.store)
            surrogate.critic.store.assign(snapshot.critic.store)
            if recoveries:
                raise TrainingAbortedError(
                    f"Training failed again at iteration {iteration} after halving the learning rates: {msg}"
                ) from msg
            recoveries += 1
            updater.halve_learning_rates()
            _LOG.warning(
                "Iteration %d failed (%s); restored parameters, learning rates now %.3g / %.3g",
                iteration,
                msg,
                updater.actor_opt.lr,
                updater.critic_opt.lr,
            )
            continue
        n_done = iteration + 1
        mean_return = float(buffer.episode_returns().mean())
        wall_ms = 1000.0 * (time.perf_counter() - start)
        log.append(iteration=iteration, mean_return=mean_return, wall_ms=wall_ms, **stats)
        _LOG.info(
            "Iteration %d: mean return %.4f, actor loss %.4g, critic loss %.4g, |theta| %.4g, |phi| %.4g",
            iteration,
            mean_return,
            stats["actor_loss"],
            stats["critic_loss"],
            surrogate.actor.store.norm(),
            surrogate.critic.store.norm(),
        )
        if mean_return > best_return:
            # the return was earned by the parameters before this update
            best_return, best = mean_return, snapshot
            _save()
        best_history.append(best_return)
        if plateaued(best_history, config.plateau_window, config.plateau_tol):
            _LOG.info("Mean return plateaued after %d iterations", n_done)
            stopped_early = True
            break
    _save()
    return TrainResult(best, log, best_return, n_done, stopped_early)
