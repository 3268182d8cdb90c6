import math

import numpy as np
import pandas as pd
import pytest

from lsst.da.tools.core import diffmath as dm
from lsst.da.tools.core.config import ModelConfig, TrainConfig
from lsst.da.tools.core.diffmath import Tape
from lsst.da.tools.core.utils import ContractError, TrainingAbortedError, make_rng
from lsst.da.tools.rl.ppo import (
    CHECKPOINT_FILE,
    INIT_STREAM,
    LOG_COLUMNS,
    actor_loss,
    compute_gae,
    critic_loss,
    normalize,
    plateaued,
    train,
)
from lsst.da.tools.rl.surrogate import BETA_NAME, Surrogate, build_surrogate
from lsst.da.tools.ssm.dataset import Trajectory, generate_dataset
from lsst.da.tools.ssm.systems import default_system_spec

SMALL_MODEL = ModelConfig(actor_layers=2, actor_units=8, critic_units=[6, 6, 8])


def small_config(**kwargs) -> TrainConfig:
    values = dict(iterations=2, epochs=2, minibatch=16, n_particles=10, plateau_window=0)
    values.update(kwargs)
    return TrainConfig(**values)


def small_dataset():
    return generate_dataset(default_system_spec("circular_motion"), 3, 8, 1, 5, seed=0)


def max_grad_error(build, store, step: float = 1e-5) -> float:
    """Largest relative difference between tape and central-difference gradients"""
    store.zero_grad()
    tape = Tape()
    tape.backward(build(tape))
    worst = 0.0
    for name in store:
        analytic = store.grad(name).copy()
        numeric = np.zeros_like(analytic)
        flat = store[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = build(Tape(record=False)).item()
            flat[i] = orig - step
            minus = build(Tape(record=False)).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * step)
        scale = max(float(np.max(np.abs(numeric))), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric))) / scale)
    return worst


def brute_force_gae(rewards: np.ndarray, values: np.ndarray, gamma: float, lam: float) -> np.ndarray:
    n_steps = len(rewards)
    next_values = np.append(values[1:], 0.0)
    deltas = rewards + gamma * next_values - values
    return np.array(
        [sum((gamma * lam) ** lag * deltas[t + lag] for lag in range(n_steps - t)) for t in range(n_steps)]
    )


def test_compute_gae() -> None:
    rng = make_rng(101)
    for gamma, lam in ((1.0, 0.9), (1.0, 0.0), (0.95, 0.9)):
        for _ in range(100):
            n_steps = int(rng.integers(1, 51))
            rewards, values = rng.normal(size=n_steps), rng.normal(size=n_steps)
            advantages, targets = compute_gae(rewards, values, gamma, lam)
            np.testing.assert_allclose(advantages, brute_force_gae(rewards, values, gamma, lam), atol=1e-12)
            np.testing.assert_allclose(targets, advantages + values, atol=1e-15)

    advantages, _ = compute_gae(np.array([2.5]), np.array([1.0]), 1.0, 0.9)
    assert advantages.tolist() == [1.5]

    rewards, values = np.array([1.0, 2.0, 3.0]), np.array([0.5, 0.1, -0.2])
    advantages, _ = compute_gae(rewards, values, 1.0, 0.0)
    np.testing.assert_allclose(advantages, [1.0 + 0.1 - 0.5, 2.0 - 0.2 - 0.1, 3.0 + 0.2], atol=1e-15)

    with pytest.raises(ContractError):
        compute_gae(np.zeros(3), np.zeros(2), 1.0, 0.9)


def test_normalize() -> None:
    out = normalize(np.array([1.0, 2.0, 3.0, 6.0]))
    assert out.mean() == pytest.approx(0.0, abs=1e-15)
    assert out.std() == pytest.approx(1.0)
    assert normalize(np.array([4.0])).tolist() == [4.0]
    assert normalize(np.full(3, 2.0)).tolist() == [0.0, 0.0, 0.0]


def actor_batch(seed: int = 0):
    surrogate = build_surrogate(default_system_spec("circular_motion"), SMALL_MODEL, make_rng(seed))
    actor = surrogate.actor
    rng = make_rng(seed, 1)
    particles = rng.normal(size=(5, 4, 2))
    forecasts = particles + 0.1 * rng.normal(size=(5, 4, 2))
    old = actor.logprob_tensor(Tape(record=False), particles, forecasts).value
    return actor, particles, forecasts, old, rng.normal(size=5)


def test_actor_loss_values() -> None:
    actor, particles, forecasts, old, advantages = actor_batch()
    loss = actor_loss(Tape(), actor, particles, forecasts, None, old, advantages, 0.2)
    assert loss.item() == pytest.approx(-advantages.mean(), abs=1e-12)

    # probability ratio 2 is clipped to 1 + eps
    loss = actor_loss(Tape(), actor, particles, forecasts, None, old - math.log(2.0), np.ones(5), 0.2)
    assert loss.item() == pytest.approx(-1.2, abs=1e-12)

    # without clipping the loss is -mean(ratio A)
    shift = np.linspace(-0.3, 0.3, 5)
    loss = actor_loss(Tape(), actor, particles, forecasts, None, old + shift, advantages, 1e6)
    assert loss.item() == pytest.approx(-np.mean(np.exp(-shift) * advantages), abs=1e-12)


def test_actor_loss_gradients() -> None:
    actor, particles, forecasts, old, advantages = actor_batch(seed=1)
    actor.store[BETA_NAME] = np.array([-1.0, -0.5])
    old = actor.logprob_tensor(Tape(record=False), particles, forecasts).value

    def build(tape: Tape) -> dm.Tensor:
        return actor_loss(tape, actor, particles, forecasts, None, old, advantages, 0.2)

    assert max_grad_error(build, actor.store) < 1e-4


def test_critic_loss() -> None:
    model = ModelConfig(actor_layers=1, actor_units=3, critic_units=[4, 4, 5])
    critic = build_surrogate(default_system_spec("circular_motion"), model, make_rng(3)).critic
    rng = make_rng(4)
    particles = rng.normal(size=(6, 3, 2))
    obs_inputs = rng.normal(size=(6, 2))
    values = critic.values(particles, obs_inputs)
    assert critic_loss(Tape(), critic, particles, obs_inputs, values).item() == pytest.approx(0.0, abs=1e-24)

    last = model.critic_layers
    critic.store[f"phi3.W{last}"] = np.zeros_like(critic.store[f"phi3.W{last}"])
    critic.store[f"phi3.b{last}"] = np.zeros(1)
    assert critic_loss(Tape(), critic, particles, obs_inputs, np.full(6, 1.5)).item() == pytest.approx(2.25)

    critic.store[f"phi3.W{last}"] = 0.3 * rng.normal(size=critic.store[f"phi3.W{last}"].shape)
    critic.store[f"phi3.b{last}"] = np.array([0.2])
    targets = rng.normal(size=6)

    def build(tape: Tape) -> dm.Tensor:
        return critic_loss(tape, critic, particles, obs_inputs, targets)

    assert max_grad_error(build, critic.store) < 1e-4


def test_plateaued() -> None:
    assert not plateaued([-10.0, -9.0], 2, 1e-3)
    assert plateaued([-10.0, -9.0, -9.0, -9.0], 2, 1e-3)
    assert not plateaued([-10.0, -9.0, -8.0, -7.0], 2, 1e-3)
    assert not plateaued([-math.inf, -9.0, -9.0], 2, 1e-3)
    assert not plateaued([-9.0] * 50, 0, 1e-3)


def test_train_without_iterations(tmp_path) -> None:
    dataset = small_dataset()
    config = small_config(iterations=0)
    path = str(tmp_path / CHECKPOINT_FILE)
    result = train(dataset.train, dataset.spec, config, SMALL_MODEL, checkpoint_path=path)
    assert result.iterations == 0
    assert result.best_return == -math.inf
    assert result.log.to_frame().empty
    assert list(result.log.to_frame().columns) == LOG_COLUMNS

    initial = build_surrogate(dataset.spec, SMALL_MODEL, make_rng(config.seed, INIT_STREAM))
    loaded, meta = Surrogate.load(path)
    assert meta["best_return"] is None
    assert meta["iteration"] == 0
    for group, store in initial.stores().items():
        for name in store:
            assert np.array_equal(loaded.stores()[group][name], store[name])

    with pytest.raises(ContractError):
        train([], dataset.spec, config, SMALL_MODEL)


def test_train_is_reproducible(tmp_path) -> None:
    dataset = small_dataset()
    config = small_config()
    first = train(dataset.train, dataset.spec, config, SMALL_MODEL)
    second = train(dataset.train, dataset.spec, config, SMALL_MODEL, workers=2)
    assert first.iterations == second.iterations == 2
    assert np.array_equal(first.log.mean_returns(), second.log.mean_returns())
    for group, store in first.surrogate.stores().items():
        for name in store:
            assert np.array_equal(second.surrogate.stores()[group][name], store[name])
    assert first.best_return == max(first.log.mean_returns())

    frame = first.log.to_frame()
    assert frame["iteration"].tolist() == [0, 1]
    path = str(tmp_path / "train_log.csv")
    first.log.write_csv(path)
    assert list(pd.read_csv(path).columns) == LOG_COLUMNS
    assert first.meta()["iterations"] == 2


def test_train_with_pf_backend() -> None:
    dataset = small_dataset()
    result = train(dataset.train, dataset.spec, small_config(backend="pf", n_episodes=2), SMALL_MODEL)
    assert result.iterations == 2
    assert np.all(np.isfinite(result.log.mean_returns()))


def test_train_stops_on_plateau() -> None:
    dataset = small_dataset()
    config = small_config(iterations=30, epochs=1, lr_actor=0.0, lr_critic=0.0, plateau_window=3)
    result = train(dataset.train, dataset.spec, config, SMALL_MODEL)
    assert result.stopped_early
    assert result.iterations < 30


def test_train_aborts_after_second_failure(caplog) -> None:
    dataset = small_dataset()
    broken = []
    for traj in dataset.train:
        y = traj.y.copy()
        y[0, 0] = np.nan
        broken.append(Trajectory(traj.id, y))
    with pytest.raises(TrainingAbortedError):
        train(broken, dataset.spec, small_config(), SMALL_MODEL)
    assert "restored parameters" in caplog.text


@pytest.mark.slow
def test_training_improves_returns() -> None:
    spec = default_system_spec("circular_motion")
    dataset = generate_dataset(spec, 20, 400, 1, 10, seed=0)
    config = TrainConfig(iterations=10, plateau_window=0)
    result = train(dataset.train, dataset.spec, config, ModelConfig(), workers=4)
    returns = result.log.mean_returns()
    assert returns[-1] > returns[0]
    assert np.sum(np.diff(returns) < 0.0) <= 2


if __name__ == "__main__":
    test_compute_gae()
