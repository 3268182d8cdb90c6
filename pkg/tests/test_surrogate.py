import math

import numpy as np
import pytest
from scipy.stats import norm

from lsst.da.tools.core import diffmath as dm
from lsst.da.tools.core.config import ModelConfig
from lsst.da.tools.core.diffmath import ParamStore, Tape
from lsst.da.tools.core.handler import Handler
from lsst.da.tools.core.utils import ConfigurationError, ContractError, DimensionError, PoolMode, make_rng
from lsst.da.tools.rl.networks import ConvBilinearNet, Mlp
from lsst.da.tools.rl.surrogate import (
    BETA_NAME,
    MLP_CLASS,
    Actor,
    Critic,
    Surrogate,
    actor_logprob,
    actor_mean,
    actor_sample,
    build_surrogate,
    critic_value,
    obs_input,
)
from lsst.da.tools.ssm.systems import default_system_spec

SMALL_MODEL = ModelConfig(actor_layers=2, actor_units=8, critic_units=[6, 6, 8])


def max_grad_error(build, store: ParamStore, step: float = 1e-5) -> float:
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


def small_surrogate(name: str = "circular_motion", seed: int = 0, **kwargs) -> Surrogate:
    spec = default_system_spec(name)
    return build_surrogate(spec, kwargs.pop("model", SMALL_MODEL), make_rng(seed), **kwargs)


def test_actor_initialization() -> None:
    for seed in range(5):
        surrogate = build_surrogate(default_system_spec("circular_motion"), ModelConfig(), make_rng(seed))
        out = actor_mean(surrogate.actor, np.zeros(2))
        assert out.shape == (2,)
        assert np.all(np.isfinite(out))
        assert np.linalg.norm(out) < 10.0
        np.testing.assert_allclose(surrogate.actor.variance(), dm.softplus_values(np.full(2, -4.600166)))
        assert surrogate.actor.variance()[0] == pytest.approx(0.01, rel=1e-3)


def test_conv_actor_shift_equivariance() -> None:
    spec = default_system_spec("lorenz96")
    model = ModelConfig(architecture="conv_bilinear", critic_units=[6, 6, 8])
    surrogate = build_surrogate(spec, model, make_rng(3))
    assert isinstance(surrogate.actor.net, ConvBilinearNet)
    x = 8.0 + make_rng(4).normal(size=(3, 40))
    out = actor_mean(surrogate.actor, x)
    for shift in (1, 13):
        np.testing.assert_allclose(
            actor_mean(surrogate.actor, np.roll(x, shift, axis=1)), np.roll(out, shift, axis=1), atol=1e-10
        )
    with pytest.raises(ConfigurationError):
        Handler.get_handler("lsst.da.tools.rl.networks.ConvBilinearNet", in_dim=4)


def test_controlled_actor() -> None:
    spec = default_system_spec("allen_cahn_control")
    surrogate = build_surrogate(spec, SMALL_MODEL, make_rng(5), control=True)
    assert surrogate.control_dim == 40
    assert surrogate.actor.net.in_dim == 80
    assert surrogate.critic.obs_encoder.in_dim == 80
    x = make_rng(6).normal(size=40)
    first = actor_mean(surrogate.actor, x, np.zeros(40))
    second = actor_mean(surrogate.actor, x, np.full(40, 0.5))
    assert not np.array_equal(first, second)
    with pytest.raises(ContractError):
        actor_mean(surrogate.actor, x)

    with pytest.raises(ConfigurationError):
        build_surrogate(spec, SMALL_MODEL, make_rng(5), control=False)
    with pytest.raises(ConfigurationError):
        build_surrogate(default_system_spec("allen_cahn"), SMALL_MODEL, make_rng(5), control=True)


def test_actor_sampling() -> None:
    actor = small_surrogate().actor
    particles = make_rng(7).normal(size=(4, 2))

    actor.store[BETA_NAME] = np.full(2, -100.0)
    forecast, _ = actor_sample(actor, particles, None, make_rng(8))
    np.testing.assert_allclose(forecast, actor_mean(actor, particles), atol=1e-5)
    assert np.all(actor.variance() == 1e-12)

    actor.store[BETA_NAME] = np.array([-1.0, 0.5])
    var = dm.softplus_values(np.array([-1.0, 0.5]))
    many = np.zeros((100000, 2))
    forecast, logprob = actor_sample(actor, many, None, make_rng(9))
    center = actor_mean(actor, np.zeros(2))
    np.testing.assert_allclose(np.cov(forecast.T), np.diag(var), atol=0.03 * var.max())
    np.testing.assert_allclose(forecast.mean(axis=0), center, atol=0.02)

    expected = norm.logpdf(forecast[:10], loc=center, scale=np.sqrt(var)).sum(axis=1)
    np.testing.assert_allclose(logprob[:10], expected, atol=1e-10)


def test_actor_logprob() -> None:
    actor = small_surrogate(seed=1).actor
    rng = make_rng(10)
    particles = rng.normal(size=(6, 2))
    forecast, logprob = actor_sample(actor, particles, None, rng)
    assert actor_logprob(actor, particles, forecast) == pytest.approx(logprob.sum(), abs=1e-12)

    single = rng.normal(size=(1, 2))
    mode = actor_mean(actor, single)
    expected = -0.5 * np.sum(np.log(2.0 * math.pi * actor.variance()))
    assert actor_logprob(actor, single, mode) == pytest.approx(expected, abs=1e-12)

    with pytest.raises(DimensionError):
        actor.logprob_tensor(Tape(), particles[None], forecast[None, :3])


def test_actor_gradients() -> None:
    model = ModelConfig(actor_layers=2, actor_units=5, critic_units=[4, 4, 5])
    actor = build_surrogate(default_system_spec("circular_motion"), model, make_rng(11)).actor
    actor.store[BETA_NAME] = np.array([-0.5, 0.3])
    rng = make_rng(12)
    particles = rng.normal(size=(3, 4, 2))
    forecasts = particles + rng.normal(size=(3, 4, 2))
    weights = rng.normal(size=3)

    def build(tape: Tape) -> dm.Tensor:
        logprob = actor.logprob_tensor(tape, particles, forecasts)
        return dm.sum_(dm.mul(logprob, tape.constant(weights)))

    assert max_grad_error(build, actor.store) < 1e-4


def test_critic() -> None:
    critic = small_surrogate(seed=2).critic
    rng = make_rng(13)
    particles = rng.normal(size=(9, 2))
    y_next = rng.normal(size=2)
    value = critic_value(critic, particles, y_next)
    assert math.isfinite(value)

    for _ in range(5):
        shuffled = particles[rng.permutation(9)]
        assert critic_value(critic, shuffled, y_next) == pytest.approx(value, rel=1e-14, abs=1e-14)

    # the pooled embedding itself is exactly order-independent
    tape = Tape(record=False)
    embed = critic.encoder(critic.store, particles)
    pooled = dm.pool(tape.constant(embed[None]), axis=1).value
    reordered = dm.pool(tape.constant(embed[rng.permutation(9)][None]), axis=1).value
    assert np.array_equal(pooled, reordered)

    doubled = np.concatenate([particles, particles])
    assert critic_value(critic, doubled, y_next) != pytest.approx(value, abs=1e-12)

    mean_critic = small_surrogate(
        seed=2, model=ModelConfig(actor_layers=2, actor_units=8, critic_units=[6, 6, 8], critic_pool="mean")
    ).critic
    assert mean_critic.pool == PoolMode.mean
    assert critic_value(mean_critic, doubled, y_next) == pytest.approx(
        critic_value(mean_critic, particles, y_next), abs=1e-12
    )

    np.testing.assert_array_equal(obs_input(y_next), y_next)
    assert obs_input(y_next, np.ones(3)).shape == (5,)
    with pytest.raises(DimensionError):
        critic.values(particles[None], np.zeros((1, 3)))


def test_critic_gradients() -> None:
    model = ModelConfig(actor_layers=1, actor_units=3, critic_units=[4, 4, 5])
    critic = build_surrogate(default_system_spec("circular_motion"), model, make_rng(14)).critic
    rng = make_rng(15)
    particles = rng.normal(size=(3, 5, 2))
    obs_inputs = rng.normal(size=(3, 2))
    weights = rng.normal(size=3)

    def build(tape: Tape) -> dm.Tensor:
        values = critic.value_tensor(tape, particles, obs_inputs)
        return dm.sum_(dm.mul(values, tape.constant(weights)))

    assert max_grad_error(build, critic.store) < 1e-4


def test_surrogate_save_load(tmp_path) -> None:
    surrogate = small_surrogate(seed=3)
    path = str(tmp_path / "checkpoint.json")
    surrogate.save(path, iteration=7)
    loaded, meta = Surrogate.load(path)
    assert meta["iteration"] == 7
    for group, store in surrogate.stores().items():
        other = loaded.stores()[group]
        assert other.names() == store.names()
        for name in store:
            assert np.array_equal(other[name], store[name])
    x = make_rng(16).normal(size=(5, 2))
    assert np.array_equal(actor_mean(loaded.actor, x), actor_mean(surrogate.actor, x))

    copy = surrogate.copy()
    copy.actor.store[BETA_NAME] = np.zeros(2)
    assert surrogate.actor.store[BETA_NAME][0] == pytest.approx(-4.600166)

    with pytest.raises(ContractError):
        Surrogate.from_stores(surrogate.stores(), dict(actor=surrogate.meta()["actor"]))


def test_check_system() -> None:
    surrogate = small_surrogate()
    surrogate.check_system(default_system_spec("circular_motion"))
    with pytest.raises(DimensionError):
        surrogate.check_system(default_system_spec("circular_motion", "circle_polar"))
    with pytest.raises(DimensionError):
        surrogate.check_system(default_system_spec("lorenz63"))


def test_linear_actor() -> None:
    net = Handler.get_handler(MLP_CLASS, in_dim=2, out_dim=2, hidden=[])
    assert isinstance(net, Mlp)
    store = net.init_params(make_rng(17))
    matrix = np.array([[0.0, -1.0], [1.0, 0.0]])
    store["W0"] = matrix.T
    store.add(BETA_NAME, np.full(2, -3.0))
    actor = Actor(net, 2, 0, False, store)
    np.testing.assert_allclose(actor_mean(actor, np.array([1.0, 0.0])), [0.0, 1.0], atol=1e-15)

    residual = Actor(net, 2, 0, True, store)
    np.testing.assert_allclose(actor_mean(residual, np.array([1.0, 0.0])), [1.0, 1.0], atol=1e-15)

    with pytest.raises(ConfigurationError):
        Actor(net, 3, 0, False, store)
    with pytest.raises(ConfigurationError):
        Actor(net, 2, 0, False, net.init_params(make_rng(1)))

    encoder = Handler.get_handler(MLP_CLASS, in_dim=2, out_dim=3)
    head = Handler.get_handler(MLP_CLASS, in_dim=4, out_dim=1)
    with pytest.raises(ConfigurationError):
        Critic(encoder, encoder, head, PoolMode.sum, ParamStore())


if __name__ == "__main__":
    test_critic()
