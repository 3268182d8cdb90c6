import math
from typing import Callable

import numpy as np
import pytest

from lsst.da.tools.core import diffmath as dm
from lsst.da.tools.core.diffmath import ParamStore, Tape, Tensor
from lsst.da.tools.core.utils import (
    Activation,
    ConfigurationError,
    ContractError,
    DimensionError,
    DomainError,
    PoolMode,
    make_rng,
)

Builder = Callable[[Tape, ParamStore], Tensor]


def max_grad_error(build: Builder, store: ParamStore, step: float = 1e-5) -> float:
    """Largest relative difference between tape and central-difference gradients"""
    store.zero_grad()
    tape = Tape()
    tape.backward(build(tape, store))
    worst = 0.0
    for name in store:
        analytic = store.grad(name).copy()
        numeric = np.zeros_like(analytic)
        flat = store[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            plus = build(Tape(record=False), store).item()
            flat[i] = orig - step
            minus = build(Tape(record=False), store).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (plus - minus) / (2.0 * step)
        scale = max(float(np.max(np.abs(numeric))), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - numeric))) / scale)
    return worst


def project(tape: Tape, out: Tensor, weights: np.ndarray) -> Tensor:
    """Random scalar projection of a tensor"""
    return dm.sum_(dm.reshape(dm.mul(out, tape.constant(weights)), (out.value.size,)))


def test_dense_forward_values() -> None:
    tape = Tape()
    zero = dm.dense_forward(
        tape.constant(np.zeros((3, 4))),
        tape.constant(np.ones((4, 2))),
        tape.constant(np.zeros(2)),
        Activation.identity,
    )
    assert np.array_equal(zero.value, np.zeros((3, 2)))

    out = dm.dense_forward(
        tape.constant([[1.0]]), tape.constant([[2.0]]), tape.constant([3.0]), Activation.identity
    )
    assert out.value.tolist() == [[5.0]]

    with pytest.raises(DimensionError):
        dm.dense_forward(
            tape.constant(np.zeros((3, 4))),
            tape.constant(np.ones((5, 2))),
            tape.constant(np.zeros(2)),
            Activation.tanh,
        )
    with pytest.raises(DimensionError):
        dm.dense_forward(
            tape.constant(np.zeros((3, 4))),
            tape.constant(np.ones((4, 2))),
            tape.constant(np.zeros(3)),
            Activation.tanh,
        )


@pytest.mark.parametrize("activation", list(Activation))
def test_dense_gradients(activation: Activation) -> None:
    rng = make_rng(11, activation.value)
    for _ in range(10):
        store = ParamStore()
        store.add("W", rng.uniform(-2.0, 2.0, size=(3, 2)))
        store.add("b", rng.uniform(-2.0, 2.0, size=2))
        inputs = rng.uniform(-2.0, 2.0, size=(4, 3))
        if activation == Activation.relu:
            # keep the pre-activations away from the kink
            inputs = np.abs(inputs) + 0.1
            store["W"] = np.abs(store["W"]) + 0.1
            store["b"] = np.abs(store["b"])
        weights = rng.normal(size=(4, 2))

        def build(tape: Tape, store: ParamStore) -> Tensor:
            out = dm.dense_forward(
                tape.constant(inputs),
                tape.parameter(store, "W"),
                tape.parameter(store, "b"),
                activation,
            )
            return project(tape, out, weights)

        assert max_grad_error(build, store) < 1e-5


def test_softplus() -> None:
    assert dm.softplus_values(np.array([0.0]))[0] == pytest.approx(math.log(2.0), abs=1e-12)
    assert dm.softplus_values(np.array([50.0]))[0] == pytest.approx(50.0, abs=1e-12)
    assert np.all(np.isfinite(dm.softplus_values(np.array([-800.0, 800.0]))))
    assert np.all(dm.softplus_values(np.linspace(-30.0, 30.0, 61)) > 0.0)

    store = ParamStore()
    store.add("w", np.zeros(1))
    tape = Tape()
    tape.backward(dm.sum_(dm.softplus(tape.parameter(store, "w"))))
    assert store.grad("w")[0] == pytest.approx(0.5, abs=1e-12)


def test_backward() -> None:
    store = ParamStore()
    store.add("w", np.array([3.0]))
    tape = Tape()
    tape.backward(dm.sum_(dm.square(tape.parameter(store, "w"))))
    assert store.grad("w")[0] == 6.0

    # accumulators are only reset by zero_grad
    tape = Tape()
    tape.backward(dm.sum_(dm.square(tape.parameter(store, "w"))))
    assert store.grad("w")[0] == 12.0
    store.zero_grad()
    assert store.grad("w")[0] == 0.0

    tape = Tape()
    with pytest.raises(ContractError):
        tape.backward(dm.square(tape.constant([1.0, 2.0])))

    tape = Tape()
    scalar = dm.sum_(tape.parameter(store, "w"))
    tape.backward(scalar)
    with pytest.raises(ContractError):
        tape.backward(scalar)

    unrecorded = Tape(record=False)
    with pytest.raises(ContractError):
        unrecorded.backward(dm.sum_(unrecorded.parameter(store, "w")))


def test_conv1d_periodic_values() -> None:
    rng = make_rng(3)
    x = rng.normal(size=(2, 1, 7))
    tape = Tape()
    identity = np.array([[[0.0, 1.0, 0.0]]])
    out = dm.conv1d_periodic(tape.constant(x), tape.constant(identity))
    assert np.array_equal(out.value, x)

    const = np.full((1, 2, 6), 1.5)
    kernel = rng.normal(size=(3, 2, 5))
    out = dm.conv1d_periodic(tape.constant(const), tape.constant(kernel))
    expected = 1.5 * kernel.sum(axis=(1, 2))
    np.testing.assert_allclose(out.value, np.broadcast_to(expected[None, :, None], (1, 3, 6)), atol=1e-12)

    x = rng.normal(size=(1, 1, 5))
    kernel = rng.normal(size=(1, 1, 3))
    out = dm.conv1d_periodic(tape.constant(x), tape.constant(kernel))
    manual = kernel[0, 0, 0] * x[0, 0, 4] + kernel[0, 0, 1] * x[0, 0, 0] + kernel[0, 0, 2] * x[0, 0, 1]
    assert out.value[0, 0, 0] == pytest.approx(manual, abs=1e-14)

    with pytest.raises(ConfigurationError):
        dm.conv1d_periodic(tape.constant(x), tape.constant(np.ones((1, 1, 4))))
    with pytest.raises(ConfigurationError):
        dm.conv1d_periodic(tape.constant(np.ones((1, 1, 3))), tape.constant(np.ones((1, 1, 5))))
    with pytest.raises(DimensionError):
        dm.conv1d_periodic(tape.constant(x), tape.constant(np.ones((1, 2, 3))))


def test_conv1d_shift_equivariance() -> None:
    rng = make_rng(5)
    x = rng.normal(size=(3, 2, 11))
    kernel = rng.normal(size=(4, 2, 5))
    bias = rng.normal(size=4)
    tape = Tape(record=False)

    def conv(values: np.ndarray) -> np.ndarray:
        return dm.conv1d_periodic(
            tape.constant(values), tape.constant(kernel), tape.constant(bias), Activation.tanh
        ).value

    for shift in (1, 4, 10):
        np.testing.assert_allclose(
            conv(np.roll(x, shift, axis=-1)), np.roll(conv(x), shift, axis=-1), rtol=0.0, atol=1e-12
        )


def test_conv1d_gradients() -> None:
    rng = make_rng(7)
    for _ in range(10):
        store = ParamStore()
        store.add("x", rng.uniform(-2.0, 2.0, size=(2, 2, 6)))
        store.add("kernel", rng.uniform(-2.0, 2.0, size=(3, 2, 3)))
        store.add("bias", rng.uniform(-2.0, 2.0, size=3))
        weights = rng.normal(size=(2, 3, 6))

        def build(tape: Tape, store: ParamStore) -> Tensor:
            out = dm.conv1d_periodic(
                tape.parameter(store, "x"),
                tape.parameter(store, "kernel"),
                tape.parameter(store, "bias"),
                Activation.tanh,
            )
            return project(tape, out, weights)

        assert max_grad_error(build, store) < 1e-5


def test_bilinear_split() -> None:
    group = dm.BILINEAR_GROUP
    rng = make_rng(13)
    tape = Tape()
    x = rng.normal(size=(2, 3 * group, 5))
    x[:, group : 2 * group] = 0.0
    out = dm.bilinear_split(tape.constant(x))
    assert out.shape == (2, 2 * group, 5)
    assert np.array_equal(out.value[:, group:], np.zeros((2, group, 5)))
    assert np.array_equal(out.value[:, :group], x[:, :group])

    ones = dm.bilinear_split(tape.constant(np.ones((1, 3 * group, 4))))
    assert np.array_equal(ones.value, np.ones((1, 2 * group, 4)))

    with pytest.raises(ConfigurationError):
        dm.bilinear_split(tape.constant(np.ones((1, 3 * group - 1, 4))))

    for _ in range(5):
        store = ParamStore()
        store.add("x", rng.uniform(-2.0, 2.0, size=(1, 3 * group, 3)))
        weights = rng.normal(size=(1, 2 * group, 3))

        def build(tape: Tape, store: ParamStore) -> Tensor:
            return project(tape, dm.bilinear_split(tape.parameter(store, "x")), weights)

        assert max_grad_error(build, store) < 1e-5


def test_gaussian_logpdf() -> None:
    tape = Tape()
    zero = dm.gaussian_logpdf(tape.constant([0.0]), tape.constant([0.0]), tape.constant([1.0]))
    assert zero.item() == pytest.approx(-0.918938533204673, abs=1e-12)

    mode = dm.gaussian_logpdf(tape.constant([0.7]), tape.constant([0.7]), tape.constant([2.5]))
    assert mode.item() == pytest.approx(-0.5 * math.log(2.0 * math.pi * 2.5), abs=1e-12)

    rng = make_rng(17)
    for _ in range(20):
        x, mean_ = rng.normal(size=3), rng.normal(size=3)
        var = rng.uniform(0.1, 3.0, size=3)
        expected = 0.0
        for j in range(3):
            expected -= 0.5 * (math.log(2.0 * math.pi * var[j]) + (x[j] - mean_[j]) ** 2 / var[j])
        value = dm.gaussian_logpdf(tape.constant(x), tape.constant(mean_), tape.constant(var)).item()
        assert value == pytest.approx(expected, abs=1e-12)

    with pytest.raises(DomainError):
        dm.gaussian_logpdf(tape.constant([0.0, 1.0]), tape.constant([0.0, 1.0]), tape.constant([1.0, 0.0]))
    with pytest.raises(DimensionError):
        dm.gaussian_logpdf(tape.constant([0.0, 1.0]), tape.constant([0.0]), tape.constant([1.0]))


def test_gaussian_logpdf_gradients() -> None:
    rng = make_rng(19)
    for _ in range(10):
        store = ParamStore()
        store.add("x", rng.uniform(-2.0, 2.0, size=(4, 3)))
        store.add("mean", rng.uniform(-2.0, 2.0, size=(4, 3)))
        store.add("var", rng.uniform(0.5, 2.0, size=3))
        weights = rng.normal(size=4)

        def build(tape: Tape, store: ParamStore) -> Tensor:
            logp = dm.gaussian_logpdf(
                tape.parameter(store, "x"), tape.parameter(store, "mean"), tape.parameter(store, "var")
            )
            return project(tape, logp, weights)

        assert max_grad_error(build, store) < 1e-5


def test_elementwise_gradients() -> None:
    rng = make_rng(23)
    store = ParamStore()
    store.add("a", rng.uniform(-2.0, 2.0, size=(3, 4)))
    store.add("b", rng.uniform(-2.0, 2.0, size=(3, 4)))
    store.add("row", rng.uniform(-2.0, 2.0, size=4))
    weights = rng.normal(size=(3, 4))

    def build(tape: Tape, store: ParamStore) -> Tensor:
        a, b, row = (tape.parameter(store, name) for name in ("a", "b", "row"))
        out = dm.add(dm.mul(a, row), dm.sub(dm.exp(b), dm.scale(a, 0.3)))
        out = dm.add(out, dm.minimum(dm.square(a), dm.neg(b)))
        out = dm.concat(out, dm.clip(a, -1.0, 1.0), axis=0)
        pooled = dm.add(dm.pool(out, axis=0, mode=PoolMode.mean), dm.mean(out, axis=0))
        return dm.add(project(tape, out, np.vstack([weights, weights])), dm.sum_(pooled))

    assert max_grad_error(build, store) < 1e-4


def test_gradients_are_reproducible() -> None:
    def run() -> np.ndarray:
        rng = make_rng(29)
        store = ParamStore()
        store.add("W", rng.normal(size=(3, 5)))
        store.add("b", rng.normal(size=5))
        tape = Tape()
        out = dm.dense_forward(
            tape.constant(rng.normal(size=(7, 3))),
            tape.parameter(store, "W"),
            tape.parameter(store, "b"),
            Activation.tanh,
        )
        tape.backward(dm.sum_(dm.reshape(out, (35,))))
        return np.concatenate([store.grad("W").reshape(-1), store.grad("b")])

    assert np.array_equal(run(), run())


def test_param_store() -> None:
    store = ParamStore()
    store.add("z", np.zeros(2))
    store.add("a", np.ones((2, 3)))
    assert store.names() == ["z", "a"]
    assert store.n_values() == 8
    assert store.norm() == pytest.approx(math.sqrt(6.0))
    with pytest.raises(ConfigurationError):
        store.add("z", np.zeros(2))
    with pytest.raises(DimensionError):
        store["a"] = np.zeros(3)
    with pytest.raises(KeyError):
        store["missing"]

    other = store.copy()
    other["a"] = np.full((2, 3), 2.0)
    assert store["a"][0, 0] == 1.0
    store.assign(other)
    assert store["a"][0, 0] == 2.0

    wrong = ParamStore()
    wrong.add("a", np.ones((2, 3)))
    with pytest.raises(ConfigurationError):
        store.assign(wrong)


def test_tape_checks() -> None:
    tape, other = Tape(), Tape()
    with pytest.raises(ContractError):
        dm.add(tape.constant([1.0]), other.constant([1.0]))
    with pytest.raises(DimensionError):
        dm.add(tape.constant(np.ones((2, 3))), tape.constant(np.ones(2)))
    with pytest.raises(ContractError):
        tape.constant([1.0, 2.0]).item()
    unrecorded = Tape(record=False)
    dm.add(unrecorded.constant([1.0]), unrecorded.constant([2.0]))
    assert not unrecorded.nodes


if __name__ == "__main__":
    test_conv1d_gradients()
