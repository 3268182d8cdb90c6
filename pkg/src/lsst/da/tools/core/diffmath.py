"""Minimal define-by-run reverse-mode differentiation on numpy arrays.

A `Tape` records every `Tensor` produced by the operations of this module,
in creation order, together with a closure that pushes the output gradient
back to the inputs.  Creation order is a topological order, so `backward`
simply walks the record in reverse.

Parameters live in a `ParamStore`; `Tape.parameter` hands out one leaf per
(store, name) per tape, and `backward` adds the leaf gradients into the
store's accumulators.  Accumulators are only reset by `ParamStore.zero_grad`.

All arithmetic is float64.  Only the broadcasting needed by the networks is
supported: equal shapes, or one operand whose shape is a trailing suffix of
the other's (a bias row, a per-component variance, a scalar).
"""

from __future__ import annotations

import math
from typing import Any, Callable, Iterator, Optional, Sequence

import numpy as np
from scipy.special import expit

from .utils import Activation, ConfigurationError, ContractError, DimensionError, DomainError, PoolMode

__all__ = [
    "BILINEAR_GROUP",
    "LOG_2PI",
    "ParamStore",
    "Tape",
    "Tensor",
    "activate",
    "add",
    "backward",
    "bilinear_split",
    "clip",
    "concat",
    "conv1d_periodic",
    "dense_forward",
    "exp",
    "gaussian_logpdf",
    "glorot_uniform",
    "matmul",
    "mean",
    "minimum",
    "mul",
    "neg",
    "pool",
    "reshape",
    "scale",
    "softplus",
    "softplus_values",
    "square",
    "sub",
    "sum_",
]

LOG_2PI = math.log(2.0 * math.pi)

# Channels per group in the bilinear layer: input has 3 groups, output 2
BILINEAR_GROUP = 16

BackwardFn = Callable[[np.ndarray], None]


class Tensor:
    """A value on a tape, with its gradient once `backward` has run

    Notes
    -----
    `shape` is the numpy shape of the value and `data` its row-major
    flattening.  Tensors are not mutated by the operations of this module,
    so a tensor may be used by several downstream operations.
    """

    __slots__ = ("value", "grad", "tape", "_parents", "_backward", "_source")

    def __init__(
        self,
        value: Any,
        tape: Tape,
        parents: Sequence[Tensor] = (),
        backward_fn: Optional[BackwardFn] = None,
    ) -> None:
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self._parents = tuple(parents)
        self._backward = backward_fn
        self._source: tuple[ParamStore, str] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        """Row-major flat view of the value"""
        return self.value.reshape(-1)

    def item(self) -> float:
        """Return the value of a single element tensor as a float"""
        if self.value.size != 1:
            raise ContractError(f"item() called on a tensor of shape {self.shape}")
        return float(self.value.reshape(-1)[0])

    def accumulate(self, grad: np.ndarray) -> None:
        """Add grad into this tensor's gradient"""
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True).reshape(self.shape)
        else:
            self.grad += grad

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class ParamStore:
    """Named parameter arrays with matching gradient accumulators

    Names are kept in insertion order; that order is the manifest order used
    by checkpoints, so a save/load round-trip preserves it.
    """

    def __init__(self) -> None:
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> None:
        """Register a new parameter"""
        if name in self._values:
            raise ConfigurationError(f"Parameter {name} already exists")
        array = np.array(value, dtype=np.float64, copy=True)
        self._values[name] = array
        self._grads[name] = np.zeros_like(array)

    def names(self) -> list[str]:
        return list(self._values.keys())

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __len__(self) -> int:
        return len(self._values)

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._values[name]
        except KeyError as msg:
            raise KeyError(f"Parameter {name} not in {self.names()}") from msg

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        current = self[name]
        array = np.asarray(value, dtype=np.float64)
        if array.shape != current.shape:
            raise DimensionError(f"Parameter {name} has shape {current.shape}, got {array.shape}")
        current[...] = array

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def zero_grad(self) -> None:
        for grad in self._grads.values():
            grad.fill(0.0)

    def n_values(self) -> int:
        """Total number of scalar parameters"""
        return int(sum(val.size for val in self._values.values()))

    def norm(self) -> float:
        """Global l2 norm of the parameter values"""
        return float(np.sqrt(sum(float(np.sum(val**2)) for val in self._values.values())))

    def grad_norm(self) -> float:
        """Global l2 norm of the accumulated gradients"""
        return float(np.sqrt(sum(float(np.sum(grad**2)) for grad in self._grads.values())))

    def copy(self) -> ParamStore:
        """Return a deep copy with zeroed gradients"""
        other = ParamStore()
        for name, value in self._values.items():
            other.add(name, value)
        return other

    def assign(self, other: ParamStore) -> None:
        """Copy all values from another store with the same manifest"""
        if other.names() != self.names():
            raise ConfigurationError(f"Manifest mismatch: {other.names()} vs {self.names()}")
        for name in self.names():
            self[name] = other[name]

    def manifest(self) -> list[dict[str, Any]]:
        return [dict(name=name, shape=list(value.shape)) for name, value in self._values.items()]


class Tape:
    """Record of one forward pass

    Parameters
    ----------
    record : bool
        If False, operations compute values but keep no graph; used for
        forward-only evaluations during rollouts.
    """

    def __init__(self, record: bool = True) -> None:
        self.record = record
        self.nodes: list[Tensor] = []
        self._leaves: dict[tuple[int, str], Tensor] = {}
        self._done = False

    def constant(self, value: Any) -> Tensor:
        """A leaf that does not need a gradient"""
        return Tensor(value, self)

    def parameter(self, store: ParamStore, name: str) -> Tensor:
        """The leaf for parameter `name` of `store` on this tape"""
        key = (id(store), name)
        leaf = self._leaves.get(key)
        if leaf is None:
            leaf = Tensor(store[name].copy(), self)
            leaf._source = (store, name)
            self._leaves[key] = leaf
            if self.record:
                self.nodes.append(leaf)
        return leaf

    def node(self, value: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
        """Create and record the output of an operation"""
        if not self.record:
            return Tensor(value, self)
        out = Tensor(value, self, parents, backward_fn)
        self.nodes.append(out)
        return out

    def backward(self, output: Tensor) -> None:
        """Accumulate d output / d parameter into the parameter stores"""
        if output.tape is not self:
            raise ContractError("Output tensor does not belong to this tape")
        if not self.record:
            raise ContractError("Cannot run backward on a tape that does not record")
        if output.value.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        if self._done:
            raise ContractError("backward already ran on this tape")
        self._done = True
        output.accumulate(np.ones_like(output.value))
        for node in reversed(self.nodes):
            if node.grad is None:
                continue
            if node._backward is not None:
                node._backward(node.grad)
            elif node._source is not None:
                store, name = node._source
                store.grad(name)[...] += node.grad


def backward(tape: Tape, output: Tensor) -> None:
    """Run reverse-mode differentiation of scalar `output` on `tape`"""
    tape.backward(output)


def _tape_of(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for tensor in tensors[1:]:
        if tensor.tape is not tape:
            raise ContractError("Operands were recorded on different tapes")
    return tape


def _check_suffix(a: Tensor, b: Tensor, opname: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb:
        return
    short, full = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if full[len(full) - len(short) :] != short:
        raise DimensionError(f"{opname}: operand shapes {sa} and {sb} are not compatible")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to `shape`"""
    if grad.shape == shape:
        return grad
    n_lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(n_lead))) if n_lead > 0 else grad


def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _check_suffix(a, b, "add")

    def _backward(g: np.ndarray) -> None:
        a.accumulate(_reduce_to(g, a.shape))
        b.accumulate(_reduce_to(g, b.shape))

    return tape.node(a.value + b.value, (a, b), _backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _check_suffix(a, b, "sub")

    def _backward(g: np.ndarray) -> None:
        a.accumulate(_reduce_to(g, a.shape))
        b.accumulate(-_reduce_to(g, b.shape))

    return tape.node(a.value - b.value, (a, b), _backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    _check_suffix(a, b, "mul")

    def _backward(g: np.ndarray) -> None:
        a.accumulate(_reduce_to(g * b.value, a.shape))
        b.accumulate(_reduce_to(g * a.value, b.shape))

    return tape.node(a.value * b.value, (a, b), _backward)


def scale(a: Tensor, factor: float) -> Tensor:
    def _backward(g: np.ndarray) -> None:
        a.accumulate(g * factor)

    return a.tape.node(a.value * factor, (a,), _backward)


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def square(a: Tensor) -> Tensor:
    def _backward(g: np.ndarray) -> None:
        a.accumulate(2.0 * g * a.value)

    return a.tape.node(a.value**2, (a,), _backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out_value = np.exp(a.value)

    def _backward(g: np.ndarray) -> None:
        a.accumulate(g * out_value)

    return a.tape.node(out_value, (a,), _backward)


def sum_(a: Tensor, axis: Optional[int] = None) -> Tensor:
    """Sum over one axis, or over everything if axis is None"""

    def _backward(g: np.ndarray) -> None:
        if axis is None:
            a.accumulate(np.broadcast_to(g, a.shape))
        else:
            a.accumulate(np.broadcast_to(np.expand_dims(g, axis), a.shape))

    return a.tape.node(np.sum(a.value, axis=axis), (a,), _backward)


def mean(a: Tensor, axis: Optional[int] = None) -> Tensor:
    count = a.value.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / count)


def pool(a: Tensor, axis: int, mode: PoolMode = PoolMode.sum) -> Tensor:
    """Order-independent sum or mean over one axis

    The values are sorted along the axis before they are added, so the
    result is bit-identical under any permutation of that axis.
    """
    count = a.shape[axis]
    factor = 1.0 if mode == PoolMode.sum else 1.0 / count
    out_value = np.sum(np.sort(a.value, axis=axis), axis=axis) * factor

    def _backward(g: np.ndarray) -> None:
        a.accumulate(np.broadcast_to(np.expand_dims(g * factor, axis), a.shape))

    return a.tape.node(out_value, (a,), _backward)


def concat(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Concatenate two tensors along one axis"""
    tape = _tape_of(a, b)
    axis = axis % a.value.ndim
    split = a.shape[axis]

    def _backward(g: np.ndarray) -> None:
        a.accumulate(np.take(g, np.arange(split), axis=axis))
        b.accumulate(np.take(g, np.arange(split, g.shape[axis]), axis=axis))

    return tape.node(np.concatenate([a.value, b.value], axis=axis), (a, b), _backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def _backward(g: np.ndarray) -> None:
        a.accumulate(g.reshape(a.shape))

    return a.tape.node(a.value.reshape(tuple(shape)), (a,), _backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise minimum; ties send the gradient to `a`"""
    tape = _tape_of(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"minimum: operand shapes {a.shape} and {b.shape} differ")
    take_a = a.value <= b.value

    def _backward(g: np.ndarray) -> None:
        a.accumulate(np.where(take_a, g, 0.0))
        b.accumulate(np.where(take_a, 0.0, g))

    return tape.node(np.where(take_a, a.value, b.value), (a, b), _backward)


def clip(a: Tensor, lower: Optional[float] = None, upper: Optional[float] = None) -> Tensor:
    """Clamp values; the gradient is zero where the clamp is active"""
    out_value = np.clip(a.value, lower, upper)
    inside = out_value == a.value

    def _backward(g: np.ndarray) -> None:
        a.accumulate(np.where(inside, g, 0.0))

    return a.tape.node(out_value, (a,), _backward)


def softplus_values(x: np.ndarray) -> np.ndarray:
    """Numerically stable log(1 + exp(x)) on plain arrays"""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x > 0.0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0.0))))


def _activation_values(x: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.identity:
        return x
    if activation == Activation.tanh:
        return np.tanh(x)
    if activation == Activation.relu:
        return np.maximum(x, 0.0)
    return softplus_values(x)


def _activation_grad(x: np.ndarray, y: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.identity:
        return np.ones_like(x)
    if activation == Activation.tanh:
        return 1.0 - y**2
    if activation == Activation.relu:
        return (x > 0.0).astype(np.float64)
    return expit(x)


def activate(a: Tensor, activation: Activation) -> Tensor:
    if activation == Activation.identity:
        return a
    out_value = _activation_values(a.value, activation)

    def _backward(g: np.ndarray) -> None:
        a.accumulate(g * _activation_grad(a.value, out_value, activation))

    return a.tape.node(out_value, (a,), _backward)


def softplus(x: Tensor) -> Tensor:
    """Elementwise log(1 + exp(x)), stable for large |x|"""
    return activate(x, Activation.softplus)


def matmul(a: Tensor, w: Tensor) -> Tensor:
    tape = _tape_of(a, w)
    if a.value.ndim != 2 or w.value.ndim != 2 or a.shape[1] != w.shape[0]:
        raise DimensionError(f"matmul: input {a.shape} does not match weights {w.shape}")

    def _backward(g: np.ndarray) -> None:
        a.accumulate(g @ w.value.T)
        w.accumulate(a.value.T @ g)

    return tape.node(a.value @ w.value, (a, w), _backward)


def dense_forward(x: Tensor, weights: Tensor, bias: Tensor, activation: Activation) -> Tensor:
    """Fully connected layer, activation(x W + b)

    Parameters
    ----------
    x : Tensor
        Input of shape [batch, d_in]

    weights : Tensor
        Weights of shape [d_in, d_out]

    bias : Tensor
        Bias of shape [d_out]

    activation : Activation
        Output non-linearity

    Returns
    -------
    out : Tensor
        Output of shape [batch, d_out]
    """
    if weights.value.ndim != 2:
        raise DimensionError(f"dense: weights must be 2-D, got {weights.shape}")
    if x.value.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise DimensionError(f"dense: input {x.shape} does not match weights {weights.shape}")
    if bias.shape != (weights.shape[1],):
        raise DimensionError(f"dense: bias {bias.shape} does not match weights {weights.shape}")
    return activate(add(matmul(x, weights), bias), activation)


def conv1d_periodic(
    x: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    activation: Activation = Activation.identity,
) -> Tensor:
    """1-D cross-correlation with circular padding

    Parameters
    ----------
    x : Tensor
        Input of shape [batch, channels_in, L]

    kernel : Tensor
        Kernel of shape [channels_out, channels_in, kernel_size],
        kernel_size odd and not larger than L

    bias : Tensor | None
        Optional bias of shape [channels_out]

    Returns
    -------
    out : Tensor
        Output of shape [batch, channels_out, L], where
        out[b, o, l] = sum_{c, j} kernel[o, c, j] x[b, c, (l + j - p) mod L]
        with p = (kernel_size - 1) / 2
    """
    tape = _tape_of(x, kernel)
    if kernel.value.ndim != 3:
        raise DimensionError(f"conv1d: kernel must be 3-D, got {kernel.shape}")
    n_out, n_in, size = kernel.shape
    if size % 2 == 0:
        raise ConfigurationError(f"conv1d: kernel size must be odd, got {size}")
    if x.value.ndim != 3 or x.shape[1] != n_in:
        raise DimensionError(f"conv1d: input {x.shape} does not match kernel {kernel.shape}")
    length = x.shape[2]
    if length < size:
        raise ConfigurationError(f"conv1d: input length {length} is shorter than kernel size {size}")
    if bias is not None and bias.shape != (n_out,):
        raise DimensionError(f"conv1d: bias {bias.shape} does not match kernel {kernel.shape}")
    pad = (size - 1) // 2
    # cols[:, :, j, l] = x[:, :, (l + j - pad) mod L]
    cols = np.stack([np.roll(x.value, pad - j, axis=-1) for j in range(size)], axis=2)
    out_value = np.einsum("bcjl,ocj->bol", cols, kernel.value)
    if bias is not None:
        out_value = out_value + bias.value[:, None]

    def _backward(g: np.ndarray) -> None:
        kernel.accumulate(np.einsum("bol,bcjl->ocj", g, cols))
        dcols = np.einsum("bol,ocj->bcjl", g, kernel.value)
        dx = np.zeros_like(x.value)
        for j in range(size):
            dx += np.roll(dcols[:, :, j, :], j - pad, axis=-1)
        x.accumulate(dx)
        if bias is not None:
            bias.accumulate(g.sum(axis=(0, 2)))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return activate(tape.node(out_value, parents, _backward), activation)


def bilinear_split(x: Tensor) -> Tensor:
    """Split 48 channels into groups (a, b, c) and return concat(a, b * c)

    Parameters
    ----------
    x : Tensor
        Input of shape [batch, 48, L]

    Returns
    -------
    out : Tensor
        Output of shape [batch, 32, L]
    """
    if x.value.ndim != 3 or x.shape[1] != 3 * BILINEAR_GROUP:
        raise ConfigurationError(f"bilinear: expected {3 * BILINEAR_GROUP} channels, got shape {x.shape}")
    grp = BILINEAR_GROUP
    a_val = x.value[:, :grp]
    b_val = x.value[:, grp : 2 * grp]
    c_val = x.value[:, 2 * grp :]

    def _backward(g: np.ndarray) -> None:
        dx = np.empty_like(x.value)
        dx[:, :grp] = g[:, :grp]
        dx[:, grp : 2 * grp] = g[:, grp:] * c_val
        dx[:, 2 * grp :] = g[:, grp:] * b_val
        x.accumulate(dx)

    return x.tape.node(np.concatenate([a_val, b_val * c_val], axis=1), (x,), _backward)


def gaussian_logpdf(x: Tensor, mean_: Tensor, var: Tensor) -> Tensor:
    """Log-density of a diagonal Gaussian, summed over the last axis

    Parameters
    ----------
    x : Tensor
        Points, shape [..., d]

    mean_ : Tensor
        Means, same shape as x

    var : Tensor
        Variances, shape [d] or the shape of x, all strictly positive

    Returns
    -------
    logp : Tensor
        -1/2 sum_j [log(2 pi var_j) + (x_j - mean_j)^2 / var_j], shape [...]
    """
    tape = _tape_of(x, mean_, var)
    if x.shape != mean_.shape:
        raise DimensionError(f"gaussian_logpdf: x {x.shape} and mean {mean_.shape} differ")
    if var.shape not in (x.shape, x.shape[-1:]):
        raise DimensionError(f"gaussian_logpdf: variance {var.shape} does not match x {x.shape}")
    if not np.all(var.value > 0.0):
        raise DomainError("gaussian_logpdf: variances must be strictly positive")
    diff = x.value - mean_.value
    inv_var = 1.0 / var.value
    out_value = -0.5 * np.sum(np.log(var.value) + LOG_2PI + diff**2 * inv_var, axis=-1)

    def _backward(g: np.ndarray) -> None:
        g_row = np.expand_dims(g, -1)
        dx = -g_row * diff * inv_var
        x.accumulate(dx)
        mean_.accumulate(-dx)
        dvar = -0.5 * g_row * (inv_var - diff**2 * inv_var**2)
        var.accumulate(_reduce_to(dvar, var.shape))

    return tape.node(out_value, (x, mean_, var), _backward)


def glorot_uniform(rng: np.random.Generator, shape: Sequence[int], fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform(-a, a) initial weights with a = sqrt(6 / (fan_in + fan_out))"""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=tuple(shape))
