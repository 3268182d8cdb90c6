"""Network architectures for the surrogate actor and the set critic.

A network object only carries its architecture (it is a `Handler`, so it
can be rebuilt from the descriptor stored in a checkpoint); the weights
live in a `ParamStore` created by `init_params`.  `forward` records the
computation on the caller's tape, so the same network can be evaluated
concurrently on different tapes and stores.
"""

from __future__ import annotations

from typing import Any

import numpy as np

from ..core import diffmath as dm
from ..core.diffmath import ParamStore, Tape, Tensor
from ..core.handler import Handler
from ..core.utils import Activation, ConfigurationError, DimensionError, get_kwarg_value

# Lorenz 96 architecture: conv (1 -> 48, k=5), bilinear (48 -> 32),
# conv (32 -> 17, k=5), conv (17 -> 1, k=1)
CONV1_CHANNELS = 48
CONV2_CHANNELS = 17
CONV_KERNEL = 5


class Network(Handler):
    """Base class for a differentiable map from [batch, in_dim] to [batch, out_dim]"""

    @property
    def in_dim(self) -> int:
        return int(get_kwarg_value("in_dim", **self.config))

    @property
    def out_dim(self) -> int:
        return int(get_kwarg_value("out_dim", **self.config))

    def init_params(self, rng: np.random.Generator, store: ParamStore | None = None) -> ParamStore:
        """Draw initial weights into store (a new one by default)"""
        raise NotImplementedError()

    def forward(self, tape: Tape, store: ParamStore, inputs: Tensor) -> Tensor:
        raise NotImplementedError()

    def check_input(self, inputs: Tensor) -> None:
        if len(inputs.shape) != 2 or inputs.shape[1] != self.in_dim:
            raise DimensionError(
                f"{self.get_handler_class_name()} expects input [batch, {self.in_dim}], got {inputs.shape}"
            )

    def __call__(self, store: ParamStore, inputs: np.ndarray) -> np.ndarray:
        """Forward-only evaluation on plain arrays"""
        tape = Tape(record=False)
        return self.forward(tape, store, tape.constant(inputs)).value


class Mlp(Network):
    """Fully connected network

    Configuration
    -------------
    in_dim, out_dim : int
        Input and output widths

    hidden : list[int]
        Width of each hidden layer

    activation : str
        Hidden activation, an `Activation` name

    out_activation : str
        Output activation, "identity" by default

    prefix : str
        Prefix of the parameter names, so several networks can share a store
    """

    default_config: dict[str, Any] = dict(hidden=[], activation="tanh", out_activation="identity", prefix="")

    def __init__(self, **kwargs: Any) -> None:
        Network.__init__(self, **kwargs)
        for key in ("in_dim", "out_dim"):
            if int(self.config.get(key, 0)) < 1:
                raise ConfigurationError(f"Mlp needs a positive {key}, got {self.config.get(key)}")
        self.activation = Activation[self.get_config_var("activation", "tanh")]
        self.out_activation = Activation[self.get_config_var("out_activation", "identity")]

    @property
    def widths(self) -> list[int]:
        return [self.in_dim] + [int(width) for width in self.config["hidden"]] + [self.out_dim]

    def param_name(self, kind: str, layer: int) -> str:
        return f"{self.config['prefix']}{kind}{layer}"

    def init_params(self, rng: np.random.Generator, store: ParamStore | None = None) -> ParamStore:
        store = ParamStore() if store is None else store
        widths = self.widths
        for layer, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            store.add(self.param_name("W", layer), dm.glorot_uniform(rng, (fan_in, fan_out), fan_in, fan_out))
            store.add(self.param_name("b", layer), np.zeros(fan_out))
        return store

    def forward(self, tape: Tape, store: ParamStore, inputs: Tensor) -> Tensor:
        self.check_input(inputs)
        n_layers = len(self.widths) - 1
        out = inputs
        for layer in range(n_layers):
            activation = self.out_activation if layer == n_layers - 1 else self.activation
            out = dm.dense_forward(
                out,
                tape.parameter(store, self.param_name("W", layer)),
                tape.parameter(store, self.param_name("b", layer)),
                activation,
            )
        return out


class ConvBilinearNet(Network):
    """Periodic convolutional network with a bilinear layer, for ring-shaped states

    The input [batch, L] is treated as one channel of length L.  Every layer
    is a periodic convolution, so the map commutes with cyclic shifts.

    Configuration
    -------------
    in_dim : int
        Ring length L; the output has the same size

    out_dim : int
        Defaults to in_dim, the only value accepted

    activation : str
        Activation after the second convolution
    """

    default_config: dict[str, Any] = dict(activation="tanh", prefix="")

    @property
    def out_dim(self) -> int:
        return int(self.config.get("out_dim", self.in_dim))

    def __init__(self, **kwargs: Any) -> None:
        Network.__init__(self, **kwargs)
        if self.out_dim != self.in_dim:
            raise ConfigurationError(f"ConvBilinearNet maps L to L, got {self.in_dim} -> {self.out_dim}")
        if self.in_dim < CONV_KERNEL:
            raise ConfigurationError(f"ConvBilinearNet needs L >= {CONV_KERNEL}, got {self.in_dim}")
        self.activation = Activation[self.get_config_var("activation", "tanh")]

    def _layers(self) -> list[tuple[str, int, int, int]]:
        return [
            ("conv1", 1, CONV1_CHANNELS, CONV_KERNEL),
            ("conv2", 2 * dm.BILINEAR_GROUP, CONV2_CHANNELS, CONV_KERNEL),
            ("conv3", CONV2_CHANNELS, 1, 1),
        ]

    def init_params(self, rng: np.random.Generator, store: ParamStore | None = None) -> ParamStore:
        store = ParamStore() if store is None else store
        prefix = self.config["prefix"]
        for name, n_in, n_out, size in self._layers():
            kernel = dm.glorot_uniform(rng, (n_out, n_in, size), n_in * size, n_out * size)
            store.add(f"{prefix}{name}.kernel", kernel)
            store.add(f"{prefix}{name}.bias", np.zeros(n_out))
        return store

    def forward(self, tape: Tape, store: ParamStore, inputs: Tensor) -> Tensor:
        self.check_input(inputs)
        prefix = self.config["prefix"]

        def _conv(x: Tensor, name: str, activation: Activation) -> Tensor:
            return dm.conv1d_periodic(
                x,
                tape.parameter(store, f"{prefix}{name}.kernel"),
                tape.parameter(store, f"{prefix}{name}.bias"),
                activation,
            )

        batch = inputs.shape[0]
        out = dm.reshape(inputs, (batch, 1, self.in_dim))
        out = dm.bilinear_split(_conv(out, "conv1", Activation.identity))
        out = _conv(out, "conv2", self.activation)
        out = _conv(out, "conv3", Activation.identity)
        return dm.reshape(out, (batch, self.in_dim))
