"""The learnable surrogate: a stochastic transition (the actor) and a set critic.

The actor is x' = F(x [, c]) + xi, xi ~ N(0, diag(softplus(beta))), with F
a network (or x + network in residual mode).  The critic values a filter
state (particles, next observation [, control]) as
head(pool_i encoder(x_i) + obs_encoder(y [, c])), with sum pooling by default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Optional

import numpy as np

from ..core import diffmath as dm
from ..core.checkpoint import read_checkpoint, write_checkpoint
from ..core.config import ModelConfig
from ..core.diffmath import ParamStore, Tape, Tensor
from ..core.handler import Handler
from ..core.utils import ConfigurationError, ContractError, DimensionError, PoolMode
from ..filters.runner import FilterModel
from ..ssm.observation import Observer
from ..ssm.systems import SystemSpec
from .networks import Network

VAR_FLOOR = 1e-12
BETA_NAME = "beta"

MLP_CLASS = "lsst.da.tools.rl.networks.Mlp"
CONV_CLASS = "lsst.da.tools.rl.networks.ConvBilinearNet"


def _as_batch(particles: np.ndarray) -> np.ndarray:
    particles = np.asarray(particles, dtype=np.float64)
    return particles[None, :] if particles.ndim == 1 else particles


class Actor:
    """Stochastic surrogate transition

    Parameters
    ----------
    net : Network
        The mean map, from [batch, m + dc] to [batch, m]

    state_dim : int
        State dimension m

    control_dim : int
        Control dimension dc, 0 for autonomous models

    residual : bool
        If True the mean is x + net(x [, c])

    store : ParamStore
        Network weights plus the noise parameters `beta` [m]
    """

    def __init__(
        self,
        net: Network,
        state_dim: int,
        control_dim: int,
        residual: bool,
        store: ParamStore,
    ) -> None:
        if net.in_dim != state_dim + control_dim or net.out_dim != state_dim:
            raise ConfigurationError(
                f"Actor network maps {net.in_dim} -> {net.out_dim}, "
                f"needs {state_dim + control_dim} -> {state_dim}"
            )
        if BETA_NAME not in store or store[BETA_NAME].shape != (state_dim,):
            raise ConfigurationError(f"Actor parameters need '{BETA_NAME}' of shape ({state_dim},)")
        self.net = net
        self.state_dim = state_dim
        self.control_dim = control_dim
        self.residual = residual
        self.store = store

    @classmethod
    def create(
        cls,
        net: Network,
        state_dim: int,
        control_dim: int,
        residual: bool,
        rng: np.random.Generator,
        beta_init: float,
    ) -> Actor:
        """Build an actor with freshly initialized weights"""
        store = net.init_params(rng)
        store.add(BETA_NAME, np.full(state_dim, beta_init))
        return cls(net, state_dim, control_dim, residual, store)

    def _inputs(self, particles: np.ndarray, control: Optional[np.ndarray]) -> np.ndarray:
        if particles.shape[-1] != self.state_dim:
            raise DimensionError(f"Actor expects states of size {self.state_dim}, got {particles.shape}")
        if self.control_dim == 0:
            return particles
        if control is None:
            raise ContractError("This actor takes a control input, none was given")
        control = np.asarray(control, dtype=np.float64)
        if control.shape[-1] != self.control_dim:
            raise DimensionError(f"Actor expects controls of size {self.control_dim}, got {control.shape}")
        control = np.broadcast_to(control, particles.shape[:-1] + (self.control_dim,))
        return np.concatenate([particles, control], axis=-1)

    def mean_tensor(self, tape: Tape, particles: np.ndarray, control: Optional[np.ndarray] = None) -> Tensor:
        """F(x [, c]) for particles [B, m] and a control [dc] or [B, dc]"""
        inputs = tape.constant(self._inputs(particles, control))
        out = self.net.forward(tape, self.store, inputs)
        if self.residual:
            out = dm.add(tape.constant(particles), out)
        return out

    def variance_tensor(self, tape: Tape) -> Tensor:
        return dm.clip(dm.softplus(tape.parameter(self.store, BETA_NAME)), lower=VAR_FLOOR)

    def variance(self) -> np.ndarray:
        """Diagonal of Q_beta"""
        return np.maximum(dm.softplus_values(self.store[BETA_NAME]), VAR_FLOOR)

    def mean(self, particles: np.ndarray, control: Optional[np.ndarray] = None) -> np.ndarray:
        batch = _as_batch(particles)
        out = self.mean_tensor(Tape(record=False), batch, control).value
        return out if np.ndim(particles) == 2 else out[0]

    def sample(
        self,
        particles: np.ndarray,
        control: Optional[np.ndarray],
        rng: np.random.Generator,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Draw one forecast per particle

        Returns
        -------
        forecast : np.ndarray
            x_hat_i = F(x_i) + xi_i, shape [N, m]

        logprob : np.ndarray
            log N(x_hat_i; F(x_i), Q_beta), shape [N]
        """
        particles = _as_batch(particles)
        tape = Tape(record=False)
        mean_ = self.mean_tensor(tape, particles, control)
        var = self.variance_tensor(tape)
        forecast = mean_.value + rng.normal(size=mean_.shape) * np.sqrt(var.value)
        logprob = dm.gaussian_logpdf(tape.constant(forecast), mean_, var).value
        return forecast, logprob

    def logprob_tensor(
        self,
        tape: Tape,
        particles: np.ndarray,
        forecasts: np.ndarray,
        controls: Optional[np.ndarray] = None,
    ) -> Tensor:
        """Summed log-probabilities of a batch of actions

        Parameters
        ----------
        particles, forecasts : np.ndarray
            States and forecasts, shape [B, N, m]

        controls : np.ndarray | None
            One control per action, shape [B, dc]

        Returns
        -------
        logprob : Tensor
            sum_i log N(x_hat_i; F(x_i), Q_beta) for every action, shape [B]
        """
        particles = np.asarray(particles, dtype=np.float64)
        forecasts = np.asarray(forecasts, dtype=np.float64)
        if particles.ndim != 3 or particles.shape != forecasts.shape:
            raise DimensionError(
                f"Expected matching [B, N, m] arrays, got {particles.shape}, {forecasts.shape}"
            )
        n_batch, n_particles, _ = particles.shape
        flat = particles.reshape(n_batch * n_particles, self.state_dim)
        flat_controls = None
        if controls is not None:
            flat_controls = np.repeat(np.asarray(controls, dtype=np.float64), n_particles, axis=0)
        mean_ = self.mean_tensor(tape, flat, flat_controls)
        per_particle = dm.gaussian_logpdf(
            tape.constant(forecasts.reshape(n_batch * n_particles, self.state_dim)),
            mean_,
            self.variance_tensor(tape),
        )
        return dm.sum_(dm.reshape(per_particle, (n_batch, n_particles)), axis=1)

    def descriptor(self) -> dict[str, Any]:
        return dict(
            net=self.net.descriptor(),
            state_dim=self.state_dim,
            control_dim=self.control_dim,
            residual=self.residual,
        )


class Critic:
    """Permutation-invariant value of a filter state

    Parameters
    ----------
    encoder : Network
        Particle encoder, [batch, m] -> [batch, E]

    obs_encoder : Network
        Observation (and control) encoder, [batch, n + dc] -> [batch, E]

    head : Network
        [batch, E] -> [batch, 1]

    pool : PoolMode
        How the particle embeddings are aggregated

    store : ParamStore
        Weights of all three networks
    """

    def __init__(
        self,
        encoder: Network,
        obs_encoder: Network,
        head: Network,
        pool: PoolMode,
        store: ParamStore,
    ) -> None:
        if encoder.out_dim != obs_encoder.out_dim or head.in_dim != encoder.out_dim or head.out_dim != 1:
            raise ConfigurationError(
                f"Critic widths do not chain: encoders -> {encoder.out_dim}, {obs_encoder.out_dim}; "
                f"head {head.in_dim} -> {head.out_dim}"
            )
        self.encoder = encoder
        self.obs_encoder = obs_encoder
        self.head = head
        self.pool = pool
        self.store = store

    @classmethod
    def create(
        cls,
        encoder: Network,
        obs_encoder: Network,
        head: Network,
        pool: PoolMode,
        rng: np.random.Generator,
    ) -> Critic:
        store = ParamStore()
        for net in (encoder, obs_encoder, head):
            net.init_params(rng, store)
        return cls(encoder, obs_encoder, head, pool, store)

    def value_tensor(self, tape: Tape, particles: np.ndarray, obs_inputs: np.ndarray) -> Tensor:
        """Values of a batch of states

        Parameters
        ----------
        particles : np.ndarray
            Ensembles, shape [B, N, m]

        obs_inputs : np.ndarray
            Next observations, with the control appended when there is one,
            shape [B, n + dc]

        Returns
        -------
        values : Tensor
            Shape [B]
        """
        particles = np.asarray(particles, dtype=np.float64)
        obs_inputs = np.asarray(obs_inputs, dtype=np.float64)
        if particles.ndim != 3 or obs_inputs.ndim != 2 or obs_inputs.shape[0] != particles.shape[0]:
            raise DimensionError(f"Critic inputs {particles.shape} and {obs_inputs.shape} do not match")
        if particles.shape[2] != self.encoder.in_dim or obs_inputs.shape[1] != self.obs_encoder.in_dim:
            raise DimensionError(
                f"Critic expects particles [B, N, {self.encoder.in_dim}] and observations "
                f"[B, {self.obs_encoder.in_dim}], got {particles.shape} and {obs_inputs.shape}"
            )
        n_batch, n_particles, state_dim = particles.shape
        flat = tape.constant(particles.reshape(n_batch * n_particles, state_dim))
        embed = self.encoder.forward(tape, self.store, flat)
        embed = dm.reshape(embed, (n_batch, n_particles, self.encoder.out_dim))
        pooled = dm.pool(embed, axis=1, mode=self.pool)
        summary = dm.add(pooled, self.obs_encoder.forward(tape, self.store, tape.constant(obs_inputs)))
        return dm.reshape(self.head.forward(tape, self.store, summary), (n_batch,))

    def values(self, particles: np.ndarray, obs_inputs: np.ndarray) -> np.ndarray:
        return self.value_tensor(Tape(record=False), particles, obs_inputs).value

    def descriptor(self) -> dict[str, Any]:
        return dict(
            encoder=self.encoder.descriptor(),
            obs_encoder=self.obs_encoder.descriptor(),
            head=self.head.descriptor(),
            pool=self.pool.name,
        )


def obs_input(y_next: np.ndarray, control: Optional[np.ndarray] = None) -> np.ndarray:
    """The observation encoder input, y_{t+1} with c_t appended when present"""
    y_next = np.asarray(y_next, dtype=np.float64)
    if control is None:
        return y_next
    return np.concatenate([y_next, np.asarray(control, dtype=np.float64)], axis=-1)


def actor_mean(actor: Actor, x: np.ndarray, control: Optional[np.ndarray] = None) -> np.ndarray:
    """Deterministic part F(x [, c]) of the surrogate transition"""
    return actor.mean(x, control)


def actor_sample(
    actor: Actor,
    particles: np.ndarray,
    control: Optional[np.ndarray],
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Forecast particles and their per-particle log-probabilities"""
    return actor.sample(particles, control, rng)


def actor_logprob(
    actor: Actor,
    particles: np.ndarray,
    forecasts: np.ndarray,
    control: Optional[np.ndarray] = None,
) -> float:
    """Total log-probability of one action; the observation factor is left out"""
    controls = None if control is None else np.asarray(control)[None, :]
    tape = Tape(record=False)
    batch = np.asarray(particles)[None], np.asarray(forecasts)[None]
    return actor.logprob_tensor(tape, batch[0], batch[1], controls).item()


def critic_value(
    critic: Critic,
    particles: np.ndarray,
    y_next: np.ndarray,
    control: Optional[np.ndarray] = None,
) -> float:
    """Value of one filter state (particles [N, m], y_{t+1} [, c_t])"""
    inputs = obs_input(y_next, control)[None, :]
    return float(critic.values(np.asarray(particles)[None], inputs)[0])


@dataclass
class Surrogate:
    """Actor and critic of one learned model, plus the dimensions they were built for"""

    actor: Actor
    critic: Critic
    obs_dim: int

    @property
    def state_dim(self) -> int:
        return self.actor.state_dim

    @property
    def control_dim(self) -> int:
        return self.actor.control_dim

    def check_system(self, spec: SystemSpec) -> None:
        """Raise if this surrogate cannot run on data of the given system"""
        if spec.state_dim != self.state_dim or spec.obs_dim != self.obs_dim:
            raise DimensionError(
                f"Surrogate was built for m={self.state_dim}, n={self.obs_dim}; "
                f"data has m={spec.state_dim}, n={spec.obs_dim}"
            )
        if spec.control_dim != self.control_dim:
            raise DimensionError(f"Surrogate takes {self.control_dim} controls, data has {spec.control_dim}")

    def filter_model(
        self,
        observer: Observer,
        obs_var: np.ndarray,
        prior: tuple[np.ndarray, np.ndarray],
    ) -> FilterModel:
        """A FilterModel whose transition samples the actor"""
        actor = self.actor

        def _step(
            particles: np.ndarray, rng: np.random.Generator, control: Optional[np.ndarray]
        ) -> np.ndarray:
            return actor.sample(particles, control, rng)[0]

        return FilterModel(
            step=_step,
            observer=observer,
            obs_var=np.asarray(obs_var, dtype=np.float64),
            prior_mean=np.asarray(prior[0], dtype=np.float64),
            prior_var=np.asarray(prior[1], dtype=np.float64),
            name="surrogate",
        )

    def stores(self) -> dict[str, ParamStore]:
        return dict(actor=self.actor.store, critic=self.critic.store)

    def meta(self) -> dict[str, Any]:
        return dict(actor=self.actor.descriptor(), critic=self.critic.descriptor(), obs_dim=self.obs_dim)

    def save(self, path: str, **extra: Any) -> None:
        """Write a checkpoint; extra items are added to its meta section"""
        meta = self.meta()
        meta.update(extra)
        write_checkpoint(path, self.stores(), meta)

    @classmethod
    def load(cls, path: str) -> tuple[Surrogate, dict[str, Any]]:
        """Read a checkpoint written by `save`, returning the surrogate and the meta section"""
        stores, meta = read_checkpoint(path)
        return cls.from_stores(stores, meta), meta

    @classmethod
    def from_stores(cls, stores: dict[str, ParamStore], meta: dict[str, Any]) -> Surrogate:
        for key in ("actor", "critic", "obs_dim"):
            if key not in meta:
                raise ContractError(f"Checkpoint meta is missing '{key}'")
        actor_meta = meta["actor"]
        net = Handler.from_descriptor(actor_meta["net"])
        if not isinstance(net, Network):
            raise TypeError(f"{actor_meta['net']['class_name']} is not a Network")
        actor = Actor(
            net,
            int(actor_meta["state_dim"]),
            int(actor_meta["control_dim"]),
            bool(actor_meta["residual"]),
            stores["actor"],
        )
        critic_meta = meta["critic"]
        nets = [Handler.from_descriptor(critic_meta[key]) for key in ("encoder", "obs_encoder", "head")]
        critic = Critic(
            *nets, pool=PoolMode[critic_meta["pool"]], store=stores["critic"]  # type: ignore[misc]
        )
        return cls(actor, critic, int(meta["obs_dim"]))

    def copy(self) -> Surrogate:
        """Deep copy of the parameters; the networks are shared"""
        return Surrogate.from_stores(
            dict(actor=self.actor.store.copy(), critic=self.critic.store.copy()),
            self.meta(),
        )


def build_surrogate(
    spec: SystemSpec,
    model: ModelConfig,
    rng: np.random.Generator,
    control: bool = False,
) -> Surrogate:
    """Create a freshly initialized surrogate for a system

    Parameters
    ----------
    spec : SystemSpec
        Supplies the state, observation and control dimensions

    model : ModelConfig
        Architecture

    rng : np.random.Generator
        Source of the initial weights

    control : bool
        Feed the control input to the actor and the critic
    """
    state_dim = spec.state_dim
    control_dim = spec.control_dim if control else 0
    if control and control_dim == 0:
        raise ConfigurationError(f"System {spec.name.name} has no control input")
    if not control and spec.control_dim:
        raise ConfigurationError(f"System {spec.name.name} has control inputs; enable train.control")
    if model.actor_class is not None:
        net = Handler.get_handler(model.actor_class, in_dim=state_dim + control_dim, out_dim=state_dim)
    elif model.architecture == "conv_bilinear":
        if control_dim:
            raise ConfigurationError("The convolutional actor does not take control inputs")
        net = Handler.get_handler(
            CONV_CLASS, in_dim=state_dim, out_dim=state_dim, activation=model.activation
        )
    else:
        net = Handler.get_handler(
            MLP_CLASS,
            in_dim=state_dim + control_dim,
            out_dim=state_dim,
            hidden=[model.actor_units] * model.actor_layers,
            activation=model.activation,
        )
    if not isinstance(net, Network):
        raise TypeError(f"{net.get_handler_class_name()} is not a Network")
    actor = Actor.create(net, state_dim, control_dim, model.residual, rng, model.beta_init)

    embed_units, obs_units, head_units = model.critic_units
    hidden_layers = model.critic_layers - 1
    encoder = Handler.get_handler(
        MLP_CLASS,
        in_dim=state_dim,
        out_dim=embed_units,
        hidden=[embed_units] * hidden_layers,
        activation=model.activation,
        out_activation=model.activation,
        prefix="phi1.",
    )
    obs_encoder = Handler.get_handler(
        MLP_CLASS,
        in_dim=spec.obs_dim + control_dim,
        out_dim=embed_units,
        hidden=[obs_units] * hidden_layers,
        activation=model.activation,
        out_activation=model.activation,
        prefix="phi2.",
    )
    head = Handler.get_handler(
        MLP_CLASS,
        in_dim=embed_units,
        out_dim=1,
        hidden=[head_units] * model.critic_layers,
        activation=model.activation,
        prefix="phi3.",
    )
    pool = PoolMode[model.critic_pool]
    critic = Critic.create(encoder, obs_encoder, head, pool, rng)  # type: ignore[arg-type]
    return Surrogate(actor, critic, spec.obs_dim)
