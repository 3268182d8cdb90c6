"""Ground-truth benchmark systems.

These are only used to generate data and to evaluate results; the filters
and the learning code see them through `FilterModel` objects.

Every transition works on a single state [m] or on an ensemble [N, m].
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Any, Optional

import numpy as np
import scipy.linalg

from ..core.handler import Handler
from ..core.utils import ConfigurationError, ObsOperator, SystemName, make_rng
from .observation import Observer, obs_dim_for

CIRCULAR_ANGLE = math.pi / 4.0
LORENZ63_PARAMS = dict(sigma=10.0, rho=28.0, beta=8.0 / 3.0)
LORENZ96_FORCING = 8.0
ALLEN_CAHN_EPS = 0.001
ALLEN_CAHN_MU = 3.0
ALLEN_CAHN_POINTS = 40
BURN_IN_STEPS = 500


@dataclass
class SystemSpec:
    """Definition of a benchmark state-space model

    `obs_var` and `process_var` are the diagonals of R and Q_true.
    When `snr_db` is set, `obs_var` is recomputed from the signal power
    when a dataset is generated.
    """

    name: SystemName
    state_dim: int
    obs_operator: ObsOperator
    obs_dim: int
    obs_var: list[float]
    process_var: list[float]
    dt: float
    scheme: str
    snr_db: Optional[float] = None
    params: dict[str, Any] = field(default_factory=dict)
    class_name: Optional[str] = None

    def __post_init__(self) -> None:
        if isinstance(self.name, str):
            self.name = SystemName[self.name]
        if isinstance(self.obs_operator, str):
            self.obs_operator = ObsOperator[self.obs_operator]
        self.obs_var = [float(val) for val in self.obs_var]
        self.process_var = [float(val) for val in self.process_var]
        self.validate()

    def validate(self) -> None:
        if self.state_dim < 1 or self.obs_dim < 1:
            raise ConfigurationError(f"Dimensions must be positive: m={self.state_dim}, n={self.obs_dim}")
        if self.dt <= 0.0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if len(self.obs_var) != self.obs_dim:
            raise ConfigurationError(f"obs_var has {len(self.obs_var)} entries, expected {self.obs_dim}")
        if len(self.process_var) != self.state_dim:
            raise ConfigurationError(
                f"process_var has {len(self.process_var)} entries, expected {self.state_dim}"
            )
        if min(self.obs_var) < 0.0 or min(self.process_var) < 0.0:
            raise ConfigurationError("Noise variances must be non-negative")

    @property
    def control_dim(self) -> int:
        return self.state_dim if self.name.has_control() else 0

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out["name"] = self.name.name
        out["obs_operator"] = self.obs_operator.name
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> SystemSpec:
        known = {key_ for key_ in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"Unknown system keys {sorted(unknown)}")
        return cls(**data)


def default_system_spec(
    name: SystemName | str,
    obs_operator: ObsOperator | str | None = None,
    **overrides: Any,
) -> SystemSpec:
    """Return the SystemSpec of a benchmark with its published settings

    Parameters
    ----------
    name : SystemName | str
        Which benchmark

    obs_operator : ObsOperator | str | None
        Observation operator, defaults to identity (arctan for Allen-Cahn)

    overrides : Any
        Any other SystemSpec field, e.g. `obs_dim` for the number of
        sensors of the subsample operator, or `snr_db`
    """
    if isinstance(name, str):
        name = SystemName[name]
    if isinstance(obs_operator, str):
        obs_operator = ObsOperator[obs_operator]
    state_dim = int(overrides.pop("state_dim", 0)) or {
        SystemName.circular_motion: 2,
        SystemName.lorenz63: 3,
        SystemName.lorenz96: 40,
        SystemName.allen_cahn: ALLEN_CAHN_POINTS,
        SystemName.allen_cahn_control: ALLEN_CAHN_POINTS,
    }[name]
    if obs_operator is None:
        allen_cahn = name in (SystemName.allen_cahn, SystemName.allen_cahn_control)
        obs_operator = ObsOperator.arctan if allen_cahn else ObsOperator.identity
    obs_dim = int(overrides.pop("obs_dim", 0)) or obs_dim_for(obs_operator, state_dim)
    if name == SystemName.circular_motion:
        obs_level, process_level, dt, scheme = 0.4, 0.01, 1.0, "rotation"
        params: dict[str, Any] = dict(angle=CIRCULAR_ANGLE)
    elif name == SystemName.lorenz63:
        obs_level, process_level, dt, scheme = 1.0, 0.0, 0.02, "euler"
        params = dict(LORENZ63_PARAMS)
        overrides.setdefault("snr_db", 20.0)
    elif name == SystemName.lorenz96:
        obs_level, process_level, dt, scheme = 2.0, 0.0, 0.05, "rk4"
        params = dict(forcing=LORENZ96_FORCING)
    else:
        obs_level, process_level, dt, scheme = 0.01, 0.0, 2.0 / 200.0, "semi_implicit"
        params = dict(eps=ALLEN_CAHN_EPS, mu=ALLEN_CAHN_MU)
        if name == SystemName.allen_cahn_control:
            params.update(control_low=0.4, control_high=0.6)
    params.update(overrides.pop("params", {}))
    return SystemSpec(
        name=name,
        state_dim=state_dim,
        obs_operator=obs_operator,
        obs_dim=obs_dim,
        obs_var=overrides.pop("obs_var", [obs_level] * obs_dim),
        process_var=overrides.pop("process_var", [process_level] * state_dim),
        dt=overrides.pop("dt", dt),
        scheme=overrides.pop("scheme", scheme),
        params=params,
        **overrides,
    )


def rotation_matrix(angle: float) -> np.ndarray:
    return np.array([[math.cos(angle), -math.sin(angle)], [math.sin(angle), math.cos(angle)]])


def circular_motion_step(
    x: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    angle: float = CIRCULAR_ANGLE,
    process_var: float = 0.01,
) -> np.ndarray:
    """Rotate by `angle` and add N(0, process_var I) noise; rng=None switches noise off"""
    out = np.asarray(x, dtype=np.float64) @ rotation_matrix(angle).T
    if rng is not None and process_var > 0.0:
        out = out + rng.normal(size=out.shape) * math.sqrt(process_var)
    return out


def lorenz63_drift(
    u: np.ndarray, sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0
) -> np.ndarray:
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    return np.stack([sigma * (y - x), x * (rho - z) - y, x * y - beta * z], axis=-1)


def lorenz63_step(u: np.ndarray, dt: float = 0.02, **params: float) -> np.ndarray:
    """One explicit Euler step of the Lorenz 63 equations"""
    u = np.asarray(u, dtype=np.float64)
    return u + dt * lorenz63_drift(u, **params)


def lorenz96_drift(x: np.ndarray, forcing: float = LORENZ96_FORCING) -> np.ndarray:
    """dx_j/dt = x_{j-1} (x_{j+1} - x_{j-2}) - x_j + F, cyclic in j"""
    return (np.roll(x, -1, axis=-1) - np.roll(x, 2, axis=-1)) * np.roll(x, 1, axis=-1) - x + forcing


def lorenz96_step(x: np.ndarray, dt: float = 0.05, forcing: float = LORENZ96_FORCING) -> np.ndarray:
    """One fourth-order Runge-Kutta step of the Lorenz 96 equations"""
    x = np.asarray(x, dtype=np.float64)
    k1 = lorenz96_drift(x, forcing)
    k2 = lorenz96_drift(x + 0.5 * dt * k1, forcing)
    k3 = lorenz96_drift(x + 0.5 * dt * k2, forcing)
    k4 = lorenz96_drift(x + dt * k3, forcing)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def allen_cahn_grid(n_points: int = ALLEN_CAHN_POINTS) -> np.ndarray:
    """Periodic grid on [-1, 1), endpoint excluded"""
    return -1.0 + 2.0 * np.arange(n_points) / n_points


class AllenCahnSolver:
    """Semi-implicit step of u_t = eps^2 u_xx + mu (u - u^3) + a

    Diffusion is implicit, reaction and control explicit:
    (I - dt eps^2 L) u_{t+1} = u_t + dt [mu (u_t - u_t^3) + a_t],
    with L the periodic second difference.  The solve is written as
    u_{t+1} = b + (I - dt eps^2 L)^{-1} dt eps^2 L b, so constant fields,
    for which L b vanishes, are propagated without rounding.
    """

    def __init__(
        self,
        n_points: int = ALLEN_CAHN_POINTS,
        dt: float = 2.0 / 200.0,
        eps: float = ALLEN_CAHN_EPS,
        mu: float = ALLEN_CAHN_MU,
    ) -> None:
        self.n_points = n_points
        self.dt = dt
        self.mu = mu
        dx = 2.0 / n_points
        self._coef = dt * eps**2 / dx**2
        eye = np.eye(n_points)
        laplacian = np.roll(eye, 1, axis=1) - 2.0 * eye + np.roll(eye, -1, axis=1)
        self._laplacian = laplacian
        self._lu = scipy.linalg.lu_factor(eye - self._coef * laplacian)

    def step(self, u: np.ndarray, control: Optional[np.ndarray] = None) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64)
        rhs = u + self.dt * self.mu * (u - u**3)
        if control is not None:
            rhs = rhs + self.dt * np.asarray(control, dtype=np.float64)
        diffusion = self._coef * (rhs @ self._laplacian.T)
        correction = scipy.linalg.lu_solve(self._lu, diffusion.reshape(-1, self.n_points).T).T
        return rhs + correction.reshape(rhs.shape)


_DEFAULT_SOLVER = AllenCahnSolver()


def allen_cahn_step(u: np.ndarray, control: Optional[np.ndarray] = None) -> np.ndarray:
    """One step of the 40 point Allen-Cahn scheme with eps=0.001, mu=3, dt=0.01"""
    return _DEFAULT_SOLVER.step(u, control)


class BenchmarkSystem(Handler):
    """Base class for the true systems

    The configuration is the `SystemSpec.to_dict()` dictionary.
    Subclasses implement `mean_step` and `_draw_initial`.
    """

    def __init__(self, **kwargs: Any) -> None:
        Handler.__init__(self, **kwargs)
        self.spec = SystemSpec.from_dict(dict(self.config))

    @staticmethod
    def from_spec(spec: SystemSpec) -> BenchmarkSystem:
        """Return the (cached) system for a spec"""
        class_name = spec.class_name or SYSTEM_CLASSES[spec.name]
        system = Handler.get_handler(class_name, **spec.to_dict())
        if not isinstance(system, BenchmarkSystem):
            raise TypeError(f"{class_name} is not a BenchmarkSystem")
        return system

    @cached_property
    def observer(self) -> Observer:
        return Observer(self.spec.obs_operator, self.spec.state_dim, self.spec.obs_dim)

    @property
    def obs_var(self) -> np.ndarray:
        return np.asarray(self.spec.obs_var)

    @property
    def process_var(self) -> np.ndarray:
        return np.asarray(self.spec.process_var)

    def mean_step(self, x: np.ndarray, control: Optional[np.ndarray] = None) -> np.ndarray:
        """Deterministic part of the transition"""
        raise NotImplementedError()

    def step(
        self,
        x: np.ndarray,
        rng: Optional[np.random.Generator] = None,
        control: Optional[np.ndarray] = None,
    ) -> np.ndarray:
        """Full transition; rng=None switches the process noise off"""
        out = self.mean_step(x, control)
        if rng is not None and np.any(self.process_var > 0.0):
            out = out + rng.normal(size=out.shape) * np.sqrt(self.process_var)
        return out

    def _draw_initial(self, rng: np.random.Generator, count: int) -> np.ndarray:
        raise NotImplementedError()

    def burn_in(self) -> int:
        """Number of noise-free steps used to move initial draws onto the attractor"""
        return 0

    def initial_states(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """Draw `count` initial conditions, shape [count, m]"""
        states = self._draw_initial(rng, count)
        for _ in range(self.burn_in()):
            states = self.mean_step(states)
        return states

    def draw_controls(self, rng: np.random.Generator, n_steps: int) -> Optional[np.ndarray]:
        """Control inputs c_0 .. c_{T-1}, or None for autonomous systems"""
        return None

    def prior(self) -> tuple[np.ndarray, np.ndarray]:
        """Mean and diagonal variance of the default initial filter ensemble

        By default the climatology of `initial_states`, estimated from a
        fixed-seed sample.
        """
        sample = self.initial_states(make_rng(0, 7919), 500)
        return sample.mean(axis=0), sample.var(axis=0) + 1e-6

    def linear_model(self) -> Optional[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        """Return (A, Q, H) for linear-Gaussian systems, None otherwise"""
        return None


class CircularMotion(BenchmarkSystem):
    """Rotation by a fixed angle with additive noise"""

    def mean_step(self, x: np.ndarray, control: Optional[np.ndarray] = None) -> np.ndarray:
        return circular_motion_step(x, None, angle=self.spec.params.get("angle", CIRCULAR_ANGLE))

    def _draw_initial(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return np.array([1.0, 0.0]) + 0.5 * rng.normal(size=(count, 2))

    def prior(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array([1.0, 0.0]), np.full(2, 0.25)

    def linear_model(self) -> Optional[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        if self.spec.obs_operator != ObsOperator.identity:
            return None
        angle = self.spec.params.get("angle", CIRCULAR_ANGLE)
        return rotation_matrix(angle), np.diag(self.process_var), np.eye(2)


class Lorenz63(BenchmarkSystem):
    """Lorenz 63, explicit Euler"""

    def mean_step(self, x: np.ndarray, control: Optional[np.ndarray] = None) -> np.ndarray:
        params = {key_: self.spec.params[key_] for key_ in LORENZ63_PARAMS}
        return lorenz63_step(x, self.spec.dt, **params)

    def _draw_initial(self, rng: np.random.Generator, count: int) -> np.ndarray:
        return np.ones(3) + rng.normal(size=(count, 3))

    def burn_in(self) -> int:
        return BURN_IN_STEPS


class Lorenz96(BenchmarkSystem):
    """Lorenz 96, fourth-order Runge-Kutta"""

    def mean_step(self, x: np.ndarray, control: Optional[np.ndarray] = None) -> np.ndarray:
        return lorenz96_step(x, self.spec.dt, self.spec.params.get("forcing", LORENZ96_FORCING))

    def _draw_initial(self, rng: np.random.Generator, count: int) -> np.ndarray:
        forcing = self.spec.params.get("forcing", LORENZ96_FORCING)
        return forcing + rng.normal(size=(count, self.spec.state_dim))

    def burn_in(self) -> int:
        return BURN_IN_STEPS


class AllenCahn(BenchmarkSystem):
    """Allen-Cahn equation on a periodic grid, optionally controlled"""

    @cached_property
    def solver(self) -> AllenCahnSolver:
        return AllenCahnSolver(
            self.spec.state_dim,
            self.spec.dt,
            self.spec.params.get("eps", ALLEN_CAHN_EPS),
            self.spec.params.get("mu", ALLEN_CAHN_MU),
        )

    @cached_property
    def grid(self) -> np.ndarray:
        return allen_cahn_grid(self.spec.state_dim)

    def mean_step(self, x: np.ndarray, control: Optional[np.ndarray] = None) -> np.ndarray:
        return self.solver.step(x, control)

    def _draw_initial(self, rng: np.random.Generator, count: int) -> np.ndarray:
        amplitude = rng.uniform(0.8, 1.2, size=(count, 1))
        return amplitude * self.grid**2 * np.cos(np.pi * self.grid)

    def prior(self) -> tuple[np.ndarray, np.ndarray]:
        shape = self.grid**2 * np.cos(np.pi * self.grid)
        # Var(U) = 0.4^2 / 12 for U ~ Uniform(0.8, 1.2)
        return shape.copy(), (0.4**2 / 12.0) * shape**2 + 1e-4

    def draw_controls(self, rng: np.random.Generator, n_steps: int) -> Optional[np.ndarray]:
        if not self.spec.name.has_control():
            return None
        amplitude = rng.uniform(self.spec.params["control_low"], self.spec.params["control_high"])
        times = self.spec.dt * np.arange(n_steps)
        return amplitude * np.outer(np.cos(np.pi * times), np.sin(np.pi * self.grid))


SYSTEM_CLASSES: dict[SystemName, str] = {
    SystemName.circular_motion: "lsst.da.tools.ssm.systems.CircularMotion",
    SystemName.lorenz63: "lsst.da.tools.ssm.systems.Lorenz63",
    SystemName.lorenz96: "lsst.da.tools.ssm.systems.Lorenz96",
    SystemName.allen_cahn: "lsst.da.tools.ssm.systems.AllenCahn",
    SystemName.allen_cahn_control: "lsst.da.tools.ssm.systems.AllenCahn",
}


def with_obs_var(spec: SystemSpec, obs_var: np.ndarray) -> SystemSpec:
    """Return a copy of spec with a new observation noise diagonal"""
    return replace(spec, obs_var=[float(val) for val in obs_var])
