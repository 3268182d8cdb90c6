from __future__ import annotations

import contextlib
import enum
import json
import os
import sys
from typing import TYPE_CHECKING, Any, Iterable, Iterator

import numpy as np

if TYPE_CHECKING:  # pragma: no cover
    from _typeshed import StrOrBytesPath


class ConfigurationError(ValueError):
    """Raised for inconsistent configurations or architectures"""


class DimensionError(ConfigurationError):
    """Raised when array shapes do not agree"""


class DomainError(ValueError):
    """Raised when a function is evaluated outside of its domain"""


class NumericError(ArithmeticError):
    """Raised when a computation produces non-finite values or hits a singular system"""


class ContractError(RuntimeError):
    """Raised when an operation is called in a state it does not support"""


class TrainingAbortedError(NumericError):
    """Raised when training fails numerically after the recovery attempt"""


class SystemName(enum.Enum):
    """The benchmark systems

    circular_motion = 0
        2-D rotation by pi/4 with additive Gaussian noise

    lorenz63 = 1
        3-D Lorenz 63 system, explicit Euler

    lorenz96 = 2
        m-D Lorenz 96 system, RK4

    allen_cahn = 3
        Allen-Cahn PDE on a periodic 40 point grid, semi-implicit

    allen_cahn_control = 4
        Allen-Cahn PDE with a distributed control input
    """

    circular_motion = 0
    lorenz63 = 1
    lorenz96 = 2
    allen_cahn = 3
    allen_cahn_control = 4

    def has_control(self) -> bool:
        """True if trajectories of this system carry control inputs"""
        return self == SystemName.allen_cahn_control


class ObsOperator(enum.Enum):
    """The observation operators

    identity = 0
        y = x

    circle_polar = 1
        y = (|x|, arcsin(x_1 / |x|), arccos(x_2 / |x|))

    lorenz63_nonlinear = 2
        y = (x + sin(x) / 2, y + cos(z), y + z)

    subsample = 3
        n components drawn at random at every time step

    arctan = 4
        y = arctan(x), elementwise
    """

    identity = 0
    circle_polar = 1
    lorenz63_nonlinear = 2
    subsample = 3
    arctan = 4


class FilterMethod(enum.Enum):
    """Which filter to run

    enkf = 0
        Stochastic ensemble Kalman filter with perturbed observations

    pf = 1
        Bootstrap particle filter with systematic resampling

    kf = 2
        Exact Kalman filter, linear-Gaussian models only
    """

    enkf = 0
    pf = 1
    kf = 2


class Activation(enum.Enum):
    """Activation functions for dense and convolutional layers"""

    identity = 0
    tanh = 1
    relu = 2
    softplus = 3


class PoolMode(enum.Enum):
    """How the set critic aggregates particle embeddings"""

    sum = 0
    mean = 1


def get_kwarg_value(key: str, **kwargs: Any) -> Any:
    """Utility function to get a keyword value

    Provides a more useful error message if the keyword is not present

    Parameters
    ----------
    key : str
        Name of the keyword requested

    Returns
    -------
    value : Any
        Value of the request keyword

    Raises
    ------
    KeyError :
        The requested keyword is not present
    """
    value = kwargs.get(key, "__FAIL__")
    if isinstance(value, str) and value == "__FAIL__":
        raise KeyError(f"Keyword {key} was not specified in {list(kwargs.keys())}")
    return value


def make_rng(*keys: int) -> np.random.Generator:
    """Build a random generator from a tuple of integer keys

    The same keys always give the same stream, and different keys give
    statistically independent streams, e.g. `make_rng(seed, split, k)`
    for the k-th trajectory of a dataset split.
    """
    return np.random.default_rng(np.random.SeedSequence([int(key_) for key_ in keys]))


def check_finite(array: np.ndarray, what: str) -> np.ndarray:
    """Raise NumericError if any entry of array is NaN or Inf

    For 2-D arrays the message names the first offending row,
    which for ensembles is the particle index.
    """
    finite = np.isfinite(array)
    if finite.all():
        return array
    if array.ndim >= 2:
        bad_row = int(np.argwhere(~finite.reshape(array.shape[0], -1).all(axis=1))[0][0])
        raise NumericError(f"Non-finite values in {what}, first at index {bad_row}")
    raise NumericError(f"Non-finite values in {what}")


def safe_makedirs(path: StrOrBytesPath) -> None:
    """Utility function to make directory and catch exception
    if it already exists
    """
    try:
        os.makedirs(path)
    except OSError:
        pass


@contextlib.contextmanager
def add_sys_path(path: os.PathLike | str | None) -> Iterator[None]:
    """Temporarily add the given path to `sys.path`."""
    if path is None:
        yield
    else:
        path = os.fspath(path)
        try:
            sys.path.insert(0, path)
            yield
        finally:
            sys.path.remove(path)


def write_jsonl(path: str, records: Iterable[dict[str, Any]]) -> None:
    """Write one JSON document per line"""
    with open(path, "wt", encoding="utf-8") as fout:
        for record in records:
            fout.write(json.dumps(record))
            fout.write("\n")


def read_jsonl(path: str) -> list[dict[str, Any]]:
    """Read a file written by `write_jsonl`, skipping blank lines"""
    if not os.path.exists(path):
        raise ContractError(f"No such file {path}")
    with open(path, "rt", encoding="utf-8") as fin:
        return [json.loads(line) for line in fin if line.strip()]
