from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Any, Optional

import numpy as np
from lsst.utils.logging import getLogger

from ..core.utils import ConfigurationError, ContractError, make_rng, read_jsonl, safe_makedirs, write_jsonl
from .observation import observe, snr_to_sigma
from .systems import BenchmarkSystem, SystemSpec, with_obs_var

_LOG = getLogger(__name__)

HEADER_FILE = "header.json"
TRAIN_FILE = "train.jsonl"
TEST_FILE = "test.jsonl"

# Keys into the per-trajectory random streams
TRAIN_SPLIT = 0
TEST_SPLIT = 1
CALIBRATION_SPLIT = 2


@dataclass
class Trajectory:
    """One observation sequence, with optional truth, controls and sensor indices

    Index conventions: `y[k]` is y_{k+1}, `x[k]` is x_k, `c[k]` is the
    control c_k applied between x_k and x_{k+1}, and `obs_idx[k]` are
    the components observed in y_{k+1}.
    """

    id: int
    y: np.ndarray
    x: Optional[np.ndarray] = None
    c: Optional[np.ndarray] = None
    obs_idx: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        n_steps = len(self.y)
        if self.x is not None and len(self.x) != n_steps + 1:
            raise ConfigurationError(f"Trajectory {self.id}: {len(self.x)} states for {n_steps} observations")
        if self.c is not None and len(self.c) != n_steps:
            raise ConfigurationError(
                f"Trajectory {self.id}: {len(self.c)} controls for {n_steps} observations"
            )
        if self.obs_idx is not None and len(self.obs_idx) != n_steps:
            raise ConfigurationError(
                f"Trajectory {self.id}: {len(self.obs_idx)} index sets for {n_steps} observations"
            )

    @property
    def n_steps(self) -> int:
        return len(self.y)

    def strip_states(self) -> Trajectory:
        return Trajectory(self.id, self.y, None, self.c, self.obs_idx)

    def head(self, n_steps: int) -> Trajectory:
        """The first n_steps observations, with matching states and controls"""
        return Trajectory(
            self.id,
            self.y[:n_steps],
            None if self.x is None else self.x[: n_steps + 1],
            None if self.c is None else self.c[:n_steps],
            None if self.obs_idx is None else self.obs_idx[:n_steps],
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = dict(id=self.id, y=self.y.tolist())
        if self.x is not None:
            out["x"] = self.x.tolist()
        if self.c is not None:
            out["c"] = self.c.tolist()
        if self.obs_idx is not None:
            out["obs_idx"] = self.obs_idx.tolist()
        return out

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> Trajectory:
        def _array(key: str, dtype: Any = np.float64) -> Optional[np.ndarray]:
            return None if key not in data else np.asarray(data[key], dtype=dtype)

        return cls(
            id=int(data["id"]),
            y=np.asarray(data["y"], dtype=np.float64),
            x=_array("x"),
            c=_array("c"),
            obs_idx=_array("obs_idx", int),
        )


@dataclass
class Dataset:
    """Training (observations only) and test (with truth) trajectories"""

    train: list[Trajectory]
    test: list[Trajectory]
    spec: SystemSpec
    seed: int


def simulate_trajectory(
    system: BenchmarkSystem,
    n_steps: int,
    rng: np.random.Generator,
    traj_id: int = 0,
) -> Trajectory:
    """Integrate the true system and observe it for n_steps steps"""
    spec = system.spec
    states = np.empty((n_steps + 1, spec.state_dim))
    obs = np.empty((n_steps, spec.obs_dim))
    obs_idx = np.empty((n_steps, spec.obs_dim), dtype=int) if system.observer.needs_indices else None
    states[0] = system.initial_states(rng, 1)[0]
    controls = system.draw_controls(rng, n_steps)
    for k in range(n_steps):
        control = None if controls is None else controls[k]
        states[k + 1] = system.step(states[k], rng, control)
        idx = system.observer.draw_indices(rng)
        if obs_idx is not None:
            obs_idx[k] = idx
        obs[k] = observe(states[k + 1], system.observer, system.obs_var, rng, idx)
    return Trajectory(traj_id, obs, states, controls, obs_idx)


def calibrate_obs_var(spec: SystemSpec, n_steps: int, seed: int) -> SystemSpec:
    """Set R from the SNR, using a noise-free calibration trajectory"""
    if spec.snr_db is None:
        return spec
    system = BenchmarkSystem.from_spec(with_obs_var(spec, np.zeros(spec.obs_dim)))
    traj = simulate_trajectory(system, n_steps, make_rng(seed, CALIBRATION_SPLIT, 0))
    # zero observation noise, so y is the clean signal
    obs_var = snr_to_sigma(spec.obs_dim, spec.snr_db, traj.y)
    _LOG.info("SNR %.1f dB gives observation variance %.6g", spec.snr_db, obs_var[0])
    return with_obs_var(spec, obs_var)


def generate_dataset(
    spec: SystemSpec,
    k_train: int,
    t_train: int,
    k_test: int,
    t_test: int,
    seed: int,
) -> Dataset:
    """Simulate a training and a test set

    Parameters
    ----------
    spec : SystemSpec
        The true system

    k_train, t_train : int
        Number and length of the training trajectories

    k_test, t_test : int
        Number and length of the test trajectories

    seed : int
        Master seed; trajectory k of split s uses the stream keyed by
        (seed, s, k), so the result does not depend on generation order

    Returns
    -------
    dataset : Dataset
        Training trajectories without states, test trajectories with them
    """
    for name, count in dict(k_train=k_train, t_train=t_train, k_test=k_test, t_test=t_test).items():
        if count < 1:
            raise ConfigurationError(f"{name} must be positive, got {count}")
    spec = calibrate_obs_var(spec, t_train, seed)
    system = BenchmarkSystem.from_spec(spec)
    train = [
        simulate_trajectory(system, t_train, make_rng(seed, TRAIN_SPLIT, k), k).strip_states()
        for k in range(k_train)
    ]
    test = [simulate_trajectory(system, t_test, make_rng(seed, TEST_SPLIT, k), k) for k in range(k_test)]
    return Dataset(train, test, spec, seed)


def write_dataset(dataset: Dataset, dirname: str) -> None:
    """Write header.json, train.jsonl and test.jsonl into dirname"""
    safe_makedirs(dirname)
    header = dict(
        system=dataset.spec.to_dict(),
        seed=dataset.seed,
        n_train=len(dataset.train),
        n_test=len(dataset.test),
    )
    with open(os.path.join(dirname, HEADER_FILE), "wt", encoding="utf-8") as fout:
        json.dump(header, fout, indent=2)
        fout.write("\n")
    write_jsonl(os.path.join(dirname, TRAIN_FILE), (traj.to_dict() for traj in dataset.train))
    write_jsonl(os.path.join(dirname, TEST_FILE), (traj.to_dict() for traj in dataset.test))


def _read_trajectories(path: str) -> list[Trajectory]:
    return [Trajectory.from_dict(record) for record in read_jsonl(path)]


def read_dataset(dirname: str) -> Dataset:
    """Read a dataset written by `write_dataset`"""
    header_path = os.path.join(dirname, HEADER_FILE)
    if not os.path.exists(header_path):
        raise ContractError(f"No dataset header at {header_path}")
    with open(header_path, "rt", encoding="utf-8") as fin:
        header = json.load(fin)
    return Dataset(
        train=_read_trajectories(os.path.join(dirname, TRAIN_FILE)),
        test=_read_trajectories(os.path.join(dirname, TEST_FILE)),
        spec=SystemSpec.from_dict(header["system"]),
        seed=int(header["seed"]),
    )
