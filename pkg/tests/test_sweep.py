import os

import pytest

from lsst.da.tools.core.config import RESOLVED_CONFIG_FILE, RunConfig
from lsst.da.tools.core.utils import ConfigurationError, FilterMethod
from lsst.da.tools.eval.report import REPORT_FILE, read_report
from lsst.da.tools.eval.sweep import run_pipeline, sensor_sweep, snr_sweep
from lsst.da.tools.rl.ppo import CHECKPOINT_FILE, LOG_FILE
from lsst.da.tools.ssm.dataset import read_dataset


def tiny_config(name: str = "circular_motion", **system) -> RunConfig:
    return RunConfig.from_dict(
        dict(
            system=dict(name=name, **system),
            data=dict(k_train=2, t_train=5, k_test=2, t_test=6),
            model=dict(architecture="mlp", actor_layers=1, actor_units=4, critic_units=[4, 4, 6]),
            train=dict(iterations=1, epochs=1, minibatch=8, n_particles=6),
            eval=dict(n_particles=6, n_initial=4, horizons=[1.0], assimilate_steps=None),
        )
    )


def test_run_pipeline(tmp_path) -> None:
    out_dir = str(tmp_path / "run")
    report = run_pipeline(tiny_config(), output_dir=out_dir)
    assert report.n_traj == 2
    assert report.meta["train_backend"] == "enkf"
    assert report.meta["iterations"] == 1
    assert "rmse_f@1" in report.rmse_f
    for name in (RESOLVED_CONFIG_FILE, CHECKPOINT_FILE, LOG_FILE, REPORT_FILE, "data/header.json"):
        assert os.path.exists(os.path.join(out_dir, name))
    assert read_report(out_dir) == report

    in_memory = run_pipeline(tiny_config(), method=FilterMethod.pf)
    assert in_memory.method == "pf"


def test_snr_sweep(tmp_path) -> None:
    assert snr_sweep(tiny_config(), []) == []
    reports = snr_sweep(tiny_config(), [10.0, 30.0], output_dir=str(tmp_path))
    assert [report.snr_db for report in reports] == [10.0, 30.0]
    assert os.path.exists(tmp_path / "snr_10" / REPORT_FILE)
    assert os.path.exists(tmp_path / "snr_30" / REPORT_FILE)
    noisy = read_dataset(str(tmp_path / "snr_10" / "data")).spec
    quiet = read_dataset(str(tmp_path / "snr_30" / "data")).spec
    assert noisy.snr_db == 10.0
    assert noisy.obs_var[0] > 10.0 * quiet.obs_var[0]


def test_sensor_sweep() -> None:
    config = tiny_config("lorenz96", state_dim=8)
    reports = sensor_sweep(config, [2, 8])
    assert [report.meta["n_sensors"] for report in reports] == [2, 8]

    with pytest.raises(ConfigurationError):
        sensor_sweep(config, [9])
    with pytest.raises(ConfigurationError):
        sensor_sweep(config, [0])


if __name__ == "__main__":
    test_sensor_sweep()
