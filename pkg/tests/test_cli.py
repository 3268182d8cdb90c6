import json
import os

import numpy as np
import pandas as pd
import pytest
import yaml
from click.testing import CliRunner

from lsst.da.tools.cli.commands import (
    EXIT_CONFIG_ERROR,
    EXIT_NUMERIC_ERROR,
    FORECAST_FILE,
    POSTERIOR_FILE,
    STATE_FILE,
    cli,
)
from lsst.da.tools.core.config import RESOLVED_CONFIG_FILE, load_run_config
from lsst.da.tools.core.utils import ContractError, make_rng
from lsst.da.tools.eval.report import REPORT_FILE, SUMMARY_COLUMNS, read_report
from lsst.da.tools.rl.ppo import CHECKPOINT_FILE, INIT_STREAM, LOG_COLUMNS, LOG_FILE
from lsst.da.tools.rl.surrogate import Surrogate, build_surrogate
from lsst.da.tools.ssm.dataset import HEADER_FILE, TEST_FILE, TRAIN_FILE, read_dataset

SMALL_RUN = dict(
    system=dict(name="circular_motion"),
    data=dict(k_train=2, t_train=6, k_test=2, t_test=8, seed=0),
    model=dict(actor_layers=2, actor_units=8, critic_units=[6, 6, 8]),
    train=dict(iterations=1, epochs=1, minibatch=8, n_particles=10),
    eval=dict(n_particles=20, n_initial=10, horizons=[1.0, 2.0], assimilate_steps=None, forecast_steps=3),
)


def write_config(tmp_path, **sections) -> str:
    doc = dict(SMALL_RUN, **sections)
    path = os.path.join(tmp_path, "run.yaml")
    with open(path, "wt", encoding="utf-8") as fout:
        yaml.safe_dump(doc, fout)
    return path


def invoke(*args: str):
    runner = CliRunner()
    return runner.invoke(cli, list(args))


def read_bytes(dirname: str, name: str) -> bytes:
    with open(os.path.join(dirname, name), "rb") as fin:
        return fin.read()


def generate(tmp_path) -> tuple[str, str]:
    config = write_config(tmp_path)
    data_dir = os.path.join(tmp_path, "data")
    result = invoke("gen", "--config", config, "--output-dir", data_dir)
    assert result.exit_code == 0, result.output
    return config, data_dir


def test_gen(tmp_path) -> None:
    config, data_dir = generate(tmp_path)
    for name in (HEADER_FILE, TRAIN_FILE, TEST_FILE, RESOLVED_CONFIG_FILE):
        assert os.path.exists(os.path.join(data_dir, name))
    dataset = read_dataset(data_dir)
    assert len(dataset.train) == 2 and len(dataset.test) == 2
    assert dataset.test[0].n_steps == 8
    assert load_run_config(os.path.join(data_dir, RESOLVED_CONFIG_FILE)).io.dataset_dir == data_dir

    again = os.path.join(tmp_path, "again")
    assert invoke("gen", "--config", config, "--output-dir", again).exit_code == 0
    for name in (HEADER_FILE, TRAIN_FILE, TEST_FILE):
        assert read_bytes(data_dir, name) == read_bytes(again, name)

    other = os.path.join(tmp_path, "other")
    assert invoke("gen", "--config", config, "--output-dir", other, "--seed", "5").exit_code == 0
    assert read_bytes(data_dir, TEST_FILE) != read_bytes(other, TEST_FILE)

    polar = os.path.join(tmp_path, "polar")
    result = invoke("gen", "--config", config, "--output-dir", polar, "--obs-operator", "circle_polar")
    assert result.exit_code == 0, result.output
    assert read_dataset(polar).spec.obs_operator.name == "circle_polar"


def test_train(tmp_path) -> None:
    config, data_dir = generate(tmp_path)
    out_dir = os.path.join(tmp_path, "init")
    result = invoke(
        "train", "--config", config, "--dataset", data_dir, "--output-dir", out_dir, "--iterations", "0"
    )
    assert result.exit_code == 0, result.output
    loaded, meta = Surrogate.load(os.path.join(out_dir, CHECKPOINT_FILE))
    assert meta["iteration"] == 0
    run = load_run_config(config)
    initial = build_surrogate(run.system, run.model, make_rng(run.train.seed, INIT_STREAM))
    for group, store in initial.stores().items():
        for name in store:
            assert np.array_equal(loaded.stores()[group][name], store[name])

    out_dir = os.path.join(tmp_path, "trained")
    result = invoke("train", "--config", config, "--dataset", data_dir, "--output-dir", out_dir)
    assert result.exit_code == 0, result.output
    assert "Final mean return" in result.output
    frame = pd.read_csv(os.path.join(out_dir, LOG_FILE))
    assert list(frame.columns) == LOG_COLUMNS
    assert len(frame) == 1
    resolved = load_run_config(os.path.join(out_dir, RESOLVED_CONFIG_FILE))
    assert resolved.io.checkpoint == os.path.join(out_dir, CHECKPOINT_FILE)


def test_assimilate_and_forecast(tmp_path) -> None:
    config, data_dir = generate(tmp_path)
    scores = {}
    for method in ("kf", "enkf"):
        out_dir = os.path.join(tmp_path, method)
        result = invoke(
            "assimilate",
            "--config",
            config,
            "--dataset",
            data_dir,
            "--truth-model",
            "--method",
            method,
            "--n-particles",
            "2000",
            "--output-dir",
            out_dir,
        )
        assert result.exit_code == 0, result.output
        report = read_report(out_dir)
        assert report.n_traj == 2
        assert set(report.rmse_f) == {"rmse_f@1", "rmse_f@2"}
        assert report.meta["model"] == "truth"
        scores[method] = report.aggregate()["rmse_a"]
        with open(os.path.join(out_dir, POSTERIOR_FILE), "rt", encoding="utf-8") as fin:
            records = [json.loads(line) for line in fin]
        assert len(records) == 16
        assert [record["t"] for record in records[:8]] == list(range(1, 9))
        assert {"id", "t", "mean", "std", "loglik_inc"} <= set(records[0])
    assert scores["enkf"] == pytest.approx(scores["kf"], rel=0.05)

    state_dir = os.path.join(tmp_path, "enkf")
    for horizon, count in (("0", 2), ("5", 12)):
        out_dir = os.path.join(tmp_path, f"forecast{horizon}")
        result = invoke(
            "forecast",
            "--config",
            config,
            "--dataset",
            data_dir,
            "--state",
            state_dir,
            "--truth-model",
            "--horizon",
            horizon,
            "--output-dir",
            out_dir,
        )
        assert result.exit_code == 0, result.output
        with open(os.path.join(out_dir, FORECAST_FILE), "rt", encoding="utf-8") as fin:
            records = [json.loads(line) for line in fin]
        assert len(records) == count
        assert records[0]["t"] == 8 and records[0]["h"] == 0

    result = invoke(
        "forecast", "--config", config, "--dataset", data_dir, "--truth-model", "--output-dir", str(tmp_path)
    )
    assert result.exit_code == 1
    assert isinstance(result.exception, ContractError)


def test_assimilate_with_checkpoint(tmp_path) -> None:
    config, data_dir = generate(tmp_path)
    model_dir = os.path.join(tmp_path, "model")
    result = invoke("train", "--config", config, "--dataset", data_dir, "--output-dir", model_dir)
    assert result.exit_code == 0, result.output
    out_dir = os.path.join(tmp_path, "eval")
    checkpoint = os.path.join(model_dir, CHECKPOINT_FILE)
    args = ["assimilate", "--config", config, "--dataset", data_dir, "--output-dir", out_dir]
    result = invoke(*args, "--checkpoint", checkpoint, "--no-rmse-f", "--dump-ensembles")
    assert result.exit_code == 0, result.output
    report = read_report(out_dir)
    assert report.rmse_f == {}
    assert report.meta["model"] == checkpoint
    with open(os.path.join(out_dir, POSTERIOR_FILE), "rt", encoding="utf-8") as fin:
        first = json.loads(fin.readline())
    assert np.asarray(first["particles"]).shape == (20, 2)
    assert os.path.exists(os.path.join(out_dir, STATE_FILE))

    # no model at all
    result = invoke(*args)
    assert result.exit_code == EXIT_CONFIG_ERROR


def test_eval_merge(tmp_path) -> None:
    config, data_dir = generate(tmp_path)
    dirs = []
    for method in ("kf", "pf"):
        out_dir = os.path.join(tmp_path, method)
        args = ["assimilate", "--config", config, "--dataset", data_dir, "--truth-model", "--no-rmse-f"]
        assert invoke(*args, "--method", method, "--output-dir", out_dir).exit_code == 0
        dirs.append(out_dir)
    output = os.path.join(tmp_path, "merged.csv")
    result = invoke("eval", os.path.join(dirs[0], REPORT_FILE), dirs[1], "--output", output)
    assert result.exit_code == 0, result.output
    table = pd.read_csv(output)
    assert list(table.columns) == SUMMARY_COLUMNS
    assert set(table["method"]) == {"kf", "pf"}
    assert len(table) == 4

    result = invoke("eval", dirs[0])
    assert ",".join(SUMMARY_COLUMNS) in result.output


def test_config_command(tmp_path) -> None:
    result = invoke("config", "--system", "lorenz96")
    assert result.exit_code == 0, result.output
    doc = yaml.safe_load(result.output)
    assert doc["system"]["name"] == "lorenz96"
    assert doc["model"]["architecture"] == "conv_bilinear"

    config = write_config(tmp_path)
    doc = yaml.safe_load(invoke("config", "--config", config).output)
    assert doc["data"]["t_test"] == 8


def test_exit_codes(tmp_path) -> None:
    config = write_config(tmp_path, train=dict(colour="red"))
    result = invoke("config", "--config", config)
    assert result.exit_code == EXIT_CONFIG_ERROR
    assert "colour" in result.output

    assert invoke("gen").exit_code == 2
    assert invoke("sweep", "--system", "circular_motion").exit_code == EXIT_CONFIG_ERROR

    config, data_dir = generate(tmp_path)
    path = os.path.join(data_dir, TEST_FILE)
    with open(path, "rt", encoding="utf-8") as fin:
        records = [json.loads(line) for line in fin]
    records[0]["y"][2][0] = float("nan")
    with open(path, "wt", encoding="utf-8") as fout:
        for record in records:
            fout.write(json.dumps(record) + "\n")
    args = ["assimilate", "--config", config, "--dataset", data_dir, "--truth-model"]
    result = invoke(*args, "--output-dir", str(tmp_path))
    assert result.exit_code == EXIT_NUMERIC_ERROR


def test_help_lists_keys() -> None:
    result = invoke("assimilate", "--help")
    assert result.exit_code == 0
    assert "eval.method" in result.output
    assert "eval.n_particles" in result.output
    assert "--truth-model" in result.output
    assert "io.output_dir" in invoke("gen", "--help").output


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as tmpdir:
        test_gen(tmpdir)
