import json
import os

import numpy as np
import pandas as pd
import pytest

from core.configclass import ExperimentConfig, load_experiment_config, validate_model
from core.exception import ConfigValidationError, PlotInputError
from lib.common import file_sha256
from lib.harness import SNAPSHOT_FILE, build_model, load_dataset, read_registry, run, sweep
from lib.network import NetworkModel, QuadraticModel
from lib.plot import padded_range, plot
from lib.regularity import EPOCH_COLUMNS, FAIL, PASS, PRINCIPLE_UNSATISFIED
from lib.trajectory_format import deserialize
from tests.conftest import experiment, quadratic_experiment

EXPERIMENTS_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "experiments")
VERDICTS_WITHOUT_FAIL = (PASS, PRINCIPLE_UNSATISFIED)


def epoch_frame(losses, rates):
    return pd.DataFrame({
        "epoch": np.arange(len(losses)),
        "mean_loss": losses,
        "median_gamma": np.ones(len(losses)),
        "median_rate_factor": rates,
        "violations": np.zeros(len(losses), dtype=int),
    })


def test_minimal_run_writes_all_artifacts(tmp_path):
    artifacts = run(experiment(), str(tmp_path / "tiny"))
    assert artifacts.status in VERDICTS_WITHOUT_FAIL
    for path in (artifacts.trajectory, artifacts.report, artifacts.epoch_csv, artifacts.loss_svg,
                 artifacts.rate_factor_svg, artifacts.snapshot):
        assert os.path.isfile(path), path
    epochs = pd.read_csv(artifacts.epoch_csv)
    assert list(epochs.columns) == EPOCH_COLUMNS and len(epochs) == 2

    with open(artifacts.snapshot, encoding="UTF-8") as file:
        snapshot = json.load(file)
    assert snapshot["environment"]["compute_dtype"] == "f64"
    assert snapshot["environment"]["numpy_version"] == np.__version__

    registry = read_registry(str(tmp_path / "index.json"))
    assert len(registry) == 1
    assert registry[0]["trajectory_sha256"] == file_sha256(artifacts.trajectory)


def test_rerun_from_snapshot_is_bit_identical(tmp_path):
    first = run(experiment(), str(tmp_path / "first"), write_plots=False)
    config = load_experiment_config(os.path.join(first.run_dir, SNAPSHOT_FILE))
    second = run(config, str(tmp_path / "second"), write_plots=False)
    assert file_sha256(first.trajectory) == file_sha256(second.trajectory)
    assert first.status == second.status and first.status in VERDICTS_WITHOUT_FAIL
    assert len(read_registry(str(tmp_path / "index.json"))) == 2


def test_quadratic_run_passes(tmp_path):
    artifacts = run(quadratic_experiment(epochs=100), str(tmp_path / "quadratic"), write_plots=False)
    assert artifacts.status == PASS
    assert artifacts.gamma_min == pytest.approx(1.9, abs=1e-3)


def test_non_positive_eta_is_rejected():
    data = experiment().model_dump(mode="json")
    data["optimizer"]["eta"] = 0.0
    with pytest.raises(ConfigValidationError):
        validate_model(ExperimentConfig, data)


def test_sweep_over_skip_mode(tmp_path):
    config = experiment(sweep={"skip_mode": ["all", "none"]})
    result = sweep(config, str(tmp_path / "skip"))
    assert result.axis == "skip_mode" and len(result.runs) == 2
    assert os.path.isdir(tmp_path / "skip" / "all") and os.path.isdir(tmp_path / "skip" / "none")
    comparison = pd.read_csv(result.comparison_csv, keep_default_na=False)
    assert list(comparison.columns) == ["skip_mode", *EPOCH_COLUMNS]
    assert sorted(set(comparison["skip_mode"])) == ["all", "none"]
    assert len(comparison) == 4
    assert os.path.isfile(result.loss_svg) and os.path.isfile(result.rate_factor_svg)
    assert all(child.status in VERDICTS_WITHOUT_FAIL for child in result.runs)

    xi_streams = [[record.xi for record in deserialize(child.trajectory).steps] for child in result.runs]
    assert len(xi_streams[0]) == 8
    assert xi_streams[0] == xi_streams[1]


def test_sweep_axis_validation():
    data = experiment().model_dump(mode="json")
    data["sweep"] = {"activation": ["relu", "tanh"], "bn_mode": ["all", "none"]}
    with pytest.raises(ConfigValidationError):
        validate_model(ExperimentConfig, data)
    with pytest.raises(ConfigValidationError):
        sweep(experiment())


def test_with_axis_keeps_seeds():
    config = experiment(sweep={"optimizer": ["sgd", "adam"]}).with_seed(7)
    child = config.with_axis("optimizer", "adam")
    assert child.optimizer.kind == "adam" and child.optimizer.eta == config.optimizer.eta
    assert child.seeds == config.seeds and child.sweep is None
    assert child.name == "tiny-optimizer-adam"


def test_build_model_families(tmp_path):
    config = experiment(data={"kind": "random_regression", "n": 32, "dims": 3, "outputs": 2,
                              "batch_size": 8, "task": "regression"})
    dataset = load_dataset(config.data, 0)
    model = build_model(config, dataset)
    assert isinstance(model, NetworkModel)
    assert model.spec.loss_kind == "mse" and model.spec.layer_shapes()[-1] == (2,)
    assert isinstance(build_model(quadratic_experiment(), dataset), QuadraticModel)

    cnn = experiment(model={"family": "residual_cnn", "channels": 2, "blocks": 1})
    with pytest.raises(ConfigValidationError):
        build_model(cnn, load_dataset(cnn.data, 0))
    with pytest.raises(ConfigValidationError):
        run(cnn, str(tmp_path / "cnn"))
    assert not os.path.exists(tmp_path / "cnn")


def test_plot_two_csvs(tmp_path):
    paths = []
    for name, scale in (("relu", 1.0), ("sigmoid", 2.0)):
        path = tmp_path / f"{name}.csv"
        epoch_frame(scale * np.array([1.0, 0.5, 0.25]), [0.1, 0.2, 0.3]).to_csv(path, index=False)
        paths.append(str(path))
    result = plot(paths, str(tmp_path / "plots"))
    assert result.labels == ["relu", "sigmoid"]
    svg = open(result.loss_svg, encoding="UTF-8").read()
    assert "relu" in svg and "sigmoid" in svg
    assert result.y_ranges["loss"] == pytest.approx(padded_range([0.25, 2.0]))
    assert plot(paths, str(tmp_path / "log"), log_scale=True).y_ranges["loss"][0] > 0


def test_padded_range():
    assert padded_range([0.0, 10.0]) == pytest.approx((-0.5, 10.5))
    low, high = padded_range([1.0, 100.0], log_scale=True)
    assert low == pytest.approx(10 ** -0.1) and high == pytest.approx(10 ** 2.1)


def test_plot_rejects_empty_csv(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(PlotInputError) as info:
        plot([str(empty)], str(tmp_path))
    assert info.value.path == str(empty)

    header_only = tmp_path / "header.csv"
    header_only.write_text(",".join(EPOCH_COLUMNS) + "\n")
    with pytest.raises(PlotInputError) as info:
        plot([str(header_only)], str(tmp_path))
    assert "header.csv" in str(info.value)


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(os.listdir(EXPERIMENTS_DIR)))
def test_bundled_experiments_never_fail_bound(tmp_path, name):
    """예제 설정을 2 epoch 로 줄여 실행해도 판정은 FAIL 이 아니다."""
    config = load_experiment_config(os.path.join(EXPERIMENTS_DIR, name)).model_copy(update={"epochs": 2})
    if config.sweep:
        runs = sweep(config, str(tmp_path / "sweep"), write_plots=False).runs
    else:
        runs = [run(config, str(tmp_path / "run"), write_plots=False)]
    for artifacts in runs:
        assert artifacts.status != FAIL, artifacts.run_dir
        assert artifacts.status in VERDICTS_WITHOUT_FAIL


@pytest.mark.slow
def test_directional_reproduction(tmp_path):
    """ReLU > sigmoid, BN 유지 > 제거, Adam > SGD 방향성 (3 seed 중 2 이상)"""

    def median_rate(artifacts):
        return float(pd.read_csv(artifacts.epoch_csv)["median_rate_factor"].median())

    def final_loss(artifacts):
        return float(pd.read_csv(artifacts.epoch_csv)["mean_loss"].iloc[-1])

    wins = {"activation": 0, "bn_mode": 0, "optimizer": 0}
    for seed in range(3):
        base = experiment(
            name=f"directional-{seed}",
            data={"kind": "two_spirals", "n": 512, "batch_size": 128},
            model={"family": "residual_mlp", "width": 32, "blocks": 2},
            optimizer={"kind": "sgd", "eta": 0.05},
            epochs=30,
        ).with_seed(seed)
        act = sweep(base.model_copy(update={"sweep": {"activation": ["relu", "sigmoid"]}}),
                    str(tmp_path / f"act{seed}"), write_plots=False).runs
        if final_loss(act[0]) < final_loss(act[1]) and median_rate(act[0]) > median_rate(act[1]):
            wins["activation"] += 1
        bn = sweep(base.model_copy(update={"sweep": {"bn_mode": ["all", "none"]}}),
                   str(tmp_path / f"bn{seed}"), write_plots=False).runs
        if median_rate(bn[0]) > median_rate(bn[1]):
            wins["bn_mode"] += 1
        slow_base = base.model_copy(update={"optimizer": base.optimizer.model_copy(update={"eta": 0.001}),
                                            "sweep": {"optimizer": ["adam", "sgd"]}})
        opt = sweep(slow_base, str(tmp_path / f"opt{seed}"), write_plots=False).runs
        if median_rate(opt[0]) > median_rate(opt[1]):
            wins["optimizer"] += 1
    assert all(count >= 2 for count in wins.values()), wins
