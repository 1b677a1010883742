"""실험 실행기: run (기록 → 분석 → bound 검증 → epoch 요약 → 파일 기록) 과 단일 축 sweep"""
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from cachetools import LRUCache, cached
from filelock import FileLock

from core.configclass import AnalyzerConfig, ExperimentConfig, validate_model
from core.exception import ConfigValidationError
from core.models import Dataset
from core.settings import RuntimeSetting
from lib.common import file_sha256, make_directory, read_version, write_json
from lib.network import (
    Model, NetworkModel, QuadraticModel, build_plain_mlp, build_residual_cnn, build_residual_mlp
)
from lib.plot import plot
from lib.regularity import (
    BoundVerdict, RegularityReport, analyze, verify_theorem_bound, write_epoch_csv, write_report
)
from lib.sampling import dataset_from_config
from lib.trajectory import attach_coherence, record_run
from lib.trajectory_format import deserialize, serialize

logger = logging.getLogger(__name__)

REGISTRY_FILE = "index.json"
SNAPSHOT_FILE = "config.resolved.json"


@dataclass
class RunArtifacts:
    run_dir: str
    trajectory: str
    report: str
    epoch_csv: str
    loss_svg: Optional[str]
    rate_factor_svg: Optional[str]
    snapshot: str
    status: str
    gamma_min: Optional[float] = None
    rate_factor: Optional[float] = None
    final_loss: Optional[float] = None


@dataclass
class SweepArtifacts:
    sweep_dir: str
    axis: str
    values: List[str]
    runs: List[RunArtifacts]
    comparison_csv: str
    loss_svg: str
    rate_factor_svg: str


# ---------------------------------------------------------------------------
# 데이터/모델 구성
# ---------------------------------------------------------------------------
@cached(cache=LRUCache(maxsize=8))
def load_dataset(data, seed: int, image_shape: Optional[Tuple[int, ...]] = None) -> Dataset:
    """같은 (data, seed, image_shape) 데이터셋은 프로세스 안에서 한 번만 만든다."""
    return dataset_from_config(data, seed, image_shape)


def _output_size(dataset: Dataset) -> int:
    if dataset.task == "classification":
        return int(dataset.num_classes)
    return int(dataset.targets.shape[1]) if dataset.targets.ndim == 2 else 1


def build_model(config: ExperimentConfig, dataset: Dataset) -> Model:
    """ModelConfig 의 family 와 ablation 축으로 모델을 만든다."""
    model = config.model
    if model.family == "quadratic":
        return QuadraticModel(model.quadratic_dim, model.quadratic_theta0)

    loss_kind = model.loss or ("mse" if dataset.task == "regression" else "cross_entropy_softmax")
    outputs = _output_size(dataset)
    common = dict(activation=model.activation, slope=model.leaky_slope, loss_kind=loss_kind)
    if model.family == "residual_cnn":
        if dataset.inputs.ndim != 4:
            raise ConfigValidationError("residual_cnn 에는 model.image_shape 가 필요합니다.")
        spec = build_residual_cnn(tuple(dataset.inputs.shape[1:]), outputs, model.channels, model.blocks,
                                  model.blocks_per_stage, bn_mode=model.bn_mode, skip_mode=model.skip_mode,
                                  skip_count=model.skip_count, **common)
    elif model.family == "plain_mlp":
        spec = build_plain_mlp(dataset.inputs.shape[1], outputs, model.width, model.blocks,
                               batch_norm=model.bn_mode != "none", **common)
    else:
        spec = build_residual_mlp(dataset.inputs.shape[1], outputs, model.width, model.blocks,
                                  model.blocks_per_stage, bn_mode=model.bn_mode, skip_mode=model.skip_mode,
                                  skip_count=model.skip_count, **common)
    return NetworkModel(spec)


def resolve_run_dir(config: ExperimentConfig, out_dir: Optional[str] = None) -> str:
    return out_dir or config.output_dir or os.path.join(RuntimeSetting().runs_dir, config.name)


def resolved_snapshot(config: ExperimentConfig) -> Dict[str, Any]:
    """실행을 그대로 재현하는 설정 + 라이브러리 버전, dtype"""
    return {
        "config": config.model_dump(mode="json"),
        "environment": {
            "trajlens_version": read_version(),
            "numpy_version": np.__version__,
            "compute_dtype": "f64",
            "storage_dtype": config.storage.dtype,
        },
    }


# ---------------------------------------------------------------------------
# registry (runs/index.json)
# ---------------------------------------------------------------------------
def read_registry(path: str) -> List[Dict[str, Any]]:
    if not os.path.isfile(path):
        return []
    with FileLock(f"{path}.lock", timeout=5):
        with open(path, "r", encoding="UTF-8") as file:
            try:
                return json.load(file)
            except json.JSONDecodeError as e:
                logger.critical(f"{path} json validate error, registry ignored: {e}")
                return []


def update_registry(path: str, entry: Dict[str, Any]) -> None:
    """run_dir 가 같은 항목은 교체하고 나머지는 유지한다."""
    with FileLock(f"{path}.lock", timeout=5):
        entries = []
        if os.path.isfile(path):
            with open(path, "r", encoding="UTF-8") as file:
                try:
                    entries = json.load(file)
                except json.JSONDecodeError:
                    logger.critical(f"{path} json validate error, registry rebuilt.")
        entries = [item for item in entries if item.get("run_dir") != entry["run_dir"]]
        entries.append(entry)
        with open(path, "w", encoding="UTF-8") as file:
            json.dump(entries, file, indent=4, ensure_ascii=False)


# ---------------------------------------------------------------------------
# run / sweep
# ---------------------------------------------------------------------------
def run(config: ExperimentConfig, out_dir: Optional[str] = None, write_plots: bool = True) -> RunArtifacts:
    """record_run → analyze → verify_theorem_bound → epoch_rollup 을 실행하고 산출물을 기록한다.

    Raises:
        DivergenceError: 학습이 발산한 경우
        ConfigValidationError: 설정 조합이 잘못된 경우
    """
    image_shape = config.model.image_shape if config.model.family == "residual_cnn" else None
    if config.model.family == "residual_cnn" and image_shape is None:
        raise ConfigValidationError("residual_cnn 에는 model.image_shape 가 필요합니다.")
    dataset = load_dataset(config.data, config.seeds.data_seed, image_shape)
    model = build_model(config, dataset)

    run_dir = resolve_run_dir(config, out_dir)
    make_directory(run_dir)
    logger.info(f"Run {config.name} started -> {run_dir}")

    log = record_run(model, config.training_config(), dataset)
    report = analyze(log, config.analyzer, dataset, model)
    verdict = verify_theorem_bound(report, log)
    logger.info(f"Run {config.name} verdict: {verdict.status} (gamma_min={report.gamma_min})")
    attach_coherence(log, report.coherence)

    paths = {
        "trajectory": os.path.join(run_dir, "trajectory.trj"),
        "report": os.path.join(run_dir, "report.json"),
        "epoch_csv": os.path.join(run_dir, "epochs.csv"),
        "snapshot": os.path.join(run_dir, SNAPSHOT_FILE),
    }
    serialize(log, paths["trajectory"])
    write_report(report, paths["report"], verdict)
    write_epoch_csv(report, paths["epoch_csv"])
    write_json(paths["snapshot"], resolved_snapshot(config))

    loss_svg = rate_svg = None
    if write_plots:
        result = plot([paths["epoch_csv"]], run_dir, labels=[config.name])
        loss_svg, rate_svg = result.loss_svg, result.rate_factor_svg

    artifacts = RunArtifacts(
        run_dir=run_dir,
        loss_svg=loss_svg,
        rate_factor_svg=rate_svg,
        status=verdict.status,
        gamma_min=report.gamma_min,
        rate_factor=report.rate_factor,
        final_loss=float(report.losses[-1]) if report.T else None,
        **paths,
    )
    update_registry(os.path.join(os.path.dirname(os.path.abspath(run_dir)), REGISTRY_FILE), {
        "name": config.name,
        "run_dir": os.path.abspath(run_dir),
        "trajectory_sha256": file_sha256(paths["trajectory"]),
        "status": verdict.status,
        "gamma_min": report.gamma_min,
        "rate_factor": report.rate_factor,
        "final_loss": artifacts.final_loss,
    })
    return artifacts


def _run_child(config_data: Dict[str, Any], out_dir: str, write_plots: bool) -> RunArtifacts:
    return run(validate_model(ExperimentConfig, config_data), out_dir, write_plots)


def sweep(config: ExperimentConfig, out_dir: Optional[str] = None, write_plots: bool = True) -> SweepArtifacts:
    """하나의 축만 바꾸며 같은 seed 로 여러 run 을 실행하고 비교 CSV/SVG 를 만든다.

    Raises:
        ConfigValidationError: sweep 축이 없거나 둘 이상인 경우
    """
    if not config.sweep or len(config.sweep) != 1:
        raise ConfigValidationError("sweep 은 정확히 하나의 축을 지정해야 합니다.",
                                    {"axes": sorted(config.sweep or {})})
    axis = config.sweep_axis
    values = list(config.sweep[axis])
    sweep_dir = resolve_run_dir(config, out_dir)
    make_directory(sweep_dir)
    children = [config.with_axis(axis, value) for value in values]
    child_dirs = [os.path.join(sweep_dir, str(value)) for value in values]

    workers = min(RuntimeSetting().threads, len(children))
    logger.info(f"Sweep {config.name} over {axis}={values} with {workers} worker(s)")
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(_run_child, child.model_dump(mode="json"), child_dir, write_plots)
                       for child, child_dir in zip(children, child_dirs)]
            runs = [future.result() for future in futures]
    else:
        runs = [run(child, child_dir, write_plots) for child, child_dir in zip(children, child_dirs)]

    frames = []
    for value, artifacts in zip(values, runs):
        frame = pd.read_csv(artifacts.epoch_csv)
        frame.insert(0, axis, value)
        frames.append(frame)
    comparison_csv = os.path.join(sweep_dir, "comparison.csv")
    pd.concat(frames, ignore_index=True).to_csv(comparison_csv, index=False)

    result = plot([artifacts.epoch_csv for artifacts in runs], sweep_dir, labels=values)
    for value, artifacts in zip(values, runs):
        logger.info(f"  {axis}={value}: {artifacts.status}, gamma_min={artifacts.gamma_min}, "
                    f"rate_factor={artifacts.rate_factor}, final_loss={artifacts.final_loss}")
    return SweepArtifacts(sweep_dir, axis, values, runs, comparison_csv, result.loss_svg, result.rate_factor_svg)


def reanalyze(trajectory_path: str, config: Optional[ExperimentConfig] = None
              ) -> Tuple[RegularityReport, BoundVerdict]:
    """저장된 궤적 파일을 다시 분석한다. (CLI analyze/verify)"""
    log = deserialize(trajectory_path)
    analyzer = config.analyzer if config is not None else AnalyzerConfig()
    report = analyze(log, analyzer)
    logger.info(f"Reanalyzed {trajectory_path}: T={report.T}, gamma_min={report.gamma_min}")
    return report, verify_theorem_bound(report, log)
