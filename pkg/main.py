import logging
import os
import sys
from functools import wraps

import click
import pandas as pd

from core.configclass import load_experiment_config
from core.exception import TrajlensError
from core.settings import RuntimeSetting
from lib.common import make_directory, read_version
from lib.harness import reanalyze, run, sweep
from lib.plot import label_for, plot, read_epoch_csv
from lib.regularity import FAIL, write_epoch_csv, write_report
from lib.trajectory import check_update_identity, reconstruct_theta_T
from lib.trajectory_format import deserialize

logger = logging.getLogger("trajlens")

EXIT_FAIL = 1
EXIT_ERROR = 2


def handle_errors(func):
    """TrajlensError 는 로그를 남기고 종료 코드 2 로 끝낸다."""

    @wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except TrajlensError as e:
            logger.error(f"{type(e).__name__}: {e}")
            sys.exit(EXIT_ERROR)

    return wrapper


def _load(config_path: str, seed):
    config = load_experiment_config(config_path)
    return config.with_seed(seed) if seed is not None else config


config_option = click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False),
                             help="실험 설정 JSON")
out_option = click.option("--out", "out_dir", default=None, type=click.Path(file_okay=False),
                          help="산출물 디렉토리")
seed_option = click.option("--seed", type=click.IntRange(min=0), default=None,
                           help="init/data/sampler seed 를 모두 이 값으로 덮어쓴다.")


@click.group()
@click.version_option(version=read_version(), prog_name="trajlens")
def cli():
    """trajlens: 최적화 궤적 기록 및 regularity 측정 도구"""
    # .env 의 TRAJLENS_LOG_LEVEL 로 로그 레벨을 설정한다.
    logging.basicConfig(level=RuntimeSetting().log_level,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command("run")
@config_option
@out_option
@seed_option
@handle_errors
def run_command(config_path, out_dir, seed):
    """학습 → 궤적 기록 → 분석 → bound 검증"""
    artifacts = run(_load(config_path, seed), out_dir)
    click.echo(f"{artifacts.status} gamma_min={artifacts.gamma_min} rate_factor={artifacts.rate_factor} "
               f"-> {artifacts.run_dir}")
    if artifacts.status == FAIL:
        sys.exit(EXIT_FAIL)


@cli.command("sweep")
@config_option
@out_option
@seed_option
@handle_errors
def sweep_command(config_path, out_dir, seed):
    """한 축의 값을 바꿔가며 run 을 반복하고 비교 결과를 만든다."""
    result = sweep(_load(config_path, seed), out_dir)
    for value, artifacts in zip(result.values, result.runs):
        click.echo(f"{result.axis}={value}: {artifacts.status} gamma_min={artifacts.gamma_min} "
                   f"rate_factor={artifacts.rate_factor}")
    click.echo(f"comparison -> {result.comparison_csv}")
    if any(artifacts.status == FAIL for artifacts in result.runs):
        sys.exit(EXIT_FAIL)


@cli.command("analyze")
@click.option("--replay", "trajectory_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="trajectory.trj 경로")
@click.option("--config", "config_path", default=None, type=click.Path(dir_okay=False),
              help="analyzer 설정을 읽을 실험 설정 JSON")
@out_option
@handle_errors
def analyze_command(trajectory_path, config_path, out_dir):
    """저장된 궤적을 다시 분석해 report.json, epochs.csv 를 만든다."""
    config = load_experiment_config(config_path) if config_path else None
    report, verdict = reanalyze(trajectory_path, config)
    out_dir = out_dir or os.path.dirname(os.path.abspath(trajectory_path))
    make_directory(out_dir)
    write_report(report, os.path.join(out_dir, "report.json"), verdict)
    write_epoch_csv(report, os.path.join(out_dir, "epochs.csv"))
    click.echo(f"{verdict.status} gamma_min={report.gamma_min} rate_factor={report.rate_factor}")
    if verdict.failed:
        sys.exit(EXIT_FAIL)


@cli.command("plot")
@click.argument("csv_paths", nargs=-1, required=True, type=click.Path(dir_okay=False))
@out_option
@click.option("--format", "output_format", type=click.Choice(["csv", "svg", "both"]), default="svg")
@click.option("--log-scale", is_flag=True, default=False, help="y 축을 log scale 로 그린다.")
@handle_errors
def plot_command(csv_paths, out_dir, output_format, log_scale):
    """epoch CSV 들을 겹쳐 loss.svg, rate_factor.svg 를 그린다."""
    out_dir = out_dir or "."
    make_directory(out_dir)
    if output_format in ("csv", "both"):
        frames = []
        for path in csv_paths:
            frame = read_epoch_csv(path)
            frame.insert(0, "label", label_for(path))
            frames.append(frame)
        merged = os.path.join(out_dir, "comparison.csv")
        pd.concat(frames, ignore_index=True).to_csv(merged, index=False)
        click.echo(merged)
    if output_format in ("svg", "both"):
        result = plot(csv_paths, out_dir, log_scale=log_scale)
        click.echo(result.loss_svg)
        click.echo(result.rate_factor_svg)


@cli.command("verify")
@click.option("--replay", "trajectory_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="trajectory.trj 경로")
@handle_errors
def verify_command(trajectory_path):
    """update 항등식, θ_T 재구성, 평균 손실 bound 를 검사한다."""
    log = deserialize(trajectory_path)
    identity = check_update_identity(log)
    reconstruction = reconstruct_theta_T(log)
    _, verdict = reanalyze(trajectory_path)
    click.echo(f"update_identity max_violation={identity.max_violation:.3e} ok={identity.ok}")
    click.echo(f"reconstruction relative_error={reconstruction.relative_error:.3e} ok={reconstruction.ok}")
    click.echo(f"bound {verdict.status} {verdict.detail}".rstrip())
    if verdict.failed or not identity.ok or not reconstruction.ok:
        sys.exit(EXIT_FAIL)


if __name__ == "__main__":
    cli()
