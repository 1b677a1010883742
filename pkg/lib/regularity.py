"""regularity principle 측정과 평균 손실 bound 검증

반복 k 의 γ 상한:

    γ_k = (⟨θ_k − θ_T, U_k⟩ − (η/2)‖U_k‖²) / (ℓ_k − inf ℓ)

궤적 전체의 γ 는 유효 스텝(gap > gap_tolerance)에서의 최솟값이고,
수렴률 계수는 γ / ‖θ_0 − θ_T‖² 이다.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from core.configclass import AnalyzerConfig
from core.exception import AnalysisError, ConfigValidationError
from core.models import Dataset, TrajectoryLog
from lib.common import write_json
from lib.exec_time import timeit
from lib.network import Model
from lib.trajectory import iterate_trajectory

logger = logging.getLogger(__name__)

BOUND_RTOL = 1e-6
TELESCOPE_RTOL = 1e-9

PASS = "PASS"
FAIL = "FAIL"
PRINCIPLE_UNSATISFIED = "PRINCIPLE_UNSATISFIED"
NOT_APPLICABLE = "NOT_APPLICABLE"
NO_VALID_STEPS = "NO_VALID_STEPS"

EPOCH_COLUMNS = ["epoch", "mean_loss", "median_gamma", "median_rate_factor", "violations"]


@dataclass
class RegularityReport:
    eta: float
    T: int
    n_batches: int
    epochs: int
    loss_infimum: float
    gap_tolerance: float
    losses: np.ndarray
    coherence: np.ndarray
    update_sq_norm: np.ndarray
    residual: np.ndarray
    gamma_series: np.ndarray
    valid: np.ndarray
    rate_factor_series: np.ndarray
    traj_sq_dist: float
    avg_loss_gap: float
    epoch_sq_dist: np.ndarray
    gamma_min: Optional[float] = None
    violation_fraction: Optional[float] = None
    bound_rhs: Optional[float] = None
    bound_holds: Optional[bool] = None
    skipped: int = 0
    degenerate_violations: int = 0
    window_epochs: Optional[int] = None
    per_epoch_summaries: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def has_valid_steps(self) -> bool:
        return self.gamma_min is not None

    @property
    def principle_satisfied(self) -> bool:
        """모든 유효 스텝에서 γ_k > 0 이고 건너뛴 스텝에서 잔차가 음수가 아닌 경우"""
        return self.has_valid_steps and self.gamma_min > 0 and self.degenerate_violations == 0

    @property
    def rate_factor(self) -> Optional[float]:
        if self.gamma_min is None or self.traj_sq_dist == 0:
            return None
        return self.gamma_min / self.traj_sq_dist


@dataclass
class BoundVerdict:
    status: str
    avg_loss_gap: float
    bound_rhs: Optional[float] = None
    slack: Optional[float] = None
    telescoping_ok: Optional[bool] = None
    worst_epoch_excess: Optional[float] = None
    detail: str = ""

    @property
    def failed(self) -> bool:
        return self.status == FAIL


def principle_slack(coherence: float, update_sq_norm: float, gap: float, eta: float, gamma: float) -> float:
    """⟨θ_k−θ_T, U_k⟩ − (η/2)‖U_k‖² − γ·gap (0 이상이면 부등식이 성립)"""
    return coherence - 0.5 * eta * update_sq_norm - gamma * gap


def theorem_bound_rhs(traj_sq_dist: float, eta: float, gamma: float, T: int) -> float:
    """‖θ_0 − θ_T‖² / (2ηγT)"""
    if gamma <= 0:
        raise ValueError("bound 는 γ > 0 에서만 정의됩니다.")
    return traj_sq_dist / (2.0 * eta * gamma * T)


def _step_terms(theta_k: np.ndarray, theta_T: np.ndarray, update: np.ndarray):
    return float(np.dot(theta_k - theta_T, update)), float(np.dot(update, update))


def gamma_step(theta_k, theta_T, U_k, loss_k: float, eta: float, cfg: AnalyzerConfig,
               step: Optional[int] = None) -> Optional[float]:
    """반복 하나의 γ 상한 (gap ≤ gap_tolerance 이면 None)

    Raises:
        AnalysisError: 중간값이 유한하지 않은 경우
    """
    theta_k, theta_T, U_k = (np.asarray(v, dtype=np.float64) for v in (theta_k, theta_T, U_k))
    coherence, update_sq = _step_terms(theta_k, theta_T, U_k)
    return _gamma_from_terms(coherence, update_sq, loss_k, eta, cfg, step)


def _gamma_from_terms(coherence, update_sq, loss_k, eta, cfg, step) -> Optional[float]:
    gap = loss_k - cfg.loss_infimum
    if not (np.isfinite(coherence) and np.isfinite(update_sq) and np.isfinite(gap)):
        raise AnalysisError("γ 계산 중 유한하지 않은 값이 발생했습니다.", step=step)
    if gap <= cfg.gap_tolerance:
        return None
    gamma = (coherence - 0.5 * eta * update_sq) / gap
    if not np.isfinite(gamma):
        raise AnalysisError("γ 값이 유한하지 않습니다.", step=step)
    return gamma


def _window_end(log: TrajectoryLog, cfg: AnalyzerConfig) -> int:
    if cfg.window_epochs is None:
        return len(log.steps)
    if cfg.window_epochs > log.meta.epochs:
        raise ConfigValidationError("window_epochs 가 학습 epoch 수보다 큽니다.",
                                    {"window_epochs": cfg.window_epochs, "epochs": log.meta.epochs})
    return cfg.window_epochs * log.meta.n_batches


def _theta_at(log: TrajectoryLog, end: int, dataset, model) -> np.ndarray:
    if end == len(log.steps):
        return log.thetaT
    if end in log.checkpoints:
        return log.checkpoints[end]
    found = {}

    def capture(k, theta, update, loss):
        if k == end:
            found["theta"] = np.array(theta, copy=True)

    iterate_trajectory(log, capture, dataset, model)
    return found["theta"]


@timeit
def analyze(log: TrajectoryLog, cfg: AnalyzerConfig, dataset: Optional[Dataset] = None,
            model: Optional[Model] = None) -> RegularityReport:
    """궤적 전체(또는 앞쪽 window_epochs epoch)에 대해 γ_k 를 계산하고 보고서를 만든다.

    f64 로 저장된 update 가 있으면 그대로 쓰고, 없으면 replay 로 U_k 를 재생성한다.

    Raises:
        ReplayDivergenceError: replay 결과가 기록과 다른 경우
        AnalysisError: 유한하지 않은 중간값
    """
    eta = log.meta.eta
    n_batches = log.meta.n_batches
    end = _window_end(log, cfg)
    theta_T = _theta_at(log, end, dataset, model)

    coherence = np.full(end, np.nan)
    update_sq = np.full(end, np.nan)
    epoch_sq_dist = []

    def visit(k, theta, update, loss):
        if k % n_batches == 0 and k <= end:
            diff = theta - theta_T
            epoch_sq_dist.append(float(np.dot(diff, diff)))
        if k < end:
            coherence[k], update_sq[k] = _step_terms(theta, theta_T, update)

    iterate_trajectory(log, visit, dataset, model)
    if end % n_batches == 0 and len(epoch_sq_dist) == end // n_batches:
        epoch_sq_dist.append(0.0)

    losses = log.losses()[:end]
    gaps = losses - cfg.loss_infimum
    gammas = np.full(end, np.nan)
    for k in range(end):
        gamma = _gamma_from_terms(coherence[k], update_sq[k], losses[k], eta, cfg, k)
        if gamma is not None:
            gammas[k] = gamma
    valid = ~np.isnan(gammas)
    residual = coherence - 0.5 * eta * update_sq

    diff0 = log.theta0 - theta_T
    traj_sq_dist = float(np.dot(diff0, diff0))
    rate_factor = gammas / traj_sq_dist if traj_sq_dist > 0 else np.full(end, np.nan)

    report = RegularityReport(
        eta=eta,
        T=end,
        n_batches=n_batches,
        epochs=end // n_batches,
        loss_infimum=cfg.loss_infimum,
        gap_tolerance=cfg.gap_tolerance,
        losses=losses,
        coherence=coherence,
        update_sq_norm=update_sq,
        residual=residual,
        gamma_series=gammas,
        valid=valid,
        rate_factor_series=rate_factor,
        traj_sq_dist=traj_sq_dist,
        avg_loss_gap=float(np.mean(gaps)) if end else float("nan"),
        epoch_sq_dist=np.array(epoch_sq_dist),
        skipped=int(np.count_nonzero(~valid)),
        degenerate_violations=int(np.count_nonzero(~valid & (residual < 0))),
        window_epochs=cfg.window_epochs,
    )
    if valid.any():
        valid_gammas = gammas[valid]
        report.gamma_min = float(valid_gammas.min())
        report.violation_fraction = float(np.mean(valid_gammas <= 0))
        if report.gamma_min > 0:
            report.bound_rhs = theorem_bound_rhs(traj_sq_dist, eta, report.gamma_min, end)
            report.bound_holds = bool(report.avg_loss_gap <= _bound_limit(report))
    else:
        logger.warning("No valid steps: every loss gap is within gap_tolerance")
    report.per_epoch_summaries = epoch_rollup(report).to_dict(orient="records")
    logger.info(f"Analyzed {end} steps: gamma_min={report.gamma_min}, skipped={report.skipped}, "
                f"violation_fraction={report.violation_fraction}")
    return report


def _bound_limit(report: RegularityReport) -> float:
    """평균 손실 gap 의 허용 상한: bound_rhs·(1+1e-6) + gap_tolerance·skipped/T

    건너뛴 스텝(gap ≤ gap_tolerance)은 γ_min 계산에서 빠지지만 평균 손실에는 gap_tolerance 이하로 더해진다.
    """
    return report.bound_rhs * (1.0 + BOUND_RTOL) + report.gap_tolerance * report.skipped / report.T


def telescoping_excess(report: RegularityReport) -> np.ndarray:
    """각 epoch 경계 P 에서 ‖θ_{nP}−θ_T‖² − (‖θ_0−θ_T‖² − 2ηγ Σ_{k<nP, valid} gap_k)"""
    gaps = np.where(report.valid, report.losses - report.loss_infimum, 0.0)
    partial = np.concatenate([[0.0], np.cumsum(gaps)])
    boundaries = np.arange(len(report.epoch_sq_dist)) * report.n_batches
    bound = report.traj_sq_dist - 2.0 * report.eta * report.gamma_min * partial[boundaries]
    return report.epoch_sq_dist - bound


def verify_theorem_bound(report: RegularityReport, log: TrajectoryLog) -> BoundVerdict:
    """평균 손실 bound 와 epoch 단위 telescoping 부등식을 검사한다.

    γ_min 은 모든 유효 스텝에서 부등식을 만족하므로 정상 구현에서는 항상 PASS 이다.
    """
    verdict = BoundVerdict(NOT_APPLICABLE, report.avg_loss_gap)
    if not log.meta.t_matches_nb or report.T != report.n_batches * report.epochs:
        verdict.detail = f"T={report.T} 이 n·B 가 아닙니다."
        return verdict
    if not report.has_valid_steps:
        verdict.status = NO_VALID_STEPS
        verdict.detail = "모든 스텝의 손실 gap 이 허용 오차 이하입니다."
        return verdict
    if not report.principle_satisfied:
        verdict.status = PRINCIPLE_UNSATISFIED
        verdict.detail = (f"gamma_min={report.gamma_min}, "
                          f"degenerate_violations={report.degenerate_violations}; bound 는 공허합니다.")
        return verdict

    verdict.bound_rhs = report.bound_rhs
    verdict.slack = report.bound_rhs / report.avg_loss_gap if report.avg_loss_gap > 0 else float("inf")
    average_ok = report.avg_loss_gap <= _bound_limit(report)
    excess = telescoping_excess(report)
    scale = TELESCOPE_RTOL * (1.0 + report.traj_sq_dist)
    verdict.worst_epoch_excess = float(excess.max()) if excess.size else 0.0
    verdict.telescoping_ok = bool(np.all(excess <= scale))
    verdict.status = PASS if average_ok and verdict.telescoping_ok else FAIL
    if verdict.failed:
        verdict.detail = f"average_ok={average_ok}, worst_epoch_excess={verdict.worst_epoch_excess:.3e}"
        logger.error(f"Bound verification FAILED: {verdict.detail}")
    return verdict


def epoch_rollup(report: RegularityReport) -> pd.DataFrame:
    """epoch 별 평균 손실, γ_k 중앙값, 수렴률 계수 중앙값, 위반(γ_k ≤ 0) 수"""
    steps = np.arange(report.T)
    frame = pd.DataFrame({
        "epoch": steps // report.n_batches,
        "loss": report.losses,
        "gamma": report.gamma_series,
        "rate_factor": report.rate_factor_series,
        "violation": report.valid & (np.nan_to_num(report.gamma_series, nan=1.0) <= 0),
    })
    rollup = frame.groupby("epoch", sort=True).agg(
        mean_loss=("loss", "mean"),
        median_gamma=("gamma", "median"),
        median_rate_factor=("rate_factor", "median"),
        violations=("violation", "sum"),
    ).reset_index()
    rollup["violations"] = rollup["violations"].astype(int)
    return rollup[EPOCH_COLUMNS]


def _series(values: np.ndarray) -> List[Optional[float]]:
    return [None if np.isnan(value) else float(value) for value in values]


def report_to_dict(report: RegularityReport, verdict: Optional[BoundVerdict] = None) -> Dict[str, Any]:
    """JSON 으로 기록할 수 있는 dict (NaN 은 null)"""
    data = {
        "eta": report.eta,
        "T": report.T,
        "n_batches": report.n_batches,
        "epochs": report.epochs,
        "loss_infimum": report.loss_infimum,
        "gap_tolerance": report.gap_tolerance,
        "window_epochs": report.window_epochs,
        "gamma_min": report.gamma_min,
        "principle_satisfied": report.principle_satisfied,
        "violation_fraction": report.violation_fraction,
        "skipped": report.skipped,
        "degenerate_violations": report.degenerate_violations,
        "traj_sq_dist": report.traj_sq_dist,
        "rate_factor": report.rate_factor,
        "avg_loss_gap": report.avg_loss_gap,
        "bound_rhs": report.bound_rhs,
        "bound_holds": report.bound_holds,
        "losses": _series(report.losses),
        "gamma_series": _series(report.gamma_series),
        "valid": [bool(v) for v in report.valid],
        "rate_factor_series": _series(report.rate_factor_series),
        "coherence": _series(report.coherence),
        "residual": _series(report.residual),
        "epoch_sq_dist": _series(report.epoch_sq_dist),
        "per_epoch_summaries": [
            {key: (None if isinstance(value, float) and np.isnan(value) else value) for key, value in row.items()}
            for row in report.per_epoch_summaries
        ],
    }
    if verdict is not None:
        data["verdict"] = {
            "status": verdict.status,
            "avg_loss_gap": verdict.avg_loss_gap,
            "bound_rhs": verdict.bound_rhs,
            "slack": verdict.slack,
            "telescoping_ok": verdict.telescoping_ok,
            "worst_epoch_excess": verdict.worst_epoch_excess,
            "detail": verdict.detail,
        }
    return data


def write_report(report: RegularityReport, path: str, verdict: Optional[BoundVerdict] = None) -> None:
    write_json(path, report_to_dict(report, verdict))


def write_epoch_csv(report: RegularityReport, path: str) -> pd.DataFrame:
    rollup = epoch_rollup(report)
    rollup.to_csv(path, index=False)
    return rollup
