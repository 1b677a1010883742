"""epoch 별 CSV 로부터 손실/수렴률 계수 곡선 SVG 를 만든다."""
import logging
import os
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

from core.exception import PlotInputError  # noqa: E402
from lib.regularity import EPOCH_COLUMNS  # noqa: E402

logger = logging.getLogger(__name__)

Y_MARGIN = 0.05

# SVG 를 텍스트 그대로, 날짜/랜덤 id 없이 기록한다.
plt.rcParams["svg.fonttype"] = "none"
plt.rcParams["svg.hashsalt"] = "trajlens"

CURVES = {
    "loss": ("mean_loss", "mean training loss"),
    "rate_factor": ("median_rate_factor", "median γ / ‖θ0 − θT‖²"),
}


class PlotResult(NamedTuple):
    loss_svg: str
    rate_factor_svg: str
    labels: List[str]
    y_ranges: Dict[str, Tuple[float, float]]


def read_epoch_csv(path: str) -> pd.DataFrame:
    """epoch CSV 를 읽는다. 비어 있거나 열이 없으면 PlotInputError"""
    try:
        frame = pd.read_csv(path)
    except (pd.errors.EmptyDataError, pd.errors.ParserError, FileNotFoundError) as e:
        raise PlotInputError(f"CSV 를 읽을 수 없습니다: {e}", path) from e
    missing = [column for column in EPOCH_COLUMNS if column not in frame.columns]
    if missing:
        raise PlotInputError(f"CSV 에 필요한 열이 없습니다: {missing}", path)
    if frame.empty:
        raise PlotInputError("CSV 에 데이터 행이 없습니다.", path)
    return frame


def padded_range(values: Sequence[float], log_scale: bool = False) -> Tuple[float, float]:
    """데이터 최소/최대에 범위의 5% 여백을 더한 y 범위"""
    data = np.asarray(values, dtype=np.float64)
    data = data[np.isfinite(data)]
    if log_scale:
        data = data[data > 0]
    if data.size == 0:
        return (0.1, 10.0) if log_scale else (0.0, 1.0)
    if log_scale:
        low, high = np.log10(data.min()), np.log10(data.max())
    else:
        low, high = float(data.min()), float(data.max())
    span = high - low
    if span == 0:
        span = abs(high) if high != 0 else 1.0
    low, high = low - Y_MARGIN * span, high + Y_MARGIN * span
    if log_scale:
        return float(10 ** low), float(10 ** high)
    return float(low), float(high)


def label_for(path: str) -> str:
    """run 디렉토리의 epochs.csv 는 디렉토리 이름, 그 외에는 파일 이름"""
    stem = os.path.splitext(os.path.basename(path))[0]
    if stem == "epochs":
        return os.path.basename(os.path.dirname(os.path.abspath(path)))
    return stem


def _draw(frames, labels, column: str, ylabel: str, log_scale: bool, path: str) -> Tuple[float, float]:
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    collected = []
    for frame, label in zip(frames, labels):
        values = frame[column].to_numpy(dtype=np.float64)
        if log_scale:
            values = np.where(values > 0, values, np.nan)
        collected.append(values)
        ax.plot(frame["epoch"].to_numpy(), values, label=label, linewidth=1.5)
    y_range = padded_range(np.concatenate(collected), log_scale)
    if log_scale:
        ax.set_yscale("log")
    ax.set_ylim(*y_range)
    ax.set_xlabel("epoch")
    ax.set_ylabel(ylabel)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return y_range


def plot(csv_paths: Sequence[str], out_dir: str, labels: Optional[Sequence[str]] = None,
         log_scale: bool = False, prefix: str = "") -> PlotResult:
    """CSV 목록을 겹쳐 그린 loss.svg, rate_factor.svg 를 만든다.

    Args:
        csv_paths: epoch CSV 경로 목록 (epoch 열 공유)
        out_dir: SVG 저장 디렉토리
        labels: 범례 (기본: label_for)
        log_scale: y 축 log scale 여부
        prefix: 파일 이름 앞에 붙일 문자열
    """
    if not csv_paths:
        raise PlotInputError("그릴 CSV 가 없습니다.")
    frames = [read_epoch_csv(path) for path in csv_paths]
    labels = list(labels) if labels else [label_for(path) for path in csv_paths]
    if len(labels) != len(frames):
        raise ValueError("labels 개수가 CSV 개수와 다릅니다.")
    os.makedirs(out_dir, exist_ok=True)

    paths, ranges = {}, {}
    for name, (column, ylabel) in CURVES.items():
        paths[name] = os.path.join(out_dir, f"{prefix}{name}.svg")
        ranges[name] = _draw(frames, labels, column, ylabel, log_scale, paths[name])
    logger.info(f"Wrote {paths['loss']} and {paths['rate_factor']} ({len(frames)} curves)")
    return PlotResult(paths["loss"], paths["rate_factor"], labels, ranges)
