"""데이터셋 생성/로딩과 reshuffle mini-batch 샘플러

batch 구성은 데이터셋 생성 시 한 번 섞은 뒤 고정되며, 샘플러는 epoch 마다
고정된 batch 들의 순서만 섞는다. (초기화 RNG 와 독립된 Philox 스트림 사용)
"""
import gzip
import logging
import re
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np
import pandas as pd

from core.configclass import DataConfig
from core.exception import DataFormatError, DimensionError
from core.models import Batch, Dataset
from lib.network import build_plain_mlp, init_params, predict

logger = logging.getLogger(__name__)

# IDX 타입 코드 → big-endian numpy dtype
IDX_TYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}

SYNTHETIC_KINDS = ("gaussian_blobs", "two_spirals", "random_regression")


# ---------------------------------------------------------------------------
# 합성 데이터
# ---------------------------------------------------------------------------
def regression_teacher(dims: int, outputs: int, seed: int, width: int = 16):
    """random_regression 의 고정 teacher 네트워크 (tanh MLP)

    Returns:
        (NetworkSpec, ParamVector)
    """
    spec = build_plain_mlp(dims, outputs, width=width, depth=1, activation="tanh", loss_kind="mse")
    return spec, init_params(spec, seed)


def make_synthetic(
    kind: str,
    n: int,
    dims: int,
    seed: int,
    classes: int = 2,
    separation: float = 3.0,
    noise: float = 0.0,
    outputs: int = 1,
) -> Dataset:
    """seed 로 결정되는 합성 데이터셋을 만든다.

    Args:
        kind (str): gaussian_blobs | two_spirals | random_regression
        n (int): 샘플 수
        dims (int): 입력 차원 (two_spirals 는 2)
        seed (int): data seed
        classes (int): gaussian_blobs class 수
        separation (float): gaussian_blobs 중심 간 거리 (0 이면 label 과 입력이 무관)
        noise (float): 입력(분류) 또는 target(회귀)에 더하는 gaussian noise 크기
        outputs (int): random_regression 출력 차원

    Returns:
        Dataset: 한 번 섞인 데이터셋
    """
    if n < 1 or dims < 1:
        raise DimensionError("n, dims 는 양수여야 합니다.", {"n": n, "dims": dims})
    rng = np.random.default_rng(seed)

    if kind == "gaussian_blobs":
        directions = rng.normal(size=(classes, dims))
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
        labels = np.arange(n) % classes
        inputs = separation * directions[labels] + rng.normal(size=(n, dims))
        targets, task, num_classes = labels.astype(np.int64), "classification", classes
    elif kind == "two_spirals":
        if dims != 2:
            raise DimensionError("two_spirals 는 2차원 입력만 지원합니다.", {"dims": dims})
        labels = np.arange(n) % 2
        turns = np.sqrt(rng.uniform(0.0, 1.0, size=n)) * 3.0 * np.pi
        angle = turns + np.pi * labels
        radius = turns / (3.0 * np.pi)
        inputs = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
        inputs += noise * rng.normal(size=inputs.shape)
        targets, task, num_classes = labels.astype(np.int64), "classification", 2
    elif kind == "random_regression":
        inputs = rng.normal(size=(n, dims))
        teacher_spec, teacher_params = regression_teacher(dims, outputs, seed)
        targets = predict(teacher_spec, teacher_params, inputs)
        if noise:
            targets = targets + noise * rng.normal(size=targets.shape)
        task, num_classes = "regression", None
    else:
        raise ValueError(f"지원하지 않는 합성 데이터: {kind}")

    order = rng.permutation(n)
    source = {"kind": kind, "n": n, "dims": dims, "seed": seed, "classes": classes,
              "separation": separation, "noise": noise, "outputs": outputs}
    return Dataset(inputs[order], targets[order], task, num_classes, source)


# ---------------------------------------------------------------------------
# IDX / CSV
# ---------------------------------------------------------------------------
def _read_bytes(path: str) -> bytes:
    with open(path, "rb") as file:
        raw = file.read()
    if raw[:2] == b"\x1f\x8b":
        return gzip.decompress(raw)
    return raw


def read_idx(path: str) -> np.ndarray:
    """IDX 파일(big-endian, 선택적 gzip)을 배열로 읽는다.

    Raises:
        DataFormatError: 헤더/본문 오류 (byte offset 포함)
    """
    data = _read_bytes(path)
    if len(data) < 4:
        raise DataFormatError("IDX 헤더가 없습니다.", path, offset=len(data))
    zero, type_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0:
        raise DataFormatError("IDX magic number 가 올바르지 않습니다.", path, offset=0)
    if type_code not in IDX_TYPES:
        raise DataFormatError(f"지원하지 않는 IDX 타입 코드 0x{type_code:02X}", path, offset=2)
    if ndim == 0:
        raise DataFormatError("IDX 차원 수가 0 입니다.", path, offset=3)
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise DataFormatError("IDX 차원 정보가 잘렸습니다.", path, offset=len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header_end])
    dtype = IDX_TYPES[type_code]
    count = int(np.prod(dims, dtype=np.int64))
    body_end = header_end + count * dtype.itemsize
    if len(data) < body_end:
        raise DataFormatError(f"IDX 본문이 잘렸습니다. (필요 {body_end} bytes)", path, offset=len(data))
    if len(data) > body_end:
        raise DataFormatError("IDX 본문 뒤에 남는 데이터가 있습니다.", path, offset=body_end)
    return np.frombuffer(data, dtype=dtype, count=count, offset=header_end).reshape(dims)


def load_idx(path: str, labels_path: str) -> Dataset:
    """IDX 이미지/label 파일 쌍을 읽는다. 이미지는 [N, prod(dims)] 로 펼친다."""
    images = read_idx(path)
    labels = read_idx(labels_path)
    if labels.ndim != 1 or labels.shape[0] != images.shape[0]:
        raise DataFormatError("IDX 이미지 수와 label 수가 다릅니다.", labels_path,
                              offset=4)
    inputs = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == IDX_TYPES[0x08]:
        inputs /= 255.0
    targets = labels.astype(np.int64)
    num_classes = int(targets.max()) + 1 if targets.size else 0
    logger.info(f"Loaded IDX dataset {path}: {inputs.shape[0]} samples, {inputs.shape[1]} features")
    return Dataset(inputs, targets, "classification", num_classes, {"kind": "idx", "path": path,
                                                                     "labels_path": labels_path})


def load_csv(path: str, task: str = "classification") -> Dataset:
    """한 행에 한 샘플, 마지막 열이 target 인 CSV (header 없음)

    Raises:
        DataFormatError: 빈 파일, 열 개수가 다른 행(행 번호 포함), 숫자가 아닌 값
    """
    try:
        frame = pd.read_csv(path, header=None, dtype=np.float64, skip_blank_lines=True)
    except pd.errors.EmptyDataError as e:
        raise DataFormatError("CSV 파일이 비어 있습니다.", path, row=0) from e
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        row = int(match.group(1)) if match else None
        raise DataFormatError("CSV 행의 열 개수가 다릅니다.", path, row=row) from e
    except ValueError as e:
        raise DataFormatError(f"CSV 에 숫자가 아닌 값이 있습니다: {e}", path) from e

    if frame.shape[1] < 2:
        raise DataFormatError("CSV 는 입력 열과 target 열이 필요합니다.", path, row=1)
    ragged = np.flatnonzero(frame.isna().any(axis=1).to_numpy())
    if ragged.size:
        raise DataFormatError("CSV 행의 열 개수가 다릅니다.", path, row=int(ragged[0]) + 1)

    values = frame.to_numpy(dtype=np.float64)
    inputs, raw_targets = values[:, :-1], values[:, -1]
    if task == "classification":
        targets = raw_targets.astype(np.int64)
        if np.any(targets != raw_targets) or np.any(targets < 0):
            raise DataFormatError("분류 target 은 0 이상의 정수여야 합니다.", path)
        num_classes = int(targets.max()) + 1
    else:
        targets, num_classes = raw_targets[:, None], None
    return Dataset(inputs, targets, task, num_classes, {"kind": "csv", "path": path, "task": task})


# ---------------------------------------------------------------------------
# 설정 기반 생성 (harness / replay)
# ---------------------------------------------------------------------------
def dataset_from_config(data: DataConfig, seed: int, image_shape: Optional[Tuple[int, ...]] = None) -> Dataset:
    """DataConfig 로 데이터셋을 만들고 재생성 정보를 source 에 남긴다."""
    if data.kind in SYNTHETIC_KINDS:
        dataset = make_synthetic(data.kind, data.n, data.dims, seed, data.classes,
                                 data.separation, data.noise, data.outputs)
    elif data.kind == "idx":
        dataset = load_idx(data.path, data.labels_path)
    else:
        dataset = load_csv(data.path, data.task)
    if image_shape:
        dataset = dataset.reshape(tuple(image_shape))
    source = {"data": data.model_dump(mode="json"), "seed": seed,
              "image_shape": list(image_shape) if image_shape else None}
    return Dataset(dataset.inputs, dataset.targets, dataset.task, dataset.num_classes, source)


def dataset_from_source(source: Dict[str, Any]) -> Dataset:
    """Dataset.source 로부터 같은 데이터셋을 다시 만든다."""
    if "data" in source:
        return dataset_from_config(DataConfig.model_validate(source["data"]), source["seed"],
                                   source.get("image_shape"))
    kind = source.get("kind")
    if kind in SYNTHETIC_KINDS:
        arguments = {key: value for key, value in source.items() if key != "kind"}
        return make_synthetic(kind, **arguments)
    if kind == "idx":
        return load_idx(source["path"], source["labels_path"])
    if kind == "csv":
        return load_csv(source["path"], source["task"])
    raise DataFormatError(f"데이터셋 source 를 해석할 수 없습니다: {kind}")


# ---------------------------------------------------------------------------
# reshuffle 샘플러
# ---------------------------------------------------------------------------
def epoch_permutation(seed: int, n: int, epoch: int) -> np.ndarray:
    """(seed, epoch) 로 key 된 Philox 스트림의 [0, n) 순열"""
    generator = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, epoch])))
    return generator.permutation(n)


@dataclass
class ReshuffleSampler:
    """random sampling with reshuffle
    - 각 epoch 에서 batch 번호는 [0, n_batches) 의 순열로 한 번씩 나온다.
    """
    n_batches: int
    batch_size: int
    seed: int
    epoch: int = 0
    cursor: int = 0
    order: Optional[np.ndarray] = field(default=None, repr=False)

    def current_order(self) -> np.ndarray:
        if self.order is None:
            self.order = epoch_permutation(self.seed, self.n_batches, self.epoch)
        return self.order

    def advance(self) -> int:
        """현재 batch 번호 ξ 를 반환하고 cursor 를 이동한다."""
        xi = int(self.current_order()[self.cursor])
        self.cursor += 1
        if self.cursor == self.n_batches:
            self.epoch += 1
            self.cursor = 0
            self.order = None
        return xi


def make_sampler(dataset: Dataset, batch_size: int, seed: int) -> ReshuffleSampler:
    return ReshuffleSampler(dataset.n_batches(batch_size), batch_size, seed)


def next_batch(sampler: ReshuffleSampler, dataset: Dataset) -> Batch:
    """현재 epoch 순열의 다음 고정 mini-batch"""
    return dataset.batch(sampler.advance(), sampler.batch_size)
