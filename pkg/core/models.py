"""학습 궤적 분석에서 공유하는 도메인 데이터 클래스"""
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.exception import DimensionError


@dataclass(frozen=True)
class Segment:
    """ParamVector 안에서 하나의 파라미터 배열이 차지하는 구간"""
    name: str
    offset: int
    shape: Tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) if self.shape else 1

    @property
    def end(self) -> int:
        return self.offset + self.size


@dataclass(frozen=True)
class ParamVector:
    """평탄화된 모델 파라미터 θ ∈ R^d 와 segment layout

    values 는 f64 1차원 배열이며 layout 의 segment 들은 겹치지 않고
    [0, d) 를 순서대로 채운다.
    """
    values: np.ndarray
    layout: Tuple[Segment, ...]

    def __post_init__(self):
        if self.values.ndim != 1:
            raise DimensionError("ParamVector values 는 1차원이어야 합니다.", {"shape": self.values.shape})
        end = self.layout[-1].end if self.layout else 0
        if end != self.values.shape[0]:
            raise DimensionError("layout 크기와 values 길이가 다릅니다.",
                                 {"layout": end, "values": self.values.shape[0]})

    @property
    def d(self) -> int:
        return int(self.values.shape[0])

    @property
    def names(self) -> List[str]:
        return [segment.name for segment in self.layout]

    @classmethod
    def flatten(cls, arrays: Sequence[Tuple[str, np.ndarray]]) -> "ParamVector":
        """(이름, 배열) 목록을 순서대로 이어 붙인다."""
        layout = []
        offset = 0
        for name, array in arrays:
            array = np.asarray(array, dtype=np.float64)
            layout.append(Segment(name, offset, tuple(array.shape)))
            offset += array.size
        if arrays:
            values = np.concatenate([np.asarray(a, dtype=np.float64).ravel() for _, a in arrays])
        else:
            values = np.zeros(0, dtype=np.float64)
        return cls(values, tuple(layout))

    def unflatten(self) -> Dict[str, np.ndarray]:
        """segment 이름별 배열 view 를 반환한다. (복사하지 않는다)"""
        return {s.name: self.values[s.offset:s.end].reshape(s.shape) for s in self.layout}

    def get(self, name: str) -> np.ndarray:
        for segment in self.layout:
            if segment.name == name:
                return self.values[segment.offset:segment.end].reshape(segment.shape)
        raise KeyError(name)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        """같은 layout 에 다른 값을 담은 ParamVector"""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise DimensionError("layout 과 길이가 다른 벡터입니다.",
                                 {"expected": self.d, "actual": values.shape})
        return ParamVector(values, self.layout)

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout


@dataclass(frozen=True)
class Batch:
    """mini-batch z_ξ (index 는 epoch 내 batch 번호 ξ)"""
    inputs: np.ndarray
    targets: np.ndarray
    index: int

    @property
    def size(self) -> int:
        return int(self.inputs.shape[0])


@dataclass(frozen=True)
class Dataset:
    """학습 데이터 집합
    - source: 재실행 시 같은 데이터를 다시 만들 수 있는 정보 (없으면 None)
    """
    inputs: np.ndarray
    targets: np.ndarray
    task: str = "classification"
    num_classes: Optional[int] = None
    source: Optional[Dict[str, Any]] = None

    def __post_init__(self):
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise DimensionError("inputs 와 targets 의 샘플 수가 다릅니다.",
                                 {"inputs": self.inputs.shape[0], "targets": self.targets.shape[0]})

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    def n_batches(self, batch_size: int) -> int:
        """고정 mini-batch 개수 (마지막 부분 batch 는 버린다)"""
        if batch_size > len(self):
            raise DimensionError("batch_size 가 데이터 수보다 큽니다.",
                                 {"batch_size": batch_size, "n": len(self)})
        return len(self) // batch_size

    def batch(self, xi: int, batch_size: int) -> Batch:
        start = xi * batch_size
        return Batch(self.inputs[start:start + batch_size], self.targets[start:start + batch_size], xi)

    def reshape(self, sample_shape: Tuple[int, ...]) -> "Dataset":
        """CNN 입력용으로 샘플 shape 을 바꾼다."""
        n = len(self)
        if int(np.prod(sample_shape)) != int(np.prod(self.inputs.shape[1:])):
            raise DimensionError("샘플 크기가 맞지 않아 reshape 할 수 없습니다.",
                                 {"from": self.inputs.shape[1:], "to": tuple(sample_shape)})
        return replace(self, inputs=self.inputs.reshape((n, *sample_shape)))


@dataclass
class StepRecord:
    """반복 k 의 기록
    - loss: 갱신 전 θ_k 에서의 train 모드 batch 손실
    - update: U_k (replay 저장 모드에서는 None)
    - coherence: ⟨θ_k − θ_T, U_k⟩ (분석 2단계에서 채운다)
    """
    k: int
    xi: int
    loss: float
    update: Optional[np.ndarray]
    update_sq_norm: float
    coherence: float = float("nan")


@dataclass
class TrajectoryMeta:
    d: int
    T: int
    n_batches: int
    epochs: int
    batch_size: int
    eta: float
    optimizer: Dict[str, Any]
    init_seed: int
    sampler_seed: int
    model: Dict[str, Any]
    spec_digest: str
    storage_mode: str = "replay"
    storage_dtype: str = "f64"
    checkpoint_stride: int = 0
    data: Optional[Dict[str, Any]] = None
    t_matches_nb: bool = True

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrajectoryMeta":
        return cls(**data)


@dataclass
class TrajectoryLog:
    """최적화 궤적 {θ_k} 기록 (θ_0, θ_T 와 반복별 StepRecord)"""
    meta: TrajectoryMeta
    theta0: np.ndarray
    thetaT: np.ndarray
    steps: List[StepRecord] = field(default_factory=list)
    checkpoints: Dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def has_updates(self) -> bool:
        return bool(self.steps) and all(step.update is not None for step in self.steps)

    def losses(self) -> np.ndarray:
        return np.array([step.loss for step in self.steps], dtype=np.float64)
