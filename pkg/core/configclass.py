"""실험 설정 및 네트워크 구조 정의 클래스 모음

JSON 설정 파일의 key-value 트리가 그대로 아래 모델에 매핑된다.
"""
import json
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import (
    BaseModel, ConfigDict, Field, NonNegativeInt, PositiveInt,
    ValidationError, field_validator, model_validator
)
from typing_extensions import Annotated

from core.exception import ConfigValidationError

ActivationKind = Literal["sigmoid", "tanh", "relu", "leaky_relu"]
BnMode = Literal["all", "first_per_block", "none"]
SkipMode = Literal["all", "first_per_block", "first_k", "last_m", "none"]
LossKind = Literal["cross_entropy_softmax", "mse"]
SweepAxis = Literal["activation", "bn_mode", "skip_mode", "optimizer"]

Shape = Tuple[int, ...]


class _Frozen(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ---------------------------------------------------------------------------
# 네트워크 레이어 정의
# ---------------------------------------------------------------------------
class DenseSpec(_Frozen):
    kind: Literal["dense"] = "dense"
    in_features: PositiveInt
    out_features: PositiveInt

    def output_shape(self, in_shape: Shape) -> Shape:
        if in_shape != (self.in_features,):
            raise ValueError(f"dense 입력 shape {in_shape} != ({self.in_features},)")
        return (self.out_features,)


class Conv2dSpec(_Frozen):
    kind: Literal["conv2d"] = "conv2d"
    in_channels: PositiveInt
    out_channels: PositiveInt
    kernel: PositiveInt
    stride: PositiveInt = 1
    padding: NonNegativeInt = 0

    def output_shape(self, in_shape: Shape) -> Shape:
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise ValueError(f"conv2d 입력 shape {in_shape}, 채널 {self.in_channels} 필요")
        extents = []
        for size in in_shape[1:]:
            span = size + 2 * self.padding - self.kernel
            if span < 0 or span % self.stride:
                raise ValueError(f"conv2d 출력 크기가 정수가 아닙니다: {in_shape}")
            extents.append(span // self.stride + 1)
        return (self.out_channels, *extents)


class BatchNormSpec(_Frozen):
    kind: Literal["batch_norm"] = "batch_norm"
    features: PositiveInt
    eps: float = Field(default=1e-5, gt=0)
    momentum: float = Field(default=0.1, ge=0, le=1)

    def output_shape(self, in_shape: Shape) -> Shape:
        if not in_shape or in_shape[0] != self.features:
            raise ValueError(f"batch_norm features {self.features} != 입력 {in_shape}")
        return in_shape


class ActivationSpec(_Frozen):
    kind: Literal["activation"] = "activation"
    activation: ActivationKind
    slope: float = Field(default=1e-2, gt=0, lt=1)

    def output_shape(self, in_shape: Shape) -> Shape:
        return in_shape


class FlattenSpec(_Frozen):
    kind: Literal["flatten"] = "flatten"

    def output_shape(self, in_shape: Shape) -> Shape:
        size = 1
        for extent in in_shape:
            size *= extent
        return (size,)


LayerSpec = Annotated[
    Union[DenseSpec, Conv2dSpec, BatchNormSpec, ActivationSpec, FlattenSpec],
    Field(discriminator="kind"),
]


class SkipEdge(_Frozen):
    """덧셈 skip-connection
    - source: 출력을 가져올 레이어 인덱스 (-1 은 네트워크 입력)
    - target: 출력에 더해질 레이어 인덱스
    - projection: shape이 다를 때 학습되는 선형/1x1 사영 사용 여부
    """
    source: int = Field(ge=-1)
    target: NonNegativeInt
    projection: bool = False


class NetworkSpec(_Frozen):
    input_shape: Shape
    layers: List[LayerSpec]
    skip_edges: List[SkipEdge] = []
    loss_kind: LossKind = "cross_entropy_softmax"

    @model_validator(mode="after")
    def check_graph(self) -> "NetworkSpec":
        shapes = self.layer_shapes()
        for edge in self.skip_edges:
            if edge.target >= len(self.layers):
                raise ValueError(f"skip target {edge.target} 이 레이어 범위를 벗어났습니다.")
            if edge.source >= edge.target:
                raise ValueError("skip edge 는 앞 레이어에서 뒤 레이어로만 연결됩니다.")
            src = self.input_shape if edge.source < 0 else shapes[edge.source]
            dst = shapes[edge.target]
            if src != dst:
                if not edge.projection:
                    raise ValueError(f"skip edge shape 불일치 {src} -> {dst}, projection 필요")
                if len(src) != len(dst) or src[1:] != dst[1:]:
                    raise ValueError(f"projection 은 채널/특징 수만 바꿀 수 있습니다: {src} -> {dst}")
        return self

    def layer_shapes(self) -> List[Shape]:
        """각 레이어의 샘플 단위 출력 shape 목록"""
        shapes = []
        shape = tuple(self.input_shape)
        for layer in self.layers:
            shape = layer.output_shape(shape)
            shapes.append(shape)
        return shapes

    def edge_shapes(self, edge: SkipEdge) -> Tuple[Shape, Shape]:
        shapes = self.layer_shapes()
        src = tuple(self.input_shape) if edge.source < 0 else shapes[edge.source]
        return src, shapes[edge.target]


# ---------------------------------------------------------------------------
# 최적화 / 학습 설정
# ---------------------------------------------------------------------------
class OptimizerConfig(_Frozen):
    kind: Literal["sgd", "sgd_momentum", "adam"] = "sgd"
    eta: float = Field(gt=0)
    mu: float = Field(default=0.5, ge=0, lt=1)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    eps: float = Field(default=1e-2, gt=0)


class StorageConfig(_Frozen):
    mode: Literal["full", "replay"] = "replay"
    dtype: Literal["f64", "f32"] = "f64"
    checkpoint_stride: NonNegativeInt = 0


class TrainingConfig(_Frozen):
    """record_run 에 전달되는 학습 설정"""
    optimizer: OptimizerConfig
    epochs: PositiveInt
    batch_size: PositiveInt
    init_seed: NonNegativeInt = 0
    sampler_seed: NonNegativeInt = 0
    storage: StorageConfig = StorageConfig()


class AnalyzerConfig(_Frozen):
    loss_infimum: float = 0.0
    gap_tolerance: float = Field(default=1e-8, gt=0)
    window_epochs: Optional[PositiveInt] = None


# ---------------------------------------------------------------------------
# 실험 설정
# ---------------------------------------------------------------------------
class DataConfig(_Frozen):
    kind: Literal["gaussian_blobs", "two_spirals", "random_regression", "idx", "csv"] = "two_spirals"
    n: PositiveInt = 2048
    dims: PositiveInt = 2
    classes: PositiveInt = 2
    outputs: PositiveInt = 1
    separation: float = Field(default=3.0, ge=0)
    noise: float = Field(default=0.0, ge=0)
    batch_size: PositiveInt = 128
    task: Literal["classification", "regression"] = "classification"
    path: Optional[str] = None
    labels_path: Optional[str] = None

    @model_validator(mode="after")
    def check_source(self) -> "DataConfig":
        if self.kind in ("idx", "csv") and not self.path:
            raise ValueError(f"data.kind={self.kind} 에는 data.path 가 필요합니다.")
        if self.kind == "idx" and not self.labels_path:
            raise ValueError("data.kind=idx 에는 data.labels_path 가 필요합니다.")
        return self


class ModelConfig(_Frozen):
    family: Literal["residual_mlp", "residual_cnn", "plain_mlp", "quadratic"] = "residual_mlp"
    width: PositiveInt = 64
    blocks: NonNegativeInt = 4
    blocks_per_stage: PositiveInt = 2
    activation: ActivationKind = "relu"
    leaky_slope: float = Field(default=1e-2, gt=0, lt=1)
    bn_mode: BnMode = "all"
    skip_mode: SkipMode = "all"
    skip_count: PositiveInt = 1
    loss: Optional[LossKind] = None
    image_shape: Optional[Tuple[PositiveInt, PositiveInt, PositiveInt]] = None
    channels: PositiveInt = 8
    quadratic_dim: PositiveInt = 1
    quadratic_theta0: float = 1.0


class SeedConfig(_Frozen):
    init_seed: NonNegativeInt = 0
    data_seed: NonNegativeInt = 0
    sampler_seed: NonNegativeInt = 0


class ExperimentConfig(_Frozen):
    name: str = "experiment"
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    optimizer: OptimizerConfig
    epochs: PositiveInt = 60
    seeds: SeedConfig = SeedConfig()
    analyzer: AnalyzerConfig = AnalyzerConfig()
    storage: StorageConfig = StorageConfig()
    output_dir: Optional[str] = None
    sweep: Optional[Dict[SweepAxis, List[str]]] = None

    @field_validator("sweep")
    @classmethod
    def check_single_axis(cls, sweep):
        if sweep is None:
            return sweep
        if len(sweep) != 1:
            raise ValueError(f"sweep 은 정확히 하나의 축만 변경할 수 있습니다. (현재 {sorted(sweep)})")
        (values,) = sweep.values()
        if not values:
            raise ValueError("sweep 값 목록이 비어 있습니다.")
        if len(set(values)) != len(values):
            raise ValueError("sweep 값이 중복되었습니다.")
        return sweep

    @property
    def sweep_axis(self) -> Optional[str]:
        return next(iter(self.sweep)) if self.sweep else None

    def training_config(self) -> TrainingConfig:
        return TrainingConfig(
            optimizer=self.optimizer,
            epochs=self.epochs,
            batch_size=self.data.batch_size,
            init_seed=self.seeds.init_seed,
            sampler_seed=self.seeds.sampler_seed,
            storage=self.storage,
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """세 가지 seed 를 모두 같은 값으로 덮어쓴다. (--seed 옵션)"""
        seeds = SeedConfig(init_seed=seed, data_seed=seed, sampler_seed=seed)
        return self.model_copy(update={"seeds": seeds})

    def with_axis(self, axis: str, value: str) -> "ExperimentConfig":
        """sweep 축 하나의 값을 고정한 단일 실행 설정을 만든다.
        - 나머지 설정(seed 포함)은 그대로 유지한다.
        """
        if axis == "optimizer":
            optimizer = self.optimizer.model_copy(update={"kind": value})
            update = {"optimizer": validate_model(OptimizerConfig, optimizer.model_dump())}
        else:
            model = validate_model(ModelConfig, {**self.model.model_dump(), axis: value})
            update = {"model": model}
        update["name"] = f"{self.name}-{axis}-{value}"
        update["sweep"] = None
        return self.model_copy(update=update)


def validate_model(model_cls, data):
    """pydantic 검증 오류를 ConfigValidationError 로 변환한다."""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        raise ConfigValidationError(f"{model_cls.__name__} 설정이 올바르지 않습니다: {e}") from e


def load_experiment_config(path: str) -> ExperimentConfig:
    """JSON 설정 파일을 읽어 ExperimentConfig 로 검증한다.
    run 디렉토리의 config.resolved.json ({"config": ..., "environment": ...}) 도 받는다.

    Args:
        path (str): 설정 파일 경로

    Raises:
        ConfigValidationError: 파일이 JSON 형식이 아니거나 검증에 실패한 경우

    Returns:
        ExperimentConfig: 검증된 설정
    """
    try:
        with open(path, "r", encoding="UTF-8") as file:
            data = json.load(file)
    except json.JSONDecodeError as e:
        raise ConfigValidationError(f"설정 파일 JSON 형식 오류: {e}", {"path": path}) from e
    except FileNotFoundError as e:
        raise ConfigValidationError("설정 파일이 없습니다.", {"path": path}) from e
    if isinstance(data, dict) and "config" in data and "environment" in data:
        data = data["config"]
    return validate_model(ExperimentConfig, data)
