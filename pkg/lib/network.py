"""레이어 그래프 신경망: 파라미터 초기화, forward, reverse-mode backward

h_i = layer_i(h_{i-1}) + Σ_{edge → i} P_edge(h_source)

파라미터 이름은 `layer{i}.weight`, `layer{i}.bias`, `layer{i}.scale`, `layer{i}.shift`,
`skip{j}.weight` 이며 ParamVector layout 은 레이어 순서, skip 순서를 따른다.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from typing_extensions import Protocol

from core.configclass import (
    ActivationSpec, BatchNormSpec, Conv2dSpec, DenseSpec, FlattenSpec, NetworkSpec, SkipEdge
)
from core.exception import CacheMismatchError, DimensionError, DivergenceError
from core.models import Batch, ParamVector
from lib import layers
from lib.common import digest

NetworkState = Dict[str, np.ndarray]


@dataclass(frozen=True)
class ParamInfo:
    name: str
    shape: Tuple[int, ...]
    init: str  # uniform | zeros | ones
    fan_in: int = 1


def parameter_table(spec: NetworkSpec) -> List[ParamInfo]:
    """spec 으로부터 고정된 파라미터 목록(layout 순서)을 만든다."""
    table = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, DenseSpec):
            table.append(ParamInfo(f"layer{i}.weight", (layer.in_features, layer.out_features),
                                   "uniform", layer.in_features))
            table.append(ParamInfo(f"layer{i}.bias", (layer.out_features,), "zeros"))
        elif isinstance(layer, Conv2dSpec):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            table.append(ParamInfo(f"layer{i}.weight", shape, "uniform", fan_in))
            table.append(ParamInfo(f"layer{i}.bias", (layer.out_channels,), "zeros"))
        elif isinstance(layer, BatchNormSpec):
            table.append(ParamInfo(f"layer{i}.scale", (layer.features,), "ones"))
            table.append(ParamInfo(f"layer{i}.shift", (layer.features,), "zeros"))
    for j, edge in enumerate(spec.skip_edges):
        src, dst = spec.edge_shapes(edge)
        if src == dst:
            continue
        if len(src) == 1:
            table.append(ParamInfo(f"skip{j}.weight", (src[0], dst[0]), "uniform", src[0]))
        else:
            table.append(ParamInfo(f"skip{j}.weight", (dst[0], src[0], 1, 1), "uniform", src[0]))
    return table


def init_params(spec: NetworkSpec, seed: int) -> ParamVector:
    """uniform(±√(1/fan_in)) 가중치, 0 bias, BN scale 1 / shift 0"""
    rng = np.random.default_rng(seed)
    arrays = []
    for info in parameter_table(spec):
        if info.init == "uniform":
            bound = np.sqrt(1.0 / info.fan_in)
            arrays.append((info.name, rng.uniform(-bound, bound, size=info.shape)))
        elif info.init == "ones":
            arrays.append((info.name, np.ones(info.shape)))
        else:
            arrays.append((info.name, np.zeros(info.shape)))
    return ParamVector.flatten(arrays)


def init_state(spec: NetworkSpec) -> NetworkState:
    """BN running 통계 초기값 (mean 0, var 1)"""
    state = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, BatchNormSpec):
            state[f"layer{i}.running_mean"] = np.zeros(layer.features)
            state[f"layer{i}.running_var"] = np.ones(layer.features)
    return state


@dataclass
class ForwardCache:
    """backward 에 필요한 중간값"""
    mode: str
    layout: Tuple
    param_values: np.ndarray
    inputs: np.ndarray
    outputs: List[np.ndarray]
    layer_caches: List[Any]
    loss: float
    loss_grad: np.ndarray
    state: NetworkState = field(default_factory=dict)


def _incoming_edges(spec: NetworkSpec) -> Dict[int, List[Tuple[int, SkipEdge]]]:
    incoming: Dict[int, List[Tuple[int, SkipEdge]]] = {}
    for j, edge in enumerate(spec.skip_edges):
        incoming.setdefault(edge.target, []).append((j, edge))
    return incoming


def _batched_input(spec: NetworkSpec, inputs: np.ndarray) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if tuple(x.shape[1:]) != tuple(spec.input_shape):
        raise DimensionError("batch 입력 shape 이 네트워크 입력과 다릅니다.",
                             {"expected": tuple(spec.input_shape), "actual": x.shape[1:]})
    return x


def _forward_layers(spec: NetworkSpec, params: ParamVector, x0: np.ndarray, mode: str,
                    state: Optional[NetworkState]):
    if mode not in ("train", "eval"):
        raise ValueError(f"지원하지 않는 mode: {mode}")
    p = params.unflatten()
    state = state if state is not None else init_state(spec)
    new_state = dict(state)
    incoming = _incoming_edges(spec)

    outputs: List[np.ndarray] = []
    caches: List[Any] = []
    for i, layer in enumerate(spec.layers):
        x = x0 if i == 0 else outputs[i - 1]
        layer_cache = None
        if isinstance(layer, DenseSpec):
            out = layers.dense_forward(x, p[f"layer{i}.weight"], p[f"layer{i}.bias"])
        elif isinstance(layer, Conv2dSpec):
            out = layers.conv_forward(x, p[f"layer{i}.weight"], p[f"layer{i}.bias"], layer.stride, layer.padding)
        elif isinstance(layer, BatchNormSpec):
            result = layers.batch_norm_forward(
                x, p[f"layer{i}.scale"], p[f"layer{i}.shift"], layer.eps, mode,
                state.get(f"layer{i}.running_mean"), state.get(f"layer{i}.running_var"), layer.momentum,
            )
            out, layer_cache = result.out, result.cache
            new_state[f"layer{i}.running_mean"] = result.running_mean
            new_state[f"layer{i}.running_var"] = result.running_var
        elif isinstance(layer, ActivationSpec):
            out = layers.activation_forward(layer.activation, x, layer.slope)
        elif isinstance(layer, FlattenSpec):
            out = x.reshape(x.shape[0], -1)
        else:
            raise ValueError(f"지원하지 않는 레이어: {layer}")

        for j, edge in incoming.get(i, []):
            source = x0 if edge.source < 0 else outputs[edge.source]
            weight_name = f"skip{j}.weight"
            out = out + (layers.projection_forward(source, p[weight_name]) if weight_name in p else source)
        outputs.append(out)
        caches.append(layer_cache)
    return outputs, caches, new_state


def predict(spec: NetworkSpec, params: ParamVector, inputs: np.ndarray, mode: str = "eval",
            state: Optional[NetworkState] = None) -> np.ndarray:
    """손실 없이 네트워크 출력만 계산한다."""
    x0 = _batched_input(spec, inputs)
    outputs, _, _ = _forward_layers(spec, params, x0, mode, state)
    return outputs[-1]


def forward(
    spec: NetworkSpec, params: ParamVector, batch: Batch, mode: str = "train",
    state: Optional[NetworkState] = None
) -> Tuple[float, ForwardCache]:
    """batch 평균 손실과 backward 용 캐시를 계산한다.

    train 모드의 BN 은 batch 통계를 사용하고 갱신된 running 통계는 cache.state 로 반환된다.
    입력 state 는 변경하지 않는다.

    Raises:
        DivergenceError: 손실이 NaN/Inf 인 경우
    """
    x0 = _batched_input(spec, batch.inputs)
    outputs, caches, new_state = _forward_layers(spec, params, x0, mode, state)
    loss, loss_grad = layers.LOSS_FUNCTIONS[spec.loss_kind](outputs[-1], batch.targets)
    if not np.isfinite(loss):
        raise DivergenceError("손실값이 발산했습니다.", loss=loss)

    cache = ForwardCache(mode, params.layout, params.values, x0, outputs, caches, loss, loss_grad, new_state)
    return loss, cache


def backward(spec: NetworkSpec, params: ParamVector, cache: ForwardCache) -> ParamVector:
    """batch 평균 손실의 정확한 reverse-mode gradient

    Raises:
        CacheMismatchError: cache 가 다른 파라미터로 만든 것인 경우
    """
    if cache.layout != params.layout or not np.array_equal(cache.param_values, params.values):
        raise CacheMismatchError("forward 캐시가 전달된 파라미터와 일치하지 않습니다.")
    p = params.unflatten()
    grads = {name: np.zeros_like(value) for name, value in p.items()}
    incoming = _incoming_edges(spec)
    outputs = cache.outputs
    count = len(spec.layers)
    upstream: List[Optional[np.ndarray]] = [None] * count
    upstream[-1] = cache.loss_grad

    def accumulate(index: int, grad: np.ndarray):
        upstream[index] = grad if upstream[index] is None else upstream[index] + grad

    for i in range(count - 1, -1, -1):
        grad_out = upstream[i]
        if grad_out is None:
            grad_out = np.zeros_like(outputs[i])
        x = cache.inputs if i == 0 else outputs[i - 1]

        # skip edge 합의 gradient 는 두 경로 모두로 전달된다.
        for j, edge in incoming.get(i, []):
            source = cache.inputs if edge.source < 0 else outputs[edge.source]
            weight_name = f"skip{j}.weight"
            if weight_name in p:
                grad_source, grad_weight = layers.projection_backward(source, p[weight_name], grad_out)
                grads[weight_name] += grad_weight
            else:
                grad_source = grad_out
            if edge.source >= 0:
                accumulate(edge.source, grad_source)

        layer = spec.layers[i]
        if isinstance(layer, DenseSpec):
            grad_x, grad_w, grad_b = layers.dense_backward(x, p[f"layer{i}.weight"], grad_out)
            grads[f"layer{i}.weight"] += grad_w
            grads[f"layer{i}.bias"] += grad_b
        elif isinstance(layer, Conv2dSpec):
            grad_x, grad_w, grad_b = layers.conv_backward(x, p[f"layer{i}.weight"], grad_out,
                                                          layer.stride, layer.padding)
            grads[f"layer{i}.weight"] += grad_w
            grads[f"layer{i}.bias"] += grad_b
        elif isinstance(layer, BatchNormSpec):
            grad_x, grad_scale, grad_shift = layers.batch_norm_backward(grad_out, cache.layer_caches[i])
            grads[f"layer{i}.scale"] += grad_scale
            grads[f"layer{i}.shift"] += grad_shift
        elif isinstance(layer, ActivationSpec):
            grad_x = layers.activation_backward(layer.activation, x, outputs[i], grad_out, layer.slope)
        else:
            grad_x = grad_out.reshape(x.shape)

        if i > 0:
            accumulate(i - 1, grad_x)

    values = np.concatenate([grads[s.name].ravel() for s in params.layout]) if params.layout else np.zeros(0)
    return ParamVector(values, params.layout)


# ---------------------------------------------------------------------------
# Model protocol
# ---------------------------------------------------------------------------
class Model(Protocol):
    """학습 루프가 다루는 모델 인터페이스"""

    def init_params(self, seed: int) -> ParamVector:
        ...

    def init_state(self) -> NetworkState:
        ...

    def loss_and_gradient(
        self, params: ParamVector, batch: Batch, state: NetworkState
    ) -> Tuple[float, ParamVector, NetworkState]:
        ...

    def describe(self) -> Dict[str, Any]:
        ...

    def digest(self) -> str:
        ...


class NetworkModel:
    def __init__(self, spec: NetworkSpec):
        self.spec = spec

    def init_params(self, seed: int) -> ParamVector:
        return init_params(self.spec, seed)

    def init_state(self) -> NetworkState:
        return init_state(self.spec)

    def loss_and_gradient(self, params, batch, state):
        loss, cache = forward(self.spec, params, batch, "train", state)
        return loss, backward(self.spec, params, cache), cache.state

    def describe(self) -> Dict[str, Any]:
        return {"family": "network", "spec": self.spec.model_dump(mode="json")}

    def digest(self) -> str:
        return digest(self.describe())


class QuadraticModel:
    """ℓ(θ) = ½‖θ‖², ∇ℓ = θ (batch 와 무관한 닫힌형 검증용 모델)"""

    def __init__(self, dim: int = 1, theta0: float = 1.0):
        self.dim = dim
        self.theta0 = theta0

    def init_params(self, seed: int) -> ParamVector:
        return ParamVector.flatten([("theta", np.full(self.dim, self.theta0, dtype=np.float64))])

    def init_state(self) -> NetworkState:
        return {}

    def loss_and_gradient(self, params, batch, state):
        theta = params.values
        loss = 0.5 * float(np.dot(theta, theta))
        if not np.isfinite(loss):
            raise DivergenceError("손실값이 발산했습니다.", loss=loss)
        return loss, params.with_values(theta.copy()), state

    def describe(self) -> Dict[str, Any]:
        return {"family": "quadratic", "dim": self.dim, "theta0": self.theta0}

    def digest(self) -> str:
        return digest(self.describe())


def model_from_description(description: Dict[str, Any]) -> Model:
    """TrajectoryMeta.model 로부터 같은 모델을 다시 만든다. (replay 용)"""
    family = description.get("family")
    if family == "network":
        return NetworkModel(NetworkSpec.model_validate(description["spec"]))
    if family == "quadratic":
        return QuadraticModel(description["dim"], description["theta0"])
    raise ValueError(f"알 수 없는 모델 family: {family}")


# ---------------------------------------------------------------------------
# desk-scale 아키텍처
# ---------------------------------------------------------------------------
def keep_skip(block: int, blocks: int, blocks_per_stage: int, skip_mode: str, skip_count: int = 1) -> bool:
    """블록 번호에 대해 skip-connection 유지 여부를 결정한다.

    first_per_block / first_k 는 stage(blocks_per_stage 개 블록 묶음) 안의 위치로,
    last_m 은 네트워크 전체에서 마지막 skip_count 개로 판단한다.
    """
    position = block % blocks_per_stage
    if skip_mode == "all":
        return True
    if skip_mode == "none":
        return False
    if skip_mode == "first_per_block":
        return position == 0
    if skip_mode == "first_k":
        return position < skip_count
    if skip_mode == "last_m":
        return block >= blocks - skip_count
    raise ValueError(f"지원하지 않는 skip_mode: {skip_mode}")


def _residual_stack(
    make_linear, make_bn, blocks, blocks_per_stage, activation, slope, bn_mode, skip_mode, skip_count
):
    """블록: linear → [BN] → act → linear → [BN] (+skip) → act"""
    stack, edges = [], []
    act = ActivationSpec(activation=activation, slope=slope)
    for block in range(blocks):
        block_input = len(stack) - 1
        stack.append(make_linear())
        if bn_mode in ("all", "first_per_block"):
            stack.append(make_bn())
        stack.append(act)
        stack.append(make_linear())
        if bn_mode == "all":
            stack.append(make_bn())
        if keep_skip(block, blocks, blocks_per_stage, skip_mode, skip_count):
            edges.append((block_input, len(stack) - 1))
        stack.append(act)
    return stack, edges


def build_residual_mlp(
    input_dim: int, outputs: int, width: int = 64, blocks: int = 4, blocks_per_stage: int = 2,
    activation: str = "relu", slope: float = 1e-2, bn_mode: str = "all", skip_mode: str = "all",
    skip_count: int = 1, loss_kind: str = "cross_entropy_softmax",
) -> NetworkSpec:
    """stem dense → act → residual 블록 × blocks → head dense"""
    act = ActivationSpec(activation=activation, slope=slope)
    stem = [DenseSpec(in_features=input_dim, out_features=width), act]
    stack, edges = _residual_stack(
        lambda: DenseSpec(in_features=width, out_features=width),
        lambda: BatchNormSpec(features=width),
        blocks, blocks_per_stage, activation, slope, bn_mode, skip_mode, skip_count,
    )
    offset = len(stem)
    head = [DenseSpec(in_features=width, out_features=outputs)]
    skip_edges = [SkipEdge(source=src + offset, target=dst + offset) for src, dst in edges]
    return NetworkSpec(input_shape=(input_dim,), layers=stem + stack + head,
                       skip_edges=skip_edges, loss_kind=loss_kind)


def build_residual_cnn(
    image_shape: Tuple[int, int, int], outputs: int, channels: int = 8, blocks: int = 2,
    blocks_per_stage: int = 2, activation: str = "relu", slope: float = 1e-2, bn_mode: str = "all",
    skip_mode: str = "all", skip_count: int = 1, loss_kind: str = "cross_entropy_softmax",
) -> NetworkSpec:
    """3x3 padded conv residual 블록 → flatten → dense"""
    in_channels, height, width = image_shape
    act = ActivationSpec(activation=activation, slope=slope)
    stem = [Conv2dSpec(in_channels=in_channels, out_channels=channels, kernel=3, padding=1), act]
    stack, edges = _residual_stack(
        lambda: Conv2dSpec(in_channels=channels, out_channels=channels, kernel=3, padding=1),
        lambda: BatchNormSpec(features=channels),
        blocks, blocks_per_stage, activation, slope, bn_mode, skip_mode, skip_count,
    )
    offset = len(stem)
    head = [FlattenSpec(), DenseSpec(in_features=channels * height * width, out_features=outputs)]
    skip_edges = [SkipEdge(source=src + offset, target=dst + offset) for src, dst in edges]
    return NetworkSpec(input_shape=tuple(image_shape), layers=stem + stack + head,
                       skip_edges=skip_edges, loss_kind=loss_kind)


def build_plain_mlp(
    input_dim: int, outputs: int, width: int = 64, depth: int = 2, activation: str = "relu",
    slope: float = 1e-2, batch_norm: bool = False, loss_kind: str = "cross_entropy_softmax",
) -> NetworkSpec:
    """skip-connection 없는 (dense → [BN] → act) × depth → dense"""
    stack = []
    features = input_dim
    for _ in range(depth):
        stack.append(DenseSpec(in_features=features, out_features=width))
        if batch_norm:
            stack.append(BatchNormSpec(features=width))
        stack.append(ActivationSpec(activation=activation, slope=slope))
        features = width
    stack.append(DenseSpec(in_features=features, out_features=outputs))
    return NetworkSpec(input_shape=(input_dim,), layers=stack, loss_kind=loss_kind)
