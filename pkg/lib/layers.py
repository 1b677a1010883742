"""레이어 단위 forward/backward 와 손실 함수

각 함수는 numpy 배열을 받아 새 배열을 반환하며 입력을 변경하지 않는다.
dense 입력은 [B,F], conv 입력은 [B,C,H,W] 이다.
"""
from typing import NamedTuple, Optional, Tuple

import numpy as np

from core.exception import DimensionError
from lib.tensor_math import conv2d, conv2d_backward, matmul


# ---------------------------------------------------------------------------
# dense / conv2d / projection
# ---------------------------------------------------------------------------
def dense_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    return matmul(x, weight) + bias


def dense_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    """Returns: (grad_x, grad_weight, grad_bias)"""
    return grad_out @ weight.T, x.T @ grad_out, grad_out.sum(axis=0)


def conv_forward(x, weight, bias, stride, padding) -> np.ndarray:
    return conv2d(x, weight, stride, padding) + bias[None, :, None, None]


def conv_backward(x, weight, grad_out, stride, padding):
    grad_x, grad_w = conv2d_backward(x, weight, grad_out, stride, padding)
    return grad_x, grad_w, grad_out.sum(axis=(0, 2, 3))


def projection_forward(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    """skip edge 사영: dense 는 [in,out] 행렬, conv 는 [out,in,1,1] 1x1 커널"""
    if x.ndim == 2:
        return matmul(x, weight)
    return conv2d(x, weight, 1, 0)


def projection_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray):
    if x.ndim == 2:
        return grad_out @ weight.T, x.T @ grad_out
    return conv2d_backward(x, weight, grad_out, 1, 0)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------
class BatchNormCache(NamedTuple):
    mode: str
    x_hat: np.ndarray
    inv_std: np.ndarray
    scale: np.ndarray
    axes: Tuple[int, ...]


class BatchNormResult(NamedTuple):
    out: np.ndarray
    cache: BatchNormCache
    running_mean: np.ndarray
    running_var: np.ndarray


def _bn_axes(x: np.ndarray) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
    """통계를 모을 축과 파라미터 broadcast shape (feature 별 또는 channel 별)"""
    if x.ndim == 2:
        return (0,), (1, x.shape[1])
    if x.ndim == 4:
        return (0, 2, 3), (1, x.shape[1], 1, 1)
    raise DimensionError("batch_norm 입력은 [B,F] 또는 [B,C,H,W] 이어야 합니다.", {"shape": x.shape})


def batch_norm_forward(
    x: np.ndarray,
    scale: np.ndarray,
    shift: np.ndarray,
    eps: float = 1e-5,
    mode: str = "train",
    running_mean: Optional[np.ndarray] = None,
    running_var: Optional[np.ndarray] = None,
    momentum: float = 0.1,
) -> BatchNormResult:
    """batch normalization forward

    train 모드는 batch 통계(편향 분산)를 사용하고 running 통계를
    running = (1 - momentum) * running + momentum * batch 로 갱신한 새 배열을 반환한다.
    eval 모드는 running 통계를 사용한다.

    Raises:
        DimensionError: train 모드에서 B < 2 인 경우
    """
    axes, param_shape = _bn_axes(x)
    features = x.shape[1]
    if running_mean is None:
        running_mean = np.zeros(features)
    if running_var is None:
        running_var = np.ones(features)
    scale_b = scale.reshape(param_shape)
    shift_b = shift.reshape(param_shape)

    if mode == "train":
        if x.shape[0] < 2:
            raise DimensionError("train 모드 batch_norm 은 batch 크기 2 이상이 필요합니다.", {"B": x.shape[0]})
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        new_mean = (1.0 - momentum) * running_mean + momentum * mean
        new_var = (1.0 - momentum) * running_var + momentum * var
    elif mode == "eval":
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"지원하지 않는 batch_norm mode: {mode}")

    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean.reshape(param_shape)) * inv_std.reshape(param_shape)
    out = x_hat * scale_b + shift_b
    cache = BatchNormCache(mode, x_hat, inv_std.reshape(param_shape), scale_b, axes)
    return BatchNormResult(out, cache, new_mean, new_var)


def batch_norm_backward(grad_out: np.ndarray, cache: BatchNormCache):
    """Returns: (grad_x, grad_scale, grad_shift)"""
    axes = cache.axes
    grad_shift = grad_out.sum(axis=axes)
    grad_scale = (grad_out * cache.x_hat).sum(axis=axes)
    grad_x_hat = grad_out * cache.scale
    if cache.mode == "eval":
        return grad_x_hat * cache.inv_std, grad_scale, grad_shift

    count = grad_out.size // grad_out.shape[1]
    sum_g = grad_x_hat.sum(axis=axes, keepdims=True)
    sum_gx = (grad_x_hat * cache.x_hat).sum(axis=axes, keepdims=True)
    grad_x = cache.inv_std / count * (count * grad_x_hat - sum_g - cache.x_hat * sum_gx)
    return grad_x, grad_scale, grad_shift


# ---------------------------------------------------------------------------
# 활성화 함수
# ---------------------------------------------------------------------------
def sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def activation_forward(kind: str, x: np.ndarray, slope: float = 1e-2) -> np.ndarray:
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return np.tanh(x)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "leaky_relu":
        return np.where(x > 0, x, slope * x)
    raise ValueError(f"지원하지 않는 활성화 함수: {kind}")


def activation_backward(kind: str, x: np.ndarray, out: np.ndarray, grad_out: np.ndarray,
                        slope: float = 1e-2) -> np.ndarray:
    if kind == "sigmoid":
        return grad_out * out * (1.0 - out)
    if kind == "tanh":
        return grad_out * (1.0 - out * out)
    if kind == "relu":
        return grad_out * (x > 0)
    if kind == "leaky_relu":
        return grad_out * np.where(x > 0, 1.0, slope)
    raise ValueError(f"지원하지 않는 활성화 함수: {kind}")


# ---------------------------------------------------------------------------
# 손실 함수 (batch 평균)
# ---------------------------------------------------------------------------
def cross_entropy_softmax(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """log-sum-exp 로 계산한 softmax cross-entropy

    Args:
        logits (np.ndarray): [B,C]
        targets (np.ndarray): [B] 정수 class label

    Returns:
        Tuple[float, np.ndarray]: (batch 평균 손실, logits gradient)
    """
    if logits.ndim != 2:
        raise DimensionError("cross_entropy 입력은 [B,C] 이어야 합니다.", {"shape": logits.shape})
    labels = np.asarray(targets).astype(np.int64).ravel()
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise DimensionError("targets 개수가 batch 크기와 다릅니다.", {"B": batch, "targets": labels.shape[0]})
    if labels.min() < 0 or labels.max() >= classes:
        raise DimensionError("class label 이 범위를 벗어났습니다.", {"classes": classes})
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    sum_exp = exp.sum(axis=1, keepdims=True)
    log_sum_exp = np.log(sum_exp)[:, 0]
    rows = np.arange(batch)
    loss = float(np.mean(log_sum_exp - shifted[rows, labels]))
    grad = exp / sum_exp
    grad[rows, labels] -= 1.0
    return loss, grad / batch


def mse(pred: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    """모든 출력 원소에 대한 평균 제곱 오차"""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.size != pred.size:
        raise DimensionError("mse targets 크기가 출력과 다릅니다.", {"pred": pred.shape, "targets": targets.shape})
    diff = pred - targets.reshape(pred.shape)
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


LOSS_FUNCTIONS = {
    "cross_entropy_softmax": cross_entropy_softmax,
    "mse": mse,
}
