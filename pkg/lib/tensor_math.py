"""f64 텐서 연산 (matmul, conv2d, 원소별 연산, 내적)

Tensor 는 numpy float64 ndarray 이다. 모든 함수는 입력을 변경하지 않는다.
checked 모드(TRAJLENS_CHECKED)에서는 결과에 NaN/Inf 가 있으면 NonFiniteError 를 발생시킨다.
"""
from typing import Callable, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.exception import DimensionError, NonFiniteError
from core.models import ParamVector
from core.settings import is_checked_mode

VectorLike = Union[np.ndarray, ParamVector]

ELEMENTWISE_OPS = ("add", "sub", "mul", "scale", "map")


def check_finite(x: np.ndarray, op: str) -> np.ndarray:
    if is_checked_mode() and not np.all(np.isfinite(x)):
        raise NonFiniteError(f"{op} 결과에 유한하지 않은 값이 있습니다.", {"op": op})
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """행렬곱 a[m×k] × b[k×n]

    Raises:
        DimensionError: 안쪽 차원이 다른 경우
    """
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError("matmul 은 2차원 텐서만 지원합니다.", {"a": a.shape, "b": b.shape})
    if a.shape[1] != b.shape[0]:
        raise DimensionError("matmul 안쪽 차원이 다릅니다.", {"a": a.shape, "b": b.shape})
    return check_finite(a @ b, "matmul")


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    """H' = (H + 2p - kh) / s + 1 (정수가 아니면 DimensionError)"""
    span = size + 2 * padding - kernel
    if span < 0 or span % stride:
        raise DimensionError("conv2d 출력 크기가 정수가 아닙니다.",
                             {"size": size, "kernel": kernel, "stride": stride, "padding": padding})
    return span // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """[B,C,H,W] 입력의 (kh,kw) 창 view [B,C,H',W',kh,kw]"""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def conv2d(x: np.ndarray, kernels: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    """직접 cross-correlation (커널을 뒤집지 않는다)

    Args:
        x (np.ndarray): [C_in,H,W] 또는 batch [B,C_in,H,W]
        kernels (np.ndarray): [C_out,C_in,kh,kw]
        stride (int): 보폭
        padding (int): 0 padding 크기

    Returns:
        np.ndarray: [C_out,H',W'] 또는 [B,C_out,H',W']
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4) or kernels.ndim != 4:
        raise DimensionError("conv2d 입력 차원이 올바르지 않습니다.", {"x": x.shape, "kernels": kernels.shape})
    xb = x if batched else x[None]
    _, channels, height, width = xb.shape
    _, in_channels, kh, kw = kernels.shape
    if channels != in_channels:
        raise DimensionError("conv2d 입력 채널 수가 커널과 다릅니다.", {"x": x.shape, "kernels": kernels.shape})
    conv_output_extent(height, kh, stride, padding)
    conv_output_extent(width, kw, stride, padding)

    windows = _windows(xb, kh, kw, stride, padding)
    out = np.tensordot(windows, kernels, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(out)
    check_finite(out, "conv2d")
    return out if batched else out[0]


def conv2d_backward(
    x: np.ndarray, kernels: np.ndarray, grad_out: np.ndarray, stride: int = 1, padding: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """conv2d 의 입력/커널 gradient

    Returns:
        Tuple[np.ndarray, np.ndarray]: (grad_x, grad_kernels)
    """
    batched = x.ndim == 4
    xb = x if batched else x[None]
    gb = grad_out if batched else grad_out[None]
    _, _, kh, kw = kernels.shape
    _, _, out_h, out_w = gb.shape

    windows = _windows(xb, kh, kw, stride, padding)
    grad_k = np.tensordot(gb, windows, axes=([0, 2, 3], [0, 2, 3]))

    batch, channels, height, width = xb.shape
    grad_padded = np.zeros((batch, channels, height + 2 * padding, width + 2 * padding))
    row_span = stride * (out_h - 1) + 1
    col_span = stride * (out_w - 1) + 1
    for i in range(kh):
        for j in range(kw):
            contribution = np.tensordot(gb, kernels[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            grad_padded[:, :, i:i + row_span:stride, j:j + col_span:stride] += contribution
    grad_x = grad_padded[:, :, padding:padding + height, padding:padding + width]
    grad_x = np.ascontiguousarray(grad_x)
    return (grad_x if batched else grad_x[0]), grad_k


def elementwise(
    op: str,
    a: np.ndarray,
    b: Optional[np.ndarray] = None,
    scalar: Optional[float] = None,
    fn: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """원소별 연산
    - add/sub/mul: 같은 shape 의 두 텐서
    - scale: 스칼라 곱
    - map: 원소별 함수 적용
    """
    if op in ("add", "sub", "mul"):
        if b is None or a.shape != b.shape:
            raise DimensionError(f"{op} 피연산자 shape 이 다릅니다.",
                                 {"a": a.shape, "b": None if b is None else b.shape})
        result = {"add": np.add, "sub": np.subtract, "mul": np.multiply}[op](a, b)
    elif op == "scale":
        if scalar is None:
            raise ValueError("scale 연산에는 scalar 가 필요합니다.")
        result = a * scalar
    elif op == "map":
        if fn is None:
            raise ValueError("map 연산에는 fn 이 필요합니다.")
        result = np.asarray(fn(a), dtype=np.float64)
        if result.shape != a.shape:
            raise DimensionError("map 함수가 shape 을 바꾸었습니다.", {"in": a.shape, "out": result.shape})
    else:
        raise ValueError(f"지원하지 않는 연산: {op}")
    return check_finite(result, op)


def _values(x: VectorLike) -> np.ndarray:
    return x.values if isinstance(x, ParamVector) else np.asarray(x, dtype=np.float64)


def dot(a: VectorLike, b: VectorLike) -> float:
    """Σ aᵢbᵢ"""
    av, bv = _values(a), _values(b)
    if av.shape != bv.shape:
        raise DimensionError("dot 피연산자 길이가 다릅니다.", {"a": av.shape, "b": bv.shape})
    result = float(np.dot(av.ravel(), bv.ravel()))
    check_finite(np.asarray(result), "dot")
    return result


def sq_norm(x: VectorLike) -> float:
    return dot(x, x)
