"""확률적 최적화 update 생성기 (SGD, heavy-ball momentum, Adam)

θ_{k+1} = θ_k − ηU_k 에서 U_k 를 만드는 부분(compute_update)과
실제로 적용하는 부분(step)을 나눈다. U 는 η 를 포함하지 않는다.
"""
from dataclasses import dataclass, replace
from typing import Optional, Tuple

import numpy as np

from core.configclass import OptimizerConfig
from core.exception import DimensionError, NonFiniteError
from core.models import ParamVector


@dataclass(frozen=True)
class OptimizerState:
    """optimizer 별 버퍼
    - sgd_momentum: velocity
    - adam: m, v, t (t 는 step 마다 정확히 1 증가)
    """
    kind: str
    velocity: Optional[np.ndarray] = None
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None
    t: int = 0


def init_optimizer_state(config: OptimizerConfig, d: int) -> OptimizerState:
    if config.kind == "sgd_momentum":
        return OptimizerState(config.kind, velocity=np.zeros(d))
    if config.kind == "adam":
        return OptimizerState(config.kind, m=np.zeros(d), v=np.zeros(d))
    return OptimizerState(config.kind)


def _check_length(buffer: Optional[np.ndarray], d: int):
    if buffer is not None and buffer.shape[0] != d:
        raise DimensionError("optimizer 상태 길이가 gradient 와 다릅니다.", {"state": buffer.shape[0], "d": d})


def compute_update(
    config: OptimizerConfig, state: OptimizerState, gradient: ParamVector
) -> Tuple[ParamVector, OptimizerState]:
    """gradient 로부터 update U 와 새 상태를 만든다. (입력 state 는 변경하지 않는다)

    Raises:
        NonFiniteError: gradient 에 NaN/Inf 가 있는 경우
    """
    g = gradient.values
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("gradient 에 유한하지 않은 값이 있습니다.", {"kind": config.kind})
    if state.kind != config.kind:
        raise ValueError(f"optimizer 상태({state.kind})와 설정({config.kind})이 다릅니다.")

    if config.kind == "sgd":
        return gradient.with_values(g.copy()), state

    if config.kind == "sgd_momentum":
        _check_length(state.velocity, gradient.d)
        velocity = config.mu * state.velocity + g
        return gradient.with_values(velocity.copy()), replace(state, velocity=velocity)

    _check_length(state.m, gradient.d)
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * g
    v = config.beta2 * state.v + (1.0 - config.beta2) * (g * g)
    m_hat = m / (1.0 - config.beta1 ** t)
    v_hat = v / (1.0 - config.beta2 ** t)
    update = m_hat / (np.sqrt(v_hat) + config.eps)
    return gradient.with_values(update), replace(state, m=m, v=v, t=t)


def step(theta: ParamVector, update: ParamVector, eta: float) -> ParamVector:
    """θ_{k+1} = θ_k − ηU"""
    if theta.d != update.d:
        raise DimensionError("θ 와 U 의 길이가 다릅니다.", {"theta": theta.d, "update": update.d})
    return theta.with_values(theta.values - eta * update.values)
