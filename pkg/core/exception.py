from typing import Any, Dict, Optional


class TrajlensError(Exception):
    """trajlens 공통 예외 클래스
    - 메시지(detail)와 함께 오류가 발생한 위치를 설명하는 context를 추가로 받는다.
    """

    def __init__(self, detail: str = None, context: Optional[Dict[str, Any]] = None):
        super().__init__(detail)
        self.detail = detail
        self.context = context or {}

    def __str__(self) -> str:
        if not self.context:
            return str(self.detail)
        extra = ", ".join(f"{key}={value}" for key, value in self.context.items())
        return f"{self.detail} ({extra})"


class DimensionError(TrajlensError):
    """텐서/벡터의 shape 또는 길이가 맞지 않을 때 발생하는 예외"""


class NonFiniteError(TrajlensError):
    """checked 모드에서 NaN/Inf 값이 발견되었을 때 발생하는 예외"""


class DivergenceError(TrajlensError):
    """학습 중 손실값이 NaN/Inf로 발산했을 때 발생하는 예외
    - 몇 번째 반복(iteration)에서 발산했는지 함께 전달한다.
    """

    def __init__(
        self,
        detail: str = None,
        iteration: Optional[int] = None,
        epoch: Optional[int] = None,
        xi: Optional[int] = None,
        loss: Optional[float] = None,
    ) -> None:
        super().__init__(detail, {"iteration": iteration, "epoch": epoch, "xi": xi, "loss": loss})
        self.iteration = iteration
        self.epoch = epoch
        self.xi = xi
        self.loss = loss


class CacheMismatchError(TrajlensError):
    """forward 캐시와 backward에 전달된 파라미터가 일치하지 않을 때 발생하는 예외"""


class ConfigValidationError(TrajlensError):
    """실험 설정 검증 실패 예외 (학습 시작 전에 발생)"""


class DataFormatError(TrajlensError):
    """데이터 파일(IDX/CSV) 파싱 실패 예외
    - IDX는 byte offset, CSV는 행 번호를 함께 전달한다.
    """

    def __init__(
        self,
        detail: str = None,
        path: Optional[str] = None,
        offset: Optional[int] = None,
        row: Optional[int] = None,
    ) -> None:
        context = {"path": path}
        if offset is not None:
            context["offset"] = offset
        if row is not None:
            context["row"] = row
        super().__init__(detail, context)
        self.path = path
        self.offset = offset
        self.row = row


class TrajectoryFormatError(TrajlensError):
    """TRJ1 파일 형식 오류의 기본 예외"""


class MagicMismatchError(TrajectoryFormatError):
    """TRJ1 헤더 매직 넘버 불일치"""


class TruncatedLogError(TrajectoryFormatError):
    """파일이 중간에 끊긴 경우"""


class ChecksumError(TrajectoryFormatError):
    """CRC32 검증 실패"""


class ReplayDivergenceError(TrajlensError):
    """재실행(replay)한 결과가 저장된 값과 비트 단위로 다를 때 발생하는 예외
    - 비결정성(버그)을 의미한다.
    """

    def __init__(self, detail: str = None, step: Optional[int] = None,
                 stored: Any = None, regenerated: Any = None) -> None:
        super().__init__(detail, {"step": step, "stored": stored, "regenerated": regenerated})
        self.step = step
        self.stored = stored
        self.regenerated = regenerated


class AnalysisError(TrajlensError):
    """γ 분석 중 유한하지 않은 중간값이 발생했을 때의 예외"""

    def __init__(self, detail: str = None, step: Optional[int] = None) -> None:
        super().__init__(detail, {"step": step})
        self.step = step


class PlotInputError(TrajlensError):
    """그래프 입력 CSV가 비어있거나 형식이 잘못된 경우"""

    def __init__(self, detail: str = None, path: Optional[str] = None) -> None:
        super().__init__(detail, {"path": path})
        self.path = path
