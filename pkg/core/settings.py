import logging
import os
from typing import Literal

from dotenv import dotenv_values, load_dotenv
from pydantic import TypeAdapter, ValidationError
from typing_extensions import Annotated

logger = logging.getLogger(__name__)

LogLevel = Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


class RuntimeSetting:
    """
    실행 환경 설정 클래스
    - .env 파일과 환경 변수에서 설정을 읽는다. (환경 변수가 우선)
    - 싱글톤 패턴 구현 (프로세스 당 하나의 설정 유지)
    """

    _threads: Annotated[int, 1]
    _log_level: Annotated[str, "INFO"]
    _runs_dir: Annotated[str, "runs"]
    _checked: Annotated[bool, True]
    _instance: Annotated["RuntimeSetting", None] = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance.load()
        return cls._instance

    @property
    def threads(self) -> int:
        return self._threads

    @property
    def log_level(self) -> int:
        return logging.getLevelName(self._log_level)

    @property
    def runs_dir(self) -> str:
        return self._runs_dir

    @property
    def checked(self) -> bool:
        return self._checked

    @checked.setter
    def checked(self, checked: bool) -> None:
        self._checked = checked

    def load(self) -> None:
        """.env 파일을 읽어 설정값을 갱신한다."""
        load_dotenv()
        env_values = dotenv_values()
        # 이미 export된 환경 변수가 .env 값보다 우선한다.
        env_values = {**env_values, **{k: v for k, v in os.environ.items() if k.startswith("TRAJLENS_")}}

        threads = TypeAdapter(int).validate_python(env_values.get("TRAJLENS_THREADS") or 1)
        self._threads = max(1, threads)
        self._log_level = _parse_log_level(env_values.get("TRAJLENS_LOG_LEVEL"))
        self._runs_dir = env_values.get("TRAJLENS_RUNS_DIR") or "runs"
        self._checked = TypeAdapter(bool).validate_python(env_values.get("TRAJLENS_CHECKED", True))


def _parse_log_level(value) -> str:
    """알 수 없는 로그 레벨은 경고 후 INFO 로 대체한다."""
    level = str(value or "INFO").upper()
    try:
        return TypeAdapter(LogLevel).validate_python(level)
    except ValidationError:
        logger.warning(f"Unknown TRAJLENS_LOG_LEVEL {value!r}, falling back to INFO")
        return "INFO"


def is_checked_mode() -> bool:
    """tensor 연산의 NaN/Inf 검사 사용 여부"""
    return RuntimeSetting().checked
