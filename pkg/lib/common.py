import hashlib
import json
import os
from typing import Any

import numpy as np

# 전역변수 선언(global variables)
VERSION_PATH = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "version.txt")


def read_version() -> str:
    """루트 디렉토리의 version.txt 파일을 읽어서 버전을 반환하는 함수
    Returns:
        str: 버전
    """
    with open(VERSION_PATH, "r", encoding="UTF-8") as file:
        return file.read().strip()


def make_directory(directory: str):
    """경로 체크 및 생성

    Args:
        directory (str): 생성할 경로
    """
    if not os.path.exists(directory):
        os.makedirs(directory)


def _json_default(value: Any):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"JSON 으로 변환할 수 없는 값: {type(value)}")


def canonical_json(data: Any) -> str:
    """key 정렬, 공백 없는 JSON 문자열 (digest 와 TRJ1 meta 에 사용)"""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=_json_default)


def digest(data: Any) -> str:
    """canonical JSON 의 sha256 hex"""
    return hashlib.sha256(canonical_json(data).encode("UTF-8")).hexdigest()


def write_json(path: str, data: Any):
    with open(path, "w", encoding="UTF-8") as file:
        json.dump(data, file, indent=4, ensure_ascii=False, sort_keys=True, default=_json_default)


def file_sha256(path: str) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as file:
        for chunk in iter(lambda: file.read(1 << 20), b""):
            sha.update(chunk)
    return sha.hexdigest()
