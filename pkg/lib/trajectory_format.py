"""TRJ1 궤적 파일 형식 (little-endian)

    header   '<4sHBBIQQI'  magic, version, dtype 코드, mode 코드, meta 길이, d, T, checkpoint 수
    meta     canonical JSON (UTF-8)
    theta0   d × f8
    thetaT   d × f8
    steps    T × (k u8, xi u4, loss f8, update_sq_norm f8, coherence f8[, update d × f8|f4])
    ckpts    n × (k u8, θ_k d × f8)
    trailer  CRC32 (u4) of everything above
"""
import json
import struct
import zlib
from typing import Tuple

import numpy as np

from core.exception import (
    ChecksumError, MagicMismatchError, TrajectoryFormatError, TruncatedLogError
)
from core.models import StepRecord, TrajectoryLog, TrajectoryMeta
from lib.common import canonical_json

MAGIC = b"TRJ1"
VERSION = 1
HEADER = struct.Struct("<4sHBBIQQI")
TRAILER = struct.Struct("<I")

DTYPE_CODES = {"f64": 0, "f32": 1}
MODE_CODES = {"replay": 0, "full": 1}
UPDATE_DTYPES = {"f64": np.dtype("<f8"), "f32": np.dtype("<f4")}


def step_dtype(d: int, storage_mode: str, storage_dtype: str) -> np.dtype:
    fields = [("k", "<u8"), ("xi", "<u4"), ("loss", "<f8"), ("update_sq_norm", "<f8"), ("coherence", "<f8")]
    if storage_mode == "full":
        fields.append(("update", UPDATE_DTYPES[storage_dtype], (d,)))
    return np.dtype(fields)


def checkpoint_dtype(d: int) -> np.dtype:
    return np.dtype([("k", "<u8"), ("theta", "<f8", (d,))])


def _code_name(codes, value: int, what: str) -> str:
    for name, code in codes.items():
        if code == value:
            return name
    raise TrajectoryFormatError(f"알 수 없는 {what} 코드: {value}")


def encode_log(log: TrajectoryLog) -> bytes:
    meta = log.meta
    d, T = meta.d, len(log.steps)
    meta_bytes = canonical_json(meta.to_dict()).encode("UTF-8")

    steps = np.zeros(T, dtype=step_dtype(d, meta.storage_mode, meta.storage_dtype))
    if T:
        steps["k"] = [record.k for record in log.steps]
        steps["xi"] = [record.xi for record in log.steps]
        steps["loss"] = [record.loss for record in log.steps]
        steps["update_sq_norm"] = [record.update_sq_norm for record in log.steps]
        steps["coherence"] = [record.coherence for record in log.steps]
        if meta.storage_mode == "full":
            steps["update"] = np.stack([record.update for record in log.steps])

    checkpoint_steps = sorted(log.checkpoints)
    checkpoints = np.zeros(len(checkpoint_steps), dtype=checkpoint_dtype(d))
    if checkpoint_steps:
        checkpoints["k"] = checkpoint_steps
        checkpoints["theta"] = np.stack([log.checkpoints[k] for k in checkpoint_steps])

    header = HEADER.pack(MAGIC, VERSION, DTYPE_CODES[meta.storage_dtype], MODE_CODES[meta.storage_mode],
                         len(meta_bytes), d, T, len(log.checkpoints))
    body = b"".join([
        header,
        meta_bytes,
        np.ascontiguousarray(log.theta0, dtype="<f8").tobytes(),
        np.ascontiguousarray(log.thetaT, dtype="<f8").tobytes(),
        steps.tobytes(),
        checkpoints.tobytes(),
    ])
    return body + TRAILER.pack(zlib.crc32(body))


def _expected_length(d: int, T: int, n_ckpt: int, meta_len: int, mode: str, dtype: str) -> int:
    return (HEADER.size + meta_len + 2 * 8 * d + T * step_dtype(d, mode, dtype).itemsize
            + n_ckpt * checkpoint_dtype(d).itemsize + TRAILER.size)


def _take(data: bytes, offset: int, dtype, count: int) -> Tuple[np.ndarray, int]:
    array = np.frombuffer(data, dtype=dtype, count=count, offset=offset).copy()
    return array, offset + array.nbytes


def _is_truncated(data: bytes, header: Tuple) -> bool:
    """CRC 가 맞지 않을 때, 헤더와 meta 가 서로 일치하고 파일이 기대 길이보다 짧으면 잘린 파일로 본다."""
    _, version, dtype_code, mode_code, meta_len, d, T, n_ckpt = header
    start = HEADER.size
    if version != VERSION or start + meta_len > len(data):
        return False
    try:
        meta = json.loads(data[start:start + meta_len].decode("UTF-8"))
        storage_dtype = _code_name(DTYPE_CODES, dtype_code, "dtype")
        storage_mode = _code_name(MODE_CODES, mode_code, "mode")
        stride = meta.get("checkpoint_stride") or 0
        consistent = (meta.get("d") == d and meta.get("T") == T and meta.get("storage_mode") == storage_mode
                      and meta.get("storage_dtype") == storage_dtype
                      and n_ckpt == (len(range(0, T, stride)) if stride else 0))
        return consistent and len(data) < _expected_length(d, T, n_ckpt, meta_len, storage_mode, storage_dtype)
    except (ValueError, OverflowError, AttributeError, TrajectoryFormatError):
        return False


def decode_log(data: bytes) -> TrajectoryLog:
    """TRJ1 bytes 를 TrajectoryLog 로 복원한다.

    헤더 필드는 CRC32 검증을 통과한 뒤에만 해석한다.

    Raises:
        MagicMismatchError: 매직 넘버가 다른 경우
        TruncatedLogError: 파일이 잘린 경우
        ChecksumError: CRC32 가 맞지 않는 경우
    """
    if len(data) >= 4 and data[:4] != MAGIC:
        raise MagicMismatchError("TRJ1 파일이 아닙니다.", {"magic": data[:4]})
    if len(data) < HEADER.size + TRAILER.size:
        raise TruncatedLogError("TRJ1 헤더가 잘렸습니다.", {"length": len(data)})

    header = HEADER.unpack_from(data, 0)
    (stored_crc,) = TRAILER.unpack_from(data, len(data) - TRAILER.size)
    if zlib.crc32(data[:-TRAILER.size]) != stored_crc:
        if _is_truncated(data, header):
            raise TruncatedLogError("TRJ1 파일이 잘렸습니다.", {"length": len(data)})
        raise ChecksumError("TRJ1 CRC32 검증에 실패했습니다.", {"length": len(data)})

    _, version, dtype_code, mode_code, meta_len, d, T, n_ckpt = header
    if version != VERSION:
        raise TrajectoryFormatError(f"지원하지 않는 TRJ1 버전: {version}")
    storage_dtype = _code_name(DTYPE_CODES, dtype_code, "dtype")
    storage_mode = _code_name(MODE_CODES, mode_code, "mode")
    expected = _expected_length(d, T, n_ckpt, meta_len, storage_mode, storage_dtype)
    if len(data) != expected:
        raise TrajectoryFormatError("TRJ1 파일 길이가 헤더와 다릅니다.", {"length": len(data), "expected": expected})

    offset = HEADER.size
    meta = TrajectoryMeta.from_dict(json.loads(data[offset:offset + meta_len].decode("UTF-8")))
    offset += meta_len
    theta0, offset = _take(data, offset, "<f8", d)
    thetaT, offset = _take(data, offset, "<f8", d)
    steps, offset = _take(data, offset, step_dtype(d, storage_mode, storage_dtype), T)
    checkpoints, offset = _take(data, offset, checkpoint_dtype(d), n_ckpt)

    records = []
    for row in steps:
        update = np.array(row["update"]) if storage_mode == "full" else None
        records.append(StepRecord(int(row["k"]), int(row["xi"]), float(row["loss"]), update,
                                  float(row["update_sq_norm"]), float(row["coherence"])))
    return TrajectoryLog(
        meta=meta,
        theta0=theta0.astype(np.float64),
        thetaT=thetaT.astype(np.float64),
        steps=records,
        checkpoints={int(row["k"]): np.array(row["theta"], dtype=np.float64) for row in checkpoints},
    )


def serialize(log: TrajectoryLog, path: str) -> None:
    with open(path, "wb") as file:
        file.write(encode_log(log))


def deserialize(path: str) -> TrajectoryLog:
    with open(path, "rb") as file:
        return decode_log(file.read())
