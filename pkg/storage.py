"""
RHD1 binary records (frames, input stacks, checkpoints) and plain PGM images
"""

import json
import logging
import struct
from enum import IntEnum
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from autodiff import AdamState, Tensor
from dsp import AzimuthGrid, ImageKind, PolarImage
from errors import DataError
from model import ModelParams
from schemas import UNetConfig
from sim import Pose

logger = logging.getLogger(__name__)

MAGIC = b"RHD1"
VERSION = 1
_U32 = struct.Struct("<I")


class BlobKind(IntEnum):
    RADAR = 1
    LIDAR = 2
    META = 3
    STACK = 4
    PARAM = 5
    ADAM_M = 6
    ADAM_V = 7
    CONFIG = 8


_U8_KINDS = {BlobKind.LIDAR, BlobKind.CONFIG}


def encode_blob(kind: BlobKind, array: np.ndarray) -> bytes:
    """magic, u32 version, u32 kind, u32 ndims, dims, little-endian payload"""
    array = np.asarray(array)
    dtype = "<u1" if kind in _U8_KINDS else "<f4"
    header = MAGIC + b"".join(_U32.pack(v) for v in (VERSION, int(kind), array.ndim, *array.shape))
    return header + np.ascontiguousarray(array, dtype=dtype).tobytes()


def decode_blob(buf: bytes, offset: int = 0) -> Tuple[BlobKind, np.ndarray, int]:
    """Returns the kind, the array and the offset just past the blob"""
    if buf[offset:offset + 4] != MAGIC:
        raise DataError(f"bad magic at offset {offset}")
    try:
        version, kind, ndims = struct.unpack_from("<3I", buf, offset + 4)
        if version != VERSION:
            raise DataError(f"unsupported RHD1 version {version}")
        kind = BlobKind(kind)
        dims = struct.unpack_from(f"<{ndims}I", buf, offset + 16)
    except (struct.error, ValueError) as e:
        raise DataError(f"corrupt RHD1 header at offset {offset}: {e}") from e
    start = offset + 16 + 4 * ndims
    dtype = np.dtype("<u1" if kind in _U8_KINDS else "<f4")
    count = int(np.prod(dims, dtype=np.int64))
    end = start + count * dtype.itemsize
    if end > len(buf):
        raise DataError(f"truncated RHD1 payload at offset {offset}")
    array = np.frombuffer(buf, dtype=dtype, count=count, offset=start).reshape(dims)
    return kind, array.astype(dtype.newbyteorder("="), copy=True), end


def _expect(buf: bytes, offset: int, kind: BlobKind) -> Tuple[np.ndarray, int]:
    got, array, end = decode_blob(buf, offset)
    if got != kind:
        raise DataError(f"expected {kind.name} blob at offset {offset}, found {got.name}")
    return array, end


# Frame records
def f32_pose(pose: Pose) -> Pose:
    """Pose rounded to what the META blob can hold"""
    for _ in range(2):
        pose = Pose(x=float(np.float32(pose.x)), y=float(np.float32(pose.y)),
                    heading=float(np.float32(pose.heading)))
    return pose


class FrameRecord(BaseModel):
    radar: PolarImage  # normalized-sparse input channel, f32 values
    lidar: PolarImage  # binary label
    pose: Pose
    index: int = Field(ge=0)

    model_config = ConfigDict(arbitrary_types_allowed=True)

    @classmethod
    def build(cls, radar: PolarImage, lidar: PolarImage, pose: Pose, index: int) -> "FrameRecord":
        return cls(radar=radar.with_data(radar.data.astype(np.float32), radar.kind), lidar=lidar,
                   pose=f32_pose(pose), index=index)


def encode_frame(record: FrameRecord) -> bytes:
    meta = np.array([record.pose.x, record.pose.y, record.pose.heading, record.index])
    return (encode_blob(BlobKind.RADAR, record.radar.data)
            + encode_blob(BlobKind.LIDAR, record.lidar.data)
            + encode_blob(BlobKind.META, meta))


def decode_frame(buf: bytes, offset: int = 0, max_range: float = 10.0) -> Tuple[FrameRecord, int]:
    radar, pos = _expect(buf, offset, BlobKind.RADAR)
    lidar, pos = _expect(buf, pos, BlobKind.LIDAR)
    meta, pos = _expect(buf, pos, BlobKind.META)
    record = FrameRecord(
        radar=PolarImage(data=radar, kind=ImageKind.NORMALIZED, max_range=max_range,
                         azimuth_grid=AzimuthGrid.BEAMSPACE),
        lidar=PolarImage(data=lidar.astype(np.float64), kind=ImageKind.BINARY, max_range=max_range,
                         azimuth_grid=AzimuthGrid.ANGLE),
        pose=Pose(x=float(meta[0]), y=float(meta[1]), heading=float(meta[2])),
        index=int(meta[3]),
    )
    return record, pos


def write_trajectory(path: Path, records: Sequence[FrameRecord]) -> List[int]:
    """Concatenated frame records; returns the byte offset of each"""
    offsets, chunks, pos = [], [], 0
    for record in records:
        chunk = encode_frame(record)
        offsets.append(pos)
        chunks.append(chunk)
        pos += len(chunk)
    Path(path).write_bytes(b"".join(chunks))
    return offsets


def read_trajectory(path: Path, offsets: Sequence[int], max_range: float = 10.0) -> List[FrameRecord]:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"trajectory file missing: {path}") from e
    return [decode_frame(buf, off, max_range)[0] for off in offsets]


# Input stacks
def encode_stack(stack: np.ndarray) -> bytes:
    return encode_blob(BlobKind.STACK, stack)


def decode_stack(buf: bytes) -> np.ndarray:
    stack, _ = _expect(buf, 0, BlobKind.STACK)
    if stack.ndim != 3:
        raise DataError(f"stack must be [channels, range, azimuth], got {stack.shape}")
    return stack


def write_stack(path: Path, stack: np.ndarray) -> None:
    Path(path).write_bytes(encode_stack(stack))


def read_stack(path: Path) -> np.ndarray:
    try:
        return decode_stack(Path(path).read_bytes())
    except FileNotFoundError as e:
        raise DataError(f"stack file missing: {path}") from e


# Checkpoints
class Checkpoint(NamedTuple):
    params: ModelParams
    optimizer_state: Optional[AdamState]
    epoch: int  # next epoch to run
    loss_curve: List[float]


def encode_checkpoint(params: ModelParams, optimizer_state: Optional[AdamState] = None, epoch: int = 0,
                      loss_curve: Sequence[float] = ()) -> bytes:
    names = list(params.tensors)
    header = {
        "unet": params.config.model_dump(),
        "seed": params.seed,
        "names": names,
        "adam_t": optimizer_state.t if optimizer_state else None,
        "epoch": epoch,
        "loss_curve": list(loss_curve),
    }
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [encode_blob(BlobKind.CONFIG, np.frombuffer(text, dtype=np.uint8))]
    chunks += [encode_blob(BlobKind.PARAM, params.tensors[n].data) for n in names]
    if optimizer_state is not None and optimizer_state.m:
        chunks += [encode_blob(BlobKind.ADAM_M, optimizer_state.m[n]) for n in names]
        chunks += [encode_blob(BlobKind.ADAM_V, optimizer_state.v[n]) for n in names]
    return b"".join(chunks)


def decode_checkpoint(buf: bytes) -> Checkpoint:
    raw, pos = _expect(buf, 0, BlobKind.CONFIG)
    try:
        header = json.loads(raw.tobytes().decode("utf-8"))
        cfg = UNetConfig.model_validate(header["unet"])
        names, seed, adam_t = header["names"], header["seed"], header["adam_t"]
        epoch, curve = header["epoch"], header["loss_curve"]
    except (ValueError, KeyError) as e:
        raise DataError(f"corrupt checkpoint header: {e}") from e
    tensors: Dict[str, Tensor] = {}
    for name in names:
        array, pos = _expect(buf, pos, BlobKind.PARAM)
        tensors[name] = Tensor(array)
    params = ModelParams(config=cfg, seed=seed, tensors=tensors)
    state = None
    if adam_t is not None and pos < len(buf):
        m, v = {}, {}
        for name in names:
            m[name], pos = _expect(buf, pos, BlobKind.ADAM_M)
        for name in names:
            v[name], pos = _expect(buf, pos, BlobKind.ADAM_V)
        state = AdamState(m, v, adam_t)
    return Checkpoint(params, state, epoch, curve)


def save_checkpoint(path: Path, params: ModelParams, optimizer_state: Optional[AdamState] = None, epoch: int = 0,
                    loss_curve: Sequence[float] = ()) -> None:
    Path(path).write_bytes(encode_checkpoint(params, optimizer_state, epoch, loss_curve))
    logger.info(f"Checkpoint saved to {path}")


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError as e:
        raise DataError(f"checkpoint not found: {path}") from e
    return decode_checkpoint(buf)


# Images
def to_gray(data: np.ndarray, normalize: bool = False) -> np.ndarray:
    data = np.asarray(data, dtype=np.float64)
    if normalize:
        lo, hi = float(data.min()), float(data.max())
        data = (data - lo) / (hi - lo) if hi > lo else np.zeros_like(data)
    return np.clip(np.round(data * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path: Path, data: np.ndarray, normalize: bool = False) -> None:
    """Plain (P2) 8-bit PGM; row 0 (nearest range) is written last so range grows upward"""
    gray = to_gray(data, normalize)[::-1]
    rows = [" ".join(str(v) for v in row) for row in gray]
    text = f"P2\n{gray.shape[1]} {gray.shape[0]}\n255\n" + "\n".join(rows) + "\n"
    Path(path).write_text(text, encoding="ascii")


def read_pgm(path: Path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if tokens[0] != "P2":
        raise DataError(f"{path} is not a plain PGM")
    width, height = int(tokens[1]), int(tokens[2])
    values = np.array(tokens[4:4 + width * height], dtype=np.uint8)
    return values.reshape(height, width)[::-1]


def triptych(radar: np.ndarray, prediction: np.ndarray, lidar: np.ndarray, gap: int = 2) -> np.ndarray:
    """Radar input (columns repeated to the output width) | prediction | lidar, white separators"""
    factor = prediction.shape[1] // radar.shape[1]
    wide = np.repeat(radar, factor, axis=1)
    sep = np.ones((prediction.shape[0], gap))
    return np.concatenate([wide, sep, prediction, sep, lidar], axis=1)
