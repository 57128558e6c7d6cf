"""Trained model container and its binary file format.

Layout (little-endian):
    magic   4 bytes  "NESI"
    version u32      1; bit 8 set when any HF carries a cutting plane
    m       u8       number of HFs
    meta    u32 len + UTF-8 JSON (training provenance)
    DHF     frame (9 f64: u_axis, v_axis, axis) + net block
    per HF  flags u8 (bit0: cutting plane)
            frame (9 f64)
            [plane: normal 3 f64, offset f64, side f64, eps f64]
            height net block + mask net block
    crc     u32      CRC32 of everything before it

A net block is the MLPSpec header followed by float32 weights, layer-major,
row-major, bias after each matrix. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .explicit import CutPlaneRelax, LocalFrame
from .net import (MLPParams, SPEC_BYTES, params_from_bytes, params_to_bytes,
                  spec_from_bytes, spec_to_bytes)

MAGIC = b"NESI"
VERSION = 1
VERSION_CUT_FLAG = 1 << 8


class ModelFormatError(ValueError):
    pass


@dataclass
class HFNets:
    frame: LocalFrame
    height: MLPParams
    mask: MLPParams
    plane: Optional[CutPlaneRelax] = None


@dataclass
class NESIModel:
    dhf_frame: LocalFrame
    dhf_params: MLPParams
    hfs: list[HFNets]
    metadata: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return len(self.hfs)

    def parameter_count(self) -> int:
        total = self.dhf_params.spec.param_count
        for hf in self.hfs:
            total += hf.height.spec.param_count + hf.mask.spec.param_count
        return total


def _frame_bytes(frame: LocalFrame) -> bytes:
    rows = np.concatenate([frame.u_axis, frame.v_axis, frame.axis]).astype("<f8")
    return rows.tobytes()


def _frame_from(data: bytes) -> LocalFrame:
    rows = np.frombuffer(data, dtype="<f8", count=9)
    return LocalFrame(axis=rows[6:9].copy(), u_axis=rows[0:3].copy(),
                      v_axis=rows[3:6].copy(), origin=np.zeros(3))


def _net_bytes(params: MLPParams) -> bytes:
    return spec_to_bytes(params.spec) + params_to_bytes(params)


def save_model(model: NESIModel, path) -> None:
    out = bytearray()
    out += MAGIC
    version = VERSION
    if any(hf.plane is not None for hf in model.hfs):
        version |= VERSION_CUT_FLAG
    out += struct.pack("<IB", version, model.m)
    meta = json.dumps(model.metadata, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    out += _frame_bytes(model.dhf_frame)
    out += _net_bytes(model.dhf_params)
    for hf in model.hfs:
        flags = 1 if hf.plane is not None else 0
        out += struct.pack("<B", flags)
        out += _frame_bytes(hf.frame)
        if hf.plane is not None:
            out += np.asarray(hf.plane.normal, dtype="<f8").tobytes()
            out += struct.pack("<ddd", hf.plane.offset, hf.plane.side, hf.plane.eps)
        out += _net_bytes(hf.height)
        out += _net_bytes(hf.mask)
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(out))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise ModelFormatError("truncated model file")
        chunk = self.data[self.off:self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_net(r: _Reader) -> MLPParams:
    spec = spec_from_bytes(r.take(SPEC_BYTES))
    return params_from_bytes(spec, r.take(4 * spec.param_count))


def load_model(path) -> NESIModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 13:
        raise ModelFormatError("truncated model file")
    if data[:4] != MAGIC:
        raise ModelFormatError("bad magic")
    (crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise ModelFormatError("checksum failure")
    r = _Reader(data[:-4])
    r.take(4)
    version, m = r.unpack("<IB")
    if version & 0xFF != VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    (meta_len,) = r.unpack("<I")
    metadata = json.loads(r.take(meta_len).decode("utf-8")) if meta_len else {}
    dhf_frame = _frame_from(r.take(72))
    dhf_params = _read_net(r)
    hfs = []
    for _ in range(m):
        (flags,) = r.unpack("<B")
        frame = _frame_from(r.take(72))
        plane = None
        if flags & 1:
            normal = np.frombuffer(r.take(24), dtype="<f8").copy()
            offset, side, eps = r.unpack("<ddd")
            plane = CutPlaneRelax(normal=normal, offset=offset, side=side, eps=eps)
        height = _read_net(r)
        mask = _read_net(r)
        hfs.append(HFNets(frame=frame, height=height, mask=mask, plane=plane))
    if r.off != len(r.data):
        raise ModelFormatError("trailing bytes in model file")
    return NESIModel(dhf_frame=dhf_frame, dhf_params=dhf_params, hfs=hfs,
                     metadata=metadata)
