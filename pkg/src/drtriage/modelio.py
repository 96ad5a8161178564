"""RTM1: a flat, little-endian model file plus the inference-only path.

Layout (all integers unsigned, little-endian)::

    magic        4 bytes  b"RTM1"
    version      u16
    backbone     u32 length + UTF-8 JSON (sorted keys, compact separators)
    preproc      u32 length + UTF-8 JSON (same canonical form)
    K            u16
    temperature  f32
    count        u32
    count x      name_len u16, name bytes, rank u8, rank x u32 dims, f32 payload
    crc32        u32 over every preceding byte (reflected poly 0xEDB88320)

Parameters are written in ascending name order, so equal models give equal
bytes.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .coral import CoralHead, apply_temperature, coral_logits, decode
from .model import Model
from .preproc import PreprocConfig, preprocess

MAGIC = b"RTM1"
VERSION = 1


class ModelFormatError(ValueError):
    """Base class for unreadable model files."""


class BadMagicError(ModelFormatError):
    pass


class ChecksumError(ModelFormatError):
    pass


class VersionError(ModelFormatError):
    pass


class TruncatedError(ModelFormatError):
    pass


def _canonical_json(d: dict) -> bytes:
    return json.dumps(d, sort_keys=True, separators=(",", ":")).encode("utf-8")


@dataclass
class RawModelFile:
    version: int
    backbone: dict
    preproc: dict
    K: int
    temperature: float
    tensors: dict[str, np.ndarray]
    crc: int


def encode(backbone: dict, preproc: dict, K: int, temperature: float, tensors: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<H", VERSION)
    for blob in (_canonical_json(backbone), _canonical_json(preproc)):
        out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<Hf", K, temperature)
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        nb = name.encode("utf-8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"model file truncated: need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos}")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_file(buf: bytes) -> RawModelFile:
    buf = bytes(buf)
    if buf[:4] != MAGIC:
        raise BadMagicError("not a model file (bad magic)")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<H")
    if version > VERSION or version < 1:
        raise VersionError(f"model file version {version} unsupported (this build reads version {VERSION})")
    try:
        configs = []
        for _ in range(2):
            (n,) = r.unpack("<I")
            configs.append(json.loads(r.take(n).decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupt config block: {exc}") from None
    K, temperature = r.unpack("<Hf")
    (count,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise ModelFormatError("corrupt parameter name") from None
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I")
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        if name in tensors:
            raise ModelFormatError(f"parameter {name!r} appears twice")
        tensors[name] = data.astype(np.float32)
    body_end = r.pos
    (crc,) = r.unpack("<I")
    if r.pos != len(buf):
        raise ModelFormatError(f"{len(buf) - r.pos} trailing bytes after checksum")
    if zlib.crc32(buf[:body_end]) & 0xFFFFFFFF != crc:
        raise ChecksumError("model file corrupted (CRC mismatch)")
    return RawModelFile(version, configs[0], configs[1], K, float(temperature), tensors, crc)


def save_model(model: Model) -> bytes:
    if not isinstance(model.head, CoralHead):
        raise ModelFormatError("only CORAL models are exported")
    tensors = {n: t.data for n, t in model.named_tensors().items()}
    return encode(model.backbone.to_dict(), model.preproc.to_dict(), model.K, model.temperature, tensors)


def load_model(buf: bytes) -> Model:
    raw = decode_file(buf)
    try:
        backbone = nn.BackboneConfig.from_dict(raw.backbone)
        preproc = PreprocConfig.from_dict(raw.preproc)
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(f"invalid embedded config: {exc}") from None
    expected = dict(nn.param_shapes(backbone))
    expected["head.weight"] = (backbone.feature_dim,)
    expected["head.biases"] = (raw.K - 1,)
    missing = sorted(set(expected) - set(raw.tensors))
    extra = sorted(set(raw.tensors) - set(expected))
    if missing or extra:
        raise ModelFormatError(f"parameter table mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if raw.tensors[name].shape != tuple(shape):
            raise ModelFormatError(f"parameter {name!r} has shape {raw.tensors[name].shape}, expected {tuple(shape)}")
    params = {n: Tensor(raw.tensors[n]) for n in nn.param_shapes(backbone)}
    head = CoralHead(Tensor(raw.tensors["head.weight"]), Tensor(raw.tensors["head.biases"]))
    return Model(backbone, params, head, preproc, raw.temperature)


def dump_header(buf: bytes) -> dict:
    raw = decode_file(buf)
    return {
        "magic": MAGIC.decode(),
        "version": raw.version,
        "backbone": raw.backbone,
        "preproc": raw.preproc,
        "K": raw.K,
        "temperature": raw.temperature,
        "parameter_count": len(raw.tensors),
        "parameters": {n: list(a.shape) for n, a in sorted(raw.tensors.items())},
        "scalar_count": int(sum(a.size for a in raw.tensors.values())),
        "crc32": f"{raw.crc:08x}",
        "bytes": len(buf),
    }


def infer_batch(model: Model, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized (N, 3, S, S) batch -> (grades, cumulative probs, calibrated probs)."""
    with ad.no_grad():
        feats = nn.backbone_forward(model.backbone, model.params, batch, "eval")
        logits = coral_logits(feats, model.head).data.astype(np.float64)
    grades, probs = decode(logits)
    _, calibrated = decode(apply_temperature(logits, model.temperature))
    return np.asarray(grades), probs, calibrated


def infer(model: Model, image: np.ndarray) -> tuple[int, np.ndarray, np.ndarray]:
    """Raw RGB image -> (grade, cumulative probs, temperature-calibrated probs)."""
    x = preprocess(image, model.preproc)[None]
    grades, probs, calibrated = infer_batch(model, x)
    return int(grades[0]), probs[0], calibrated[0]
