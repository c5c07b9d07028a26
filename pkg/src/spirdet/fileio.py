"""Weight files, config files and 8-bit grayscale images.

Weight file layout (all integers little-endian)::

    b"SPIR" | u16 version | u16 flags | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dim * rank | f32 payload
    u32 CRC32 of every byte between the header and the checksum

``flags`` bit 0 marks a fused (inference-form) parameter set.
"""
import os
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .config import CONFIG_FIELDS, ConfigError, ModelConfig, VARIANT_BLOCKS, variant_config

MAGIC = b"SPIR"
VERSION = 1
FLAG_FUSED = 1
_HEADER = struct.Struct("<4sHHI")


class WeightFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class ImageFormatError(ValueError):
    pass


@dataclass
class WeightSet:
    arrays: "OrderedDict[str, np.ndarray]"
    fused: bool


# ------------------------------------------------------------------ weights


def encode_weights(arrays: Mapping[str, np.ndarray], fused: bool = False) -> bytes:
    body = bytearray()
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr)
        if a.ndim > 0xFF:
            raise ValueError(f"{name}: rank {a.ndim} too large")
        body += struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim)
        body += struct.pack(f"<{a.ndim}I", *a.shape)
        body += np.ascontiguousarray(a, dtype="<f4").tobytes()
    head = _HEADER.pack(MAGIC, VERSION, FLAG_FUSED if fused else 0, len(arrays))
    return head + bytes(body) + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_weights(data: bytes) -> WeightSet:
    if len(data) < _HEADER.size:
        raise WeightFormatError("truncated header", len(data))
    magic, version, flags, count = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise WeightFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise WeightFormatError(f"unsupported version {version}", 4)
    if len(data) < _HEADER.size + 4:
        raise WeightFormatError("missing checksum", len(data))
    body_end = len(data) - 4
    (stored,) = struct.unpack_from("<I", data, body_end)
    if zlib.crc32(data[_HEADER.size:body_end]) & 0xFFFFFFFF != stored:
        raise WeightFormatError("CRC mismatch", body_end)
    arrays = OrderedDict()
    pos = _HEADER.size

    def need(n, what):
        if pos + n > body_end:
            raise WeightFormatError(f"truncated {what}", pos)

    for _ in range(count):
        need(2, "name length")
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        need(nlen + 1, "name")
        try:
            name = data[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError("name is not UTF-8", pos) from exc
        pos += nlen
        rank = data[pos]
        pos += 1
        need(4 * rank, "shape")
        shape = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        need(nbytes, f"payload of {name!r}")
        if name in arrays:
            raise WeightFormatError(f"duplicate tensor {name!r}", pos)
        arrays[name] = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += nbytes
    if pos != body_end:
        raise WeightFormatError("trailing bytes after last tensor", pos)
    return WeightSet(arrays, bool(flags & FLAG_FUSED))


def save_weights(arrays: Mapping[str, np.ndarray], path, fused: bool = False):
    data = encode_weights(arrays, fused)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_weights(path) -> WeightSet:
    return decode_weights(Path(path).read_bytes())


def model_arrays(model) -> "OrderedDict[str, np.ndarray]":
    from .backbone import named_arrays

    return OrderedDict(named_arrays(model))


def save_model(model, path):
    save_weights(model_arrays(model), path, fused=model.fused)


def model_from_arrays(config: ModelConfig, weights: WeightSet):
    """Rebuild a model of the right form and copy every tensor into it."""
    from .backbone import build_model, fuse_model, named_arrays

    model = build_model(config, 0)
    if weights.fused:
        model = fuse_model(model)
    slots = dict(named_arrays(model))
    missing = [n for n in slots if n not in weights.arrays]
    extra = [n for n in weights.arrays if n not in slots]
    if missing or extra:
        raise ValueError(f"weights do not fit config: missing {missing[:3]}, unexpected {extra[:3]}")
    for name, dst in slots.items():
        src = weights.arrays[name]
        if src.shape != dst.shape:
            raise ValueError(f"{name}: file shape {src.shape}, model expects {dst.shape}")
        dst[...] = src
    return model


def load_model(config: ModelConfig, path):
    return model_from_arrays(config, load_weights(path))


# ------------------------------------------------------------------- config


def render_config(config: ModelConfig) -> str:
    lines = []
    for f in fields(ModelConfig):
        v = getattr(config, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> ModelConfig:
    raw: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        if key not in CONFIG_FIELDS:
            raise ConfigError(key, f"unknown key on line {lineno}")
        if key in raw:
            raise ConfigError(key, f"repeated on line {lineno}")
        raw[key] = value
    types = {f.name: f.type for f in fields(ModelConfig)}
    values = {}
    for key, value in raw.items():
        t = str(types[key])
        try:
            if "Tuple" in t or "tuple" in t:
                values[key] = tuple(int(x) for x in value.split(",") if x.strip())
            elif t in ("int", "<class 'int'>"):
                values[key] = int(value)
            elif t in ("float", "<class 'float'>"):
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError as exc:
            raise ConfigError(key, f"cannot parse {value!r}") from exc
    variant = values.get("variant", "lr")
    if variant in VARIANT_BLOCKS:
        rest = {k: v for k, v in values.items() if k != "variant"}
        return variant_config(variant, **rest)
    return ModelConfig(**values)


def save_config(config: ModelConfig, path):
    Path(path).write_text(render_config(config))


def load_config(path) -> ModelConfig:
    return parse_config(Path(path).read_text())


# ------------------------------------------------------------------- images


def _pgm_tokens(data: bytes):
    """Yield header tokens (skipping comments) and the offset after each."""
    pos, n = 0, len(data)
    while True:
        while pos < n and (data[pos:pos + 1].isspace() or data[pos:pos + 1] == b"#"):
            if data[pos:pos + 1] == b"#":
                while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated PGM header")
        yield data[start:pos], pos


def decode_pgm(data: bytes) -> np.ndarray:
    tokens = _pgm_tokens(data)
    try:
        magic, _ = next(tokens)
        if magic != b"P5":
            raise ImageFormatError(f"not a binary PGM (magic {magic!r})")
        w, _ = next(tokens)
        h, _ = next(tokens)
        maxval, pos = next(tokens)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ImageFormatError("malformed PGM header") from exc
    if w <= 0 or h <= 0 or not 0 < maxval <= 255:
        raise ImageFormatError(f"unsupported PGM geometry {w}x{h}, maxval {maxval}")
    pos += 1                                  # the single whitespace byte
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos) if len(data) >= pos + w * h else None
    if pixels is None:
        raise ImageFormatError("truncated PGM pixel data")
    return pixels.reshape(h, w)


def encode_pgm(img8: np.ndarray) -> bytes:
    img8 = np.asarray(img8, dtype=np.uint8)
    h, w = img8.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img8.tobytes()


def read_image(path) -> np.ndarray:
    """``(1, H, W)`` float32 image in [0, 1] (8-bit value / 255).

    ``.raw`` files hold bare bytes; their size comes from a sidecar
    ``<file>.dims`` text file containing ``H W``.
    """
    path = Path(path)
    if path.suffix == ".raw":
        dims = Path(f"{path}.dims")
        try:
            h, w = (int(t) for t in dims.read_text().split())
        except (OSError, ValueError) as exc:
            raise ImageFormatError(f"bad or missing sidecar {dims}") from exc
        data = path.read_bytes()
        if len(data) != h * w:
            raise ImageFormatError(f"{path}: {len(data)} bytes for {h}x{w}")
        img8 = np.frombuffer(data, dtype=np.uint8).reshape(h, w)
    else:
        img8 = decode_pgm(path.read_bytes())
    return (img8.astype(np.float32) / 255.0)[None]


def to_uint8(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    while a.ndim > 2 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ImageFormatError(f"can only write single-channel 2-D images, got {np.shape(x)}")
    return np.round(np.clip(a, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(x, path):
    img8 = to_uint8(x)
    path = Path(path)
    if path.suffix == ".raw":
        path.write_bytes(img8.tobytes())
        Path(f"{path}.dims").write_text(f"{img8.shape[0]} {img8.shape[1]}\n")
    else:
        path.write_bytes(encode_pgm(img8))
