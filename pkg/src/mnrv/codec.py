"""Weight quantization and the on-disk container.

A compressed video is the decoder's parameters plus one embedding per
frame; the encoder is discarded at save time and a loaded model cannot
encode. Every tensor is quantized independently to b-bit symbols with an
affine (scale, zero_point) map and entropy-coded with the range coder.

Container layout (all multi-byte fields little-endian):

    magic "MNRV" | version u8 | kind u8 | total_len u32 | body | crc32 u32

crc32 (zlib) covers everything before it. The body of a video container
is a JSON metadata block (architecture + channel plan), the decoder
tensors, then the frame embeddings, each tensor framed with its own
quantization parameters and payload length.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass
from dataclasses import fields as dc_fields

import numpy as np

from . import autodiff as ad
from .arch import ArchConfig, ChannelPlan, Model, build_model
from .errors import (
    ChecksumError,
    ConfigError,
    ContainerError,
    TruncatedContainerError,
    VersionError,
)
from .losses import metric_report
from .rangecoder import decode_symbols, encode_symbols

MAGIC = b"MNRV"
VERSION = 1
KIND_VIDEO = 0
KIND_CHECKPOINT = 1

_PREFIX = struct.Struct("<4sBBI")  # magic, version, kind, total_len


# -- per-tensor quantization ---------------------------------------------------

@dataclass(frozen=True)
class QuantizedTensor:
    shape: tuple[int, ...]
    scale: float
    zero_point: int
    bits: int
    symbols: np.ndarray  # flat uint32

    def __post_init__(self):
        if self.symbols.size != math.prod(self.shape):
            raise ConfigError(
                f"{self.symbols.size} symbols for shape {self.shape}"
            )


def quantize(values, bits: int) -> QuantizedTensor:
    """Affine map to b-bit integer symbols spanning [min, max]."""
    if not 1 <= bits <= 16:
        raise ConfigError(f"bit width must lie in [1,16], got {bits}")
    if isinstance(values, ad.Tensor):
        values = values.data
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ConfigError("cannot quantize an empty tensor")
    if not np.all(np.isfinite(x)):
        raise ConfigError("cannot quantize non-finite values")
    lo = float(x.min())
    hi = float(x.max())
    top = (1 << bits) - 1
    if hi > lo:
        scale = (hi - lo) / top
        zero_point = int(np.rint(-lo / scale))
        symbols = np.clip(np.rint(x / scale) + zero_point, 0, top)
    else:
        # degenerate span: one symbol (0) and a scale/zero_point pair
        # chosen so dequantization returns the constant exactly
        scale = abs(lo) if lo != 0.0 else 1.0
        zero_point = -int(np.sign(lo))
        symbols = np.zeros_like(x)
    return QuantizedTensor(
        shape=x.shape,
        scale=scale,
        zero_point=zero_point,
        bits=bits,
        symbols=symbols.astype(np.uint32).ravel(),
    )


def dequantize(q: QuantizedTensor, dtype=None) -> np.ndarray:
    out = (q.symbols.astype(np.float64) - q.zero_point) * q.scale
    return out.reshape(q.shape).astype(dtype or ad.default_dtype())


def _pack_quantized(q: QuantizedTensor) -> bytes:
    payload = encode_symbols(q.symbols, q.bits)
    head = struct.pack(
        "<dqBB", q.scale, q.zero_point, q.bits, len(q.shape)
    ) + struct.pack(f"<{len(q.shape)}I", *q.shape)
    return head + struct.pack("<I", len(payload)) + payload


def _unpack_quantized(buf, off: int) -> tuple[QuantizedTensor, int]:
    try:
        scale, zero_point, bits, ndim = struct.unpack_from("<dqBB", buf, off)
        off += 18
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        (plen,) = struct.unpack_from("<I", buf, off)
        off += 4
    except struct.error:
        raise TruncatedContainerError("tensor block header runs past the end") from None
    if off + plen > len(buf):
        raise TruncatedContainerError("tensor payload runs past the end")
    symbols, pbits = decode_symbols(bytes(buf[off:off + plen]))
    if pbits != bits:
        raise ContainerError(f"tensor bit width {bits} disagrees with payload ({pbits})")
    q = QuantizedTensor(shape=shape, scale=scale, zero_point=zero_point,
                        bits=bits, symbols=symbols)
    return q, off + plen


# raw (unquantized) array framing, shared with checkpoints -------------------

_DTYPE_CODES = {"f4": 0, "f8": 1, "u4": 2, "i8": 3, "u1": 4}
_CODE_DTYPES = {v: np.dtype("<" + k) for k, v in _DTYPE_CODES.items()}


def pack_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    key = arr.dtype.str.lstrip("<>|=")
    if key not in _DTYPE_CODES:
        raise ConfigError(f"unsupported array dtype {arr.dtype}")
    raw = arr.astype("<" + key, copy=False).tobytes()
    head = struct.pack("<BB", _DTYPE_CODES[key], arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + struct.pack("<I", len(raw)) + raw


def unpack_array(buf, off: int) -> tuple[np.ndarray, int]:
    try:
        code, ndim = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}I", buf, off)
        off += 4 * ndim
        (rlen,) = struct.unpack_from("<I", buf, off)
        off += 4
    except struct.error:
        raise TruncatedContainerError("array block header runs past the end") from None
    if code not in _CODE_DTYPES:
        raise ContainerError(f"unknown array dtype code {code}")
    if off + rlen > len(buf):
        raise TruncatedContainerError("array payload runs past the end")
    arr = np.frombuffer(bytes(buf[off:off + rlen]), dtype=_CODE_DTYPES[code])
    return arr.reshape(shape), off + rlen


# -- container framing ---------------------------------------------------------

def finish_container(kind: int, body: bytes) -> bytes:
    total = _PREFIX.size + len(body) + 4
    head = _PREFIX.pack(MAGIC, VERSION, kind, total)
    crc = zlib.crc32(head + body)
    return head + body + struct.pack("<I", crc)


def open_container(data: bytes, kind: int) -> memoryview:
    """Validate framing and return the body. Raises a distinct error for
    wrong magic, unknown version, truncation, and checksum failure."""
    if len(data) < _PREFIX.size + 4:
        raise TruncatedContainerError(
            f"container needs at least {_PREFIX.size + 4} bytes, have {len(data)}"
        )
    magic, version, got_kind, total = _PREFIX.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise VersionError(f"unknown container version {version}")
    if len(data) < total:
        raise TruncatedContainerError(
            f"container declares {total} bytes, have {len(data)}"
        )
    (stored_crc,) = struct.unpack_from("<I", data, total - 4)
    if zlib.crc32(data[:total - 4]) != stored_crc:
        raise ChecksumError("container checksum mismatch")
    if got_kind != kind:
        names = {KIND_VIDEO: "a compressed video", KIND_CHECKPOINT: "a training checkpoint"}
        raise ContainerError(
            f"container holds {names.get(got_kind, 'unknown data')}, "
            f"expected {names[kind]}"
        )
    return memoryview(data)[_PREFIX.size:total - 4]


def _pack_json(obj) -> bytes:
    blob = json.dumps(obj, sort_keys=True).encode()
    return struct.pack("<I", len(blob)) + blob


def _unpack_json(buf, off: int):
    try:
        (n,) = struct.unpack_from("<I", buf, off)
    except struct.error:
        raise TruncatedContainerError("metadata length runs past the end") from None
    off += 4
    if off + n > len(buf):
        raise TruncatedContainerError("metadata runs past the end")
    try:
        obj = json.loads(bytes(buf[off:off + n]).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"metadata is not valid JSON: {exc}") from None
    return obj, off + n


def config_to_dict(config: ArchConfig) -> dict:
    out = {}
    for f in dc_fields(config):
        v = getattr(config, f.name)
        out[f.name] = list(v) if isinstance(v, tuple) else v
    return out


def config_from_dict(d: dict) -> ArchConfig:
    names = {f.name for f in dc_fields(ArchConfig)}
    unknown = set(d) - names
    if unknown:
        raise ContainerError(f"unknown architecture fields {sorted(unknown)}")
    missing = names - set(d)
    if missing:
        raise ContainerError(f"missing architecture fields {sorted(missing)}")
    return ArchConfig(**d)


# -- compressed video ----------------------------------------------------------

def save_container(model: Model, embeddings, bits: int = 8) -> bytes:
    """Serialize decoder parameters + per-frame embeddings, quantized to
    ``bits``. The encoder is intentionally not stored."""
    if not embeddings:
        raise ConfigError("need at least one frame embedding")
    emb_shape = tuple(model.embedding)
    arrays = []
    for i, e in enumerate(embeddings):
        e = e.data if isinstance(e, ad.Tensor) else np.asarray(e)
        if tuple(e.shape) != emb_shape:
            raise ConfigError(
                f"embedding {i} has shape {tuple(e.shape)}, expected {emb_shape}"
            )
        arrays.append(e)

    meta = {
        "config": config_to_dict(model.config),
        "widths": list(model.plan.widths),
        "realized_size": model.plan.realized_size,
        "frames": len(arrays),
    }
    body = bytearray(_pack_json(meta))
    params = model.decoder.parameters()
    body += struct.pack("<I", len(params))
    for p in params:
        body += _pack_quantized(quantize(p.data, bits))
    body += struct.pack("<I", len(arrays))
    for e in arrays:
        body += _pack_quantized(quantize(e, bits))
    return finish_container(KIND_VIDEO, bytes(body))


def load_container(data: bytes) -> tuple[Model, list[np.ndarray]]:
    """Rebuild a decode-only model (encoder is None) and its embeddings."""
    body = open_container(data, KIND_VIDEO)
    meta, off = _unpack_json(body, 0)
    try:
        config = config_from_dict(meta["config"])
        plan = ChannelPlan(widths=tuple(meta["widths"]),
                           realized_size=int(meta["realized_size"]))
        n_frames = int(meta["frames"])
    except (KeyError, TypeError) as exc:
        raise ContainerError(f"metadata is incomplete: {exc}") from None

    model = build_model(config, plan, seed=0)
    model.encoder = None
    params = model.decoder.parameters()
    try:
        (n_params,) = struct.unpack_from("<I", body, off)
    except struct.error:
        raise TruncatedContainerError("parameter count runs past the end") from None
    off += 4
    if n_params != len(params):
        raise ContainerError(
            f"container stores {n_params} decoder tensors, architecture has {len(params)}"
        )
    for p in params:
        q, off = _unpack_quantized(body, off)
        if q.shape != p.shape:
            raise ContainerError(
                f"stored tensor shape {q.shape} does not match architecture {p.shape}"
            )
        p.data = dequantize(q)

    try:
        (stored_frames,) = struct.unpack_from("<I", body, off)
    except struct.error:
        raise TruncatedContainerError("frame count runs past the end") from None
    off += 4
    if stored_frames != n_frames:
        raise ContainerError(
            f"metadata says {n_frames} frames, body stores {stored_frames}"
        )
    embeddings = []
    for _ in range(n_frames):
        q, off = _unpack_quantized(body, off)
        embeddings.append(dequantize(q))
    return model, embeddings


# -- rate/distortion accounting ------------------------------------------------

@dataclass(frozen=True)
class RateReport:
    bits: int            # quantizer bit width
    total_bits: int      # container size
    weight_bits: int     # decoder tensor blocks
    embedding_bits: int  # per-frame embedding blocks
    header_bits: int     # framing + metadata
    bpp: float
    psnr: float
    ms_ssim: float


def _section_bits(data: bytes) -> tuple[int, int, int, int]:
    body = open_container(data, KIND_VIDEO)
    meta, off = _unpack_json(body, 0)
    (n_params,) = struct.unpack_from("<I", body, off)
    off += 4
    start = off
    for _ in range(n_params):
        _, off = _unpack_quantized(body, off)
    weight_bits = (off - start) * 8
    (n_frames,) = struct.unpack_from("<I", body, off)
    off += 4
    start = off
    for _ in range(n_frames):
        _, off = _unpack_quantized(body, off)
    embedding_bits = (off - start) * 8
    total_bits = len(data) * 8
    return total_bits, weight_bits, embedding_bits, total_bits - weight_bits - embedding_bits


def rate_report(blob: bytes, frames, scales: int | None = None) -> RateReport:
    """Decode a container and measure its rate and reconstruction quality
    against the given original frames."""
    total, weight, emb, header = _section_bits(blob)
    model, embeddings = load_container(blob)
    if len(embeddings) != len(frames):
        raise ConfigError(
            f"container has {len(embeddings)} frames, reference has {len(frames)}"
        )
    with ad.no_grad():
        preds = [model.decode(ad.Tensor(e)) for e in embeddings]
    targets = [f if isinstance(f, ad.Tensor) else ad.Tensor(np.asarray(f)) for f in frames]
    report = metric_report(preds, targets, scales=scales)
    h, w = model.frame_hw
    bpp = total / (len(frames) * h * w)
    # quantizer width is uniform across tensors; read it back from the first
    body = open_container(blob, KIND_VIDEO)
    _, off = _unpack_json(body, 0)
    off += 4
    q, _ = _unpack_quantized(body, off)
    return RateReport(bits=q.bits, total_bits=total, weight_bits=weight,
                      embedding_bits=emb, header_bits=header, bpp=bpp,
                      psnr=report.psnr, ms_ssim=report.ms_ssim)


def rate_distortion(model: Model, frames, bit_widths=(4, 6, 8, 12, 16),
                    scales: int | None = None) -> list[RateReport]:
    """Sweep quantizer bit widths and report rate/quality for each."""
    embeddings = []
    with ad.no_grad():
        for f in frames:
            t = f if isinstance(f, ad.Tensor) else ad.Tensor(np.asarray(f))
            embeddings.append(model.encode(t).data)
    reports = []
    for b in bit_widths:
        blob = save_container(model, embeddings, bits=b)
        reports.append(rate_report(blob, frames, scales=scales))
    return reports


def rate_csv(reports) -> str:
    lines = ["bits,bpp,psnr,ms_ssim"]
    for r in reports:
        lines.append(f"{r.bits},{r.bpp:.8f},{r.psnr:.6f},{r.ms_ssim:.8f}")
    return "\n".join(lines) + "\n"
