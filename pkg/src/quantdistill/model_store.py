"""Model file format and bit-exact size accounting.

File layout (QFMD, all multi-byte values little-endian)::

    magic        4s   "QFMD"
    version      u16  1
    mode         u8   0 = fp32, 1 = quantized
    bit_width    u8   0 for fp32 files
    layer_count  u16
    per layer:
      kind       u8   0 = linear, 1 = relu
      linear only:
        out_dim  u32
        in_dim   u32
        payload  u8   0 = raw fp32 weights, 1 = packed codes
        payload 0: out*in f32 weights (row-major)
        payload 1: out x qparams block, then ceil(out*in*b/8) packed code
                   bytes (codes offset to unsigned, b bits each, LSB-first)
        bias     out x f32
    activation_count u16, then that many qparams blocks
    crc32        u32  over everything between magic and this field

A qparams block is scale f32, zero_point i32, bit_width u8, range_lo f32,
range_hi f32 (17 bytes). Codes are packed at their true bit width so the
file size obeys the b/32 payload law. Files are written atomically
(temp file + rename) and contain no timestamps, so identical nets produce
identical bytes.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, DomainError, FormatError, StateError
from .graph import EmbeddingNet, Linear, Relu
from .quantizer import QuantParams, dequantize, quantize, QuantizedTensor
from .tensor_core import Tensor

MODEL_MAGIC = b"QFMD"
MODEL_VERSION = 1
MODE_FP32 = 0
MODE_QUANTIZED = 1
FP32_BYTES_PER_PARAM = 4
QPARAMS_STRUCT = struct.Struct("<fiBff")  # 17 bytes


# -- bit packing ---------------------------------------------------------------


def pack_codes(codes: np.ndarray, bit_width: int) -> bytes:
    """Pack signed codes into a dense little-endian bitstream of b-bit fields."""
    offset = 1 << (bit_width - 1)
    u = (codes.astype(np.int64).ravel() + offset)
    if u.min() < 0 or u.max() >= (1 << bit_width):
        raise DomainError(f"codes do not fit {bit_width} bits")
    bits = np.unpackbits(u.astype(np.uint8)[:, None], axis=1, bitorder="little")[:, :bit_width]
    return np.packbits(bits.ravel(), bitorder="little").tobytes()


def unpack_codes(blob: bytes, count: int, bit_width: int) -> np.ndarray:
    """Inverse of pack_codes; returns int32 codes."""
    need = (count * bit_width + 7) // 8
    if len(blob) < need:
        raise FormatError(f"need {need} code bytes, have {len(blob)}", field="codes")
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8, count=need),
                         bitorder="little")[: count * bit_width]
    fields = bits.reshape(count, bit_width)
    padded = np.zeros((count, 8), dtype=np.uint8)
    padded[:, :bit_width] = fields
    u = np.packbits(padded, axis=1, bitorder="little")[:, 0].astype(np.int32)
    return u - (1 << (bit_width - 1))


def packed_code_bytes(count: int, bit_width: int) -> int:
    return (count * bit_width + 7) // 8


# -- qparams blocks ------------------------------------------------------------


def _pack_qparams(p: QuantParams) -> bytes:
    return QPARAMS_STRUCT.pack(p.scale, p.zero_point, p.bit_width, p.range_lo, p.range_hi)


def _unpack_qparams(blob: bytes, offset: int) -> tuple[QuantParams, int]:
    if len(blob) < offset + QPARAMS_STRUCT.size:
        raise FormatError("truncated quantization parameters", field="qparams", offset=offset)
    scale, zp, bits, lo, hi = QPARAMS_STRUCT.unpack_from(blob, offset)
    try:
        p = QuantParams(scale=float(scale), zero_point=int(zp), bit_width=int(bits),
                        range_lo=float(lo), range_hi=float(hi))
    except (DomainError, DimensionError) as exc:
        raise FormatError(f"invalid quantization parameters: {exc}",
                          field="qparams", offset=offset) from exc
    return p, offset + QPARAMS_STRUCT.size


# -- save / load ---------------------------------------------------------------


def save_model(net: EmbeddingNet, path, mode: str) -> None:
    """Serialize a net; mode is "fp32" or "quantized".

    Quantized files store per-channel weight codes plus parameters and the
    frozen activation parameters, so saving requires a calibrated net.
    """
    if mode == "fp32":
        blob = _encode(net, quantized=False)
    elif mode == "quantized":
        if not net.is_calibrated:
            raise StateError("cannot save quantized: net is not calibrated")
        blob = _encode(net, quantized=True)
    else:
        raise DomainError(f"unknown mode {mode!r}")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def _encode(net: EmbeddingNet, quantized: bool) -> bytes:
    body = bytearray()
    body += struct.pack("<H", MODEL_VERSION)
    body += struct.pack("<BB", MODE_QUANTIZED if quantized else MODE_FP32,
                        net.quant_bits if quantized else 0)
    body += struct.pack("<H", len(net.layers))
    linear_index = 0
    for layer in net.layers:
        if isinstance(layer, Relu):
            body += struct.pack("<B", 1)
            continue
        out_dim, in_dim = layer.weight.shape
        body += struct.pack("<BIIB", 0, out_dim, in_dim, 1 if quantized else 0)
        if quantized:
            if net.frozen_weight_params is not None:
                wp = net.frozen_weight_params[linear_index]
            else:
                from .quantizer import derive_params

                wp = derive_params(layer.weight, net.quant_bits, channel_axis=0)
            q = quantize(layer.weight, wp, channel_axis=0)
            for p in wp:
                body += _pack_qparams(p)
            body += pack_codes(q.codes, net.quant_bits)
        else:
            body += layer.weight.data.astype("<f4").tobytes()
        body += layer.bias.data.astype("<f4").tobytes()
        linear_index += 1
    act = net.activation_params if (quantized and net.activation_params) else []
    body += struct.pack("<H", len(act))
    for p in act:
        body += _pack_qparams(p)
    crc = zlib.crc32(bytes(body)) & 0xFFFFFFFF
    return MODEL_MAGIC + bytes(body) + struct.pack("<I", crc)


def load_model(path) -> EmbeddingNet:
    """Reconstruct a net from a model file.

    Quantized files come back with shadow weights set to the dequantized
    grid values and the stored weight parameters pinned, so a quantized
    forward reproduces the saved model's outputs bit-exactly.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 or blob[:4] != MODEL_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}", field="magic", offset=0)
    if len(blob) < 8 + 4:
        raise FormatError("file shorter than minimal layout", field="header", offset=len(blob))
    body, stored_crc = blob[4:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != stored_crc:
        raise FormatError("payload checksum mismatch", field="checksum", offset=len(blob) - 4)

    off = 0

    def take(fmt: str):
        nonlocal off
        s = struct.Struct(fmt)
        if len(body) < off + s.size:
            raise FormatError("truncated header", field="header", offset=4 + off)
        vals = s.unpack_from(body, off)
        off += s.size
        return vals

    (version,) = take("<H")
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported version {version}", field="version", offset=4)
    mode, bit_width = take("<BB")
    if mode not in (MODE_FP32, MODE_QUANTIZED):
        raise FormatError(f"unknown mode {mode}", field="mode", offset=6)
    (layer_count,) = take("<H")

    layers: list[Linear | Relu] = []
    weight_params: list[list[QuantParams]] = []
    for _ in range(layer_count):
        (kind,) = take("<B")
        if kind == 1:
            layers.append(Relu())
            continue
        if kind != 0:
            raise FormatError(f"unknown layer kind {kind}", field="layer_kind", offset=4 + off - 1)
        out_dim, in_dim, payload = take("<IIB")
        if payload == 0:
            n = out_dim * in_dim
            if len(body) < off + n * 4:
                raise FormatError("truncated weights", field="weights", offset=4 + off)
            w = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(out_dim, in_dim)
            off += n * 4
        elif payload == 1:
            if mode != MODE_QUANTIZED:
                raise FormatError("packed codes in an fp32 file", field="payload", offset=4 + off)
            wp = []
            for _ in range(out_dim):
                p, off = _unpack_qparams(body, off)
                wp.append(p)
            nbytes = packed_code_bytes(out_dim * in_dim, bit_width)
            if len(body) < off + nbytes:
                raise FormatError("truncated codes", field="codes", offset=4 + off)
            codes = unpack_codes(body[off:off + nbytes], out_dim * in_dim,
                                 bit_width).reshape(out_dim, in_dim)
            off += nbytes
            q = QuantizedTensor(codes=codes, shape=(out_dim, in_dim),
                                params=tuple(wp), channel_axis=0)
            w = dequantize(q).data
            weight_params.append(wp)
        else:
            raise FormatError(f"unknown payload kind {payload}", field="payload", offset=4 + off)
        if len(body) < off + out_dim * 4:
            raise FormatError("truncated bias", field="bias", offset=4 + off)
        b = np.frombuffer(body, dtype="<f4", count=out_dim, offset=off)
        off += out_dim * 4
        layers.append(Linear(weight=Tensor(w), bias=Tensor(b)))

    (act_count,) = take("<H")
    act_params = []
    for _ in range(act_count):
        p, off = _unpack_qparams(body, off)
        act_params.append(p)
    if off != len(body):
        raise FormatError(f"{len(body) - off} trailing bytes", field="trailer", offset=4 + off)

    net = EmbeddingNet(layers)
    if mode == MODE_QUANTIZED:
        if len(weight_params) != len(net.linear_layers):
            raise FormatError("weight parameter blocks do not match linear layers",
                              field="layers")
        if len(act_params) != net.activation_site_count:
            raise FormatError(
                f"{len(act_params)} activation parameters for "
                f"{net.activation_site_count} sites", field="activations")
        net.quant_bits = bit_width
        net.activation_params = act_params
        net.frozen_weight_params = weight_params
    return net


# -- size accounting -----------------------------------------------------------


@dataclass(frozen=True)
class SizeReport:
    """Storage footprint of a parameter set under the exact bit-packing law."""

    param_count: int
    fp32_bytes: int
    quantized_bytes: dict[int, int]
    ratios: dict[int, float]
    overhead_bytes: int

    def megabytes(self, bit_width: int | None = None) -> float:
        """Decimal megabytes (1 MB = 1e6 bytes), fp32 when no width given."""
        if bit_width is None:
            return self.fp32_bytes / 1e6
        return self.quantized_bytes[bit_width] / 1e6

    def as_dict(self) -> dict:
        return {
            "param_count": self.param_count,
            "fp32_bytes": self.fp32_bytes,
            "fp32_mb": self.fp32_bytes / 1e6,
            "overhead_bytes": self.overhead_bytes,
            "quantized": {
                str(b): {
                    "bytes": self.quantized_bytes[b],
                    "mb": self.quantized_bytes[b] / 1e6,
                    "ratio": self.ratios[b],
                }
                for b in sorted(self.quantized_bytes)
            },
        }


def size_report(param_count: int, bit_widths: list[int],
                include_overhead: bool = False, *,
                channel_count: int = 0, bias_count: int = 0) -> SizeReport:
    """Payload bytes and compression ratios for the given bit widths.

    The payload obeys the exact law param_count * b / 8 bytes. With
    ``include_overhead`` the per-channel parameter blocks (17 bytes each)
    and full-precision biases are added to the quantized totals, which is
    what a real packed file carries on top of the code payload.
    """
    if param_count <= 0:
        raise DomainError(f"param_count must be positive, got {param_count}")
    fp32_bytes = param_count * FP32_BYTES_PER_PARAM
    overhead = (channel_count * QPARAMS_STRUCT.size + bias_count * 4) if include_overhead else 0
    quantized = {}
    ratios = {}
    for b in bit_widths:
        if b not in (4, 6, 8):
            raise DomainError(f"unsupported bit width {b}")
        payload = (param_count * b + 7) // 8
        total = payload + overhead
        quantized[b] = total
        ratios[b] = total / fp32_bytes
    return SizeReport(param_count=param_count, fp32_bytes=fp32_bytes,
                      quantized_bytes=quantized, ratios=ratios, overhead_bytes=overhead)


def net_size_report(net: EmbeddingNet, bit_widths: list[int],
                    include_overhead: bool = True) -> SizeReport:
    """Size report for a concrete net (weights quantized, biases counted as overhead)."""
    channels = sum(l.out_dim for l in net.linear_layers)
    biases = sum(l.bias.size for l in net.linear_layers)
    return size_report(net.weight_param_count, bit_widths, include_overhead,
                       channel_count=channels, bias_count=biases)
