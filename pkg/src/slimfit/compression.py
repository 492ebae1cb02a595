"""Codecs for cached activations.

Three lossy encodings are used for activations that must survive until the
backward pass: signed fixed-point quantization (8-bit for the imbalanced
dense input and the attention MatMul/Softmax buffers), two-per-byte 4-bit
packing (GELU inputs), and top-k magnitude pruning with scatter restore
(standardized inputs of frozen LayerNorms). All codecs compress the cached
copy only; forward computations always run on the original float values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CodecError


@dataclass(frozen=True)
class FixedPointSpec:
    """Q(ib).(fb) fixed-point format: ib integer bits, fb fractional bits."""

    ib: int
    fb: int
    signed: bool = True

    def __post_init__(self):
        if self.ib + self.fb not in (4, 8):
            raise CodecError(f"total bit width must be 4 or 8, got {self.ib + self.fb}")
        if self.ib < 0 or self.fb < 0:
            raise CodecError("bit counts must be nonnegative")

    @property
    def bits(self) -> int:
        return self.ib + self.fb

    @property
    def code_min(self) -> int:
        return -(1 << (self.bits - 1)) if self.signed else 0

    @property
    def code_max(self) -> int:
        return (1 << (self.bits - 1)) - 1 if self.signed else (1 << self.bits) - 1

    @property
    def value_min(self) -> float:
        return self.code_min / (1 << self.fb)

    @property
    def value_max(self) -> float:
        return self.code_max / (1 << self.fb)


Q4_4 = FixedPointSpec(ib=4, fb=4)
Q2_2 = FixedPointSpec(ib=2, fb=2)
Q0_8_UNSIGNED = FixedPointSpec(ib=0, fb=8, signed=False)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    # np.round is half-to-even; the codec contract is half-away-from-zero.
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


def quantize(x: np.ndarray, spec: FixedPointSpec) -> np.ndarray:
    """Encode floats as saturating fixed-point integer codes.

    code = clamp(round(x * 2^fb), code_min, code_max) with rounding
    half-away-from-zero. Values outside the representable range saturate.
    """
    scaled = np.asarray(x, dtype=np.float64) * (1 << spec.fb)
    codes = np.clip(_round_half_away(scaled), spec.code_min, spec.code_max)
    return codes.astype(np.int8 if spec.signed else np.uint8)


def dequantize(codes: np.ndarray, spec: FixedPointSpec, dtype=np.float32) -> np.ndarray:
    """Decode fixed-point codes back to floats: code / 2^fb."""
    return (np.asarray(codes, dtype=np.float64) / (1 << spec.fb)).astype(dtype)


def pack4(codes: np.ndarray) -> bytes:
    """Pack 4-bit two's-complement codes two per byte.

    Even indices occupy the low nibble, odd indices the high nibble. An odd
    element count pads the final high nibble with 0.
    """
    flat = np.asarray(codes).ravel().astype(np.int64)
    if flat.size and (flat.min() < -8 or flat.max() > 7):
        raise CodecError(f"4-bit codes must lie in [-8, 7], got range [{flat.min()}, {flat.max()}]")
    nibbles = (flat & 0xF).astype(np.uint8)
    if nibbles.size % 2:
        nibbles = np.concatenate([nibbles, np.zeros(1, dtype=np.uint8)])
    packed = nibbles[0::2] | (nibbles[1::2] << 4)
    return packed.tobytes()


def unpack4(data: bytes, count: int) -> np.ndarray:
    """Inverse of pack4: recover `count` signed 4-bit codes."""
    if count > 2 * len(data):
        raise CodecError(f"cannot unpack {count} codes from {len(data)} bytes")
    raw = np.frombuffer(data, dtype=np.uint8)
    nibbles = np.empty(2 * raw.size, dtype=np.uint8)
    nibbles[0::2] = raw & 0xF
    nibbles[1::2] = raw >> 4
    codes = nibbles[:count].astype(np.int8)
    codes[codes > 7] -= 16
    return codes


def choose_prescale_exp(x: np.ndarray, spec: FixedPointSpec, percentile: float = 99.9) -> int:
    """Pick a power-of-two pre-scale so the bulk of |x| fits the spec's range.

    Returns the exponent s such that x / 2^s places the given percentile of
    the magnitudes at or below the largest representable value. Exact
    power-of-two scaling keeps the scale itself lossless.
    """
    mags = np.abs(np.asarray(x, dtype=np.float64)).ravel()
    if mags.size == 0:
        return 0
    p = float(np.percentile(mags, percentile))
    if p <= 0.0 or not math.isfinite(p):
        return 0
    return max(0, math.ceil(math.log2(p / spec.value_max)))


@dataclass
class PrunedSparse:
    """Top-k surviving values with their flat indices into the dense tensor."""

    values: np.ndarray   # float32, length k
    indices: np.ndarray  # int32, strictly increasing, length k
    dense_size: int
    shape: tuple


def prune_topk(x: np.ndarray, keep_frac: float = 0.1, by_magnitude: bool = True) -> PrunedSparse:
    """Keep the ceil(keep_frac * n) largest elements, drop the rest.

    Largest by |x| by default (the standardized LayerNorm input is symmetric
    around zero, so large-negative entries carry as much backward signal as
    large-positive ones); pass by_magnitude=False to rank by signed value.
    Ties break toward the lower flat index. Indices are canonicalized to
    strictly increasing order.
    """
    flat = np.asarray(x).ravel()
    n = flat.size
    if n == 0:
        raise CodecError("cannot prune an empty tensor")
    if not 0.0 < keep_frac <= 1.0:
        raise CodecError(f"keep_frac must be in (0, 1], got {keep_frac}")
    k = math.ceil(keep_frac * n)
    key = np.abs(flat) if by_magnitude else flat
    # Stable sort on -key makes equal keys keep their original (lower) index.
    order = np.argsort(-key, kind="stable")
    idx = np.sort(order[:k]).astype(np.int32)
    return PrunedSparse(
        values=flat[idx].astype(np.float32),
        indices=idx,
        dense_size=n,
        shape=tuple(np.asarray(x).shape),
    )


def restore(sparse: PrunedSparse, dtype=np.float32) -> np.ndarray:
    """Scatter surviving values into a zero tensor of the original shape."""
    dense = np.zeros(sparse.dense_size, dtype=dtype)
    dense[sparse.indices] = sparse.values
    return dense.reshape(sparse.shape)


class CompressedActivation:
    """Tagged container for one encoded activation buffer.

    tag is one of "raw", "quant8", "packed4", "pruned". The payload byte
    count covers the code/value/index buffers only; shape and codec
    parameters are metadata.
    """

    __slots__ = ("tag", "shape", "spec", "codes", "packed_codes", "count", "prescale_exp", "sparse")

    def __init__(self, tag, shape, spec=None, packed=None, codes=None,
                 count=None, prescale_exp=0, sparse=None):
        self.tag = tag
        self.shape = tuple(shape)
        self.spec = spec
        self.codes = codes
        self.packed_codes = packed
        self.count = count
        self.prescale_exp = prescale_exp
        self.sparse = sparse

    @classmethod
    def quantized(cls, x: np.ndarray, spec: FixedPointSpec) -> "CompressedActivation":
        if spec.bits != 8:
            raise CodecError("quantized() stores one code per byte; use packed() for 4-bit")
        return cls("quant8", x.shape, spec=spec, codes=quantize(x, spec))

    @classmethod
    def packed(cls, x: np.ndarray, spec: FixedPointSpec,
               prescale_percentile: float = 99.9) -> "CompressedActivation":
        if spec.bits != 4:
            raise CodecError("packed() is for 4-bit specs")
        s = choose_prescale_exp(x, spec, prescale_percentile)
        codes = quantize(np.asarray(x) / (1 << s), spec)
        return cls("packed4", x.shape, spec=spec, packed=pack4(codes),
                   count=int(np.asarray(x).size), prescale_exp=s)

    @classmethod
    def pruned(cls, x: np.ndarray, keep_frac: float, by_magnitude: bool = True) -> "CompressedActivation":
        return cls("pruned", x.shape, sparse=prune_topk(x, keep_frac, by_magnitude))

    def decompress(self, dtype=np.float32) -> np.ndarray:
        if self.tag == "quant8":
            return dequantize(self.codes, self.spec, dtype).reshape(self.shape)
        if self.tag == "packed4":
            codes = unpack4(self.packed_codes, self.count)
            vals = dequantize(codes, self.spec, dtype) * np.asarray(1 << self.prescale_exp, dtype=dtype)
            return vals.reshape(self.shape)
        if self.tag == "pruned":
            return restore(self.sparse, dtype)
        raise CodecError(f"unknown compression tag {self.tag!r}")

    @property
    def nbytes(self) -> int:
        if self.tag == "quant8":
            return int(self.codes.size)
        if self.tag == "packed4":
            return len(self.packed_codes)
        if self.tag == "pruned":
            return int(self.sparse.values.size * (4 + 4))
        raise CodecError(f"unknown compression tag {self.tag!r}")

    def dump(self) -> bytes:
        """Serialize as header + contiguous little-endian payload."""
        import json
        header = {
            "tag": self.tag,
            "shape": list(self.shape),
            "spec": None if self.spec is None else
                    {"ib": self.spec.ib, "fb": self.spec.fb, "signed": self.spec.signed},
            "count": self.count if self.count is not None else
                     (int(self.sparse.values.size) if self.tag == "pruned" else
                      (int(self.codes.size) if self.tag == "quant8" else None)),
            "prescale_exp": self.prescale_exp,
        }
        head = json.dumps(header, sort_keys=True).encode() + b"\n"
        if self.tag == "quant8":
            body = self.codes.astype("<i1").tobytes()
        elif self.tag == "packed4":
            body = self.packed_codes
        elif self.tag == "pruned":
            body = (self.sparse.values.astype("<f4").tobytes()
                    + self.sparse.indices.astype("<i4").tobytes())
        else:
            raise CodecError(f"unknown compression tag {self.tag!r}")
        return head + body
