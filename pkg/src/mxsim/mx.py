"""Block-scaled quantization of real tensors into 4-bit elements.

A tensor is flattened row-major and split into fixed-size blocks.  Each
block gets one shared scale: the block statistic ``Z`` (absolute maximum,
or its smooth log-sum-exp surrogate) determines an ideal multiplier
``s = elem_max / Z`` that stretches the block to fill the element grid;
that multiplier is itself rounded into a scale format before use.  An
optional global (tensor-level) factor ``g`` normalizes the whole tensor
first so that per-block multipliers land inside the scale format's range.

The full pipeline for an element x with tensor scaling enabled is

    g * (1 / s_eff) * Q(s_eff * x / g)

where ``Q`` rounds onto the element grid and ``s_eff`` is the stored,
format-constrained multiplier (times a fixed rescale constant when the
narrow-range scale format calls for it).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .formats import (
    E4M3,
    E2M1,
    E8M0,
    TIES_TO_EVEN,
    FloatFormat,
    decode_array,
    encode_array,
    get_format,
    round_array,
)

# Block statistic choices.
Z_ABSMAX = "Absmax"
Z_LOGSUMEXP = "LogSumExp"

# What to do when a block scale rounds to zero (or underflows past the grid).
ZERO_NEAREST_SUBNORMAL = "nearest_subnormal"
ZERO_TO_ONE = "to_one"

ZERO_MODES = (ZERO_NEAREST_SUBNORMAL, ZERO_TO_ONE)


@dataclass(frozen=True)
class ZFunction:
    """Block statistic: hard absolute maximum or its smooth surrogate."""

    kind: str = Z_ABSMAX
    beta: float | None = None

    def __post_init__(self):
        if self.kind not in (Z_ABSMAX, Z_LOGSUMEXP):
            raise ValueError(f"unknown Z function {self.kind!r}")
        if self.kind == Z_LOGSUMEXP:
            if self.beta is None or self.beta <= 0:
                raise ValueError("LogSumExp requires a positive beta")


@dataclass(frozen=True)
class BlockSpec:
    """Everything needed to quantize one tensor reproducibly."""

    block_size: int = 32
    elem_format: FloatFormat = E2M1
    scale_format: FloatFormat = E8M0
    z: ZFunction = field(default_factory=ZFunction)
    scale_rounding: str = TIES_TO_EVEN
    elem_rounding: str = TIES_TO_EVEN
    zero_mode: str = ZERO_NEAREST_SUBNORMAL

    def __post_init__(self):
        if self.block_size <= 0:
            raise ValueError("block_size must be positive")
        if self.zero_mode not in ZERO_MODES:
            raise ValueError(f"unknown zero mode {self.zero_mode!r}")


@dataclass
class QuantizedTensor:
    """Compact form of a tensor: per-block scales plus 4-bit element codes."""

    shape: tuple[int, ...]
    scales: np.ndarray  # stored scale values, one per block, all > 0
    codes: np.ndarray  # element codes, padded to a whole number of blocks
    spec: BlockSpec
    global_scale: float | None = None  # tensor-level factor g (None = off)
    rescale: float = 1.0  # fixed constant folded into the multiplier

    @property
    def num_blocks(self) -> int:
        return len(self.scales)

    def dequantize(self) -> np.ndarray:
        return dequantize_tensor(self)


@dataclass
class BlockQuantResult:
    """Quantization with all intermediates kept, for gradient computation.

    ``blocks`` are the (padded) input blocks *after* division by the global
    factor; ``values`` are the dequantized blocks before the global factor
    is re-applied, so ``g * values`` reconstructs the tensor.
    """

    qt: QuantizedTensor
    blocks: np.ndarray  # (num_blocks, block_size), tensor / g
    mask: np.ndarray  # False on zero-padding positions
    z: np.ndarray  # per-block statistic of `blocks`
    s_ideal: np.ndarray  # elem_max / z (inf where z == 0)
    s_eff: np.ndarray  # rescale * stored scale, the actual multiplier
    values: np.ndarray  # (1 / s_eff) * Q(s_eff * blocks)


def z_value(block: np.ndarray, z: ZFunction) -> float:
    """Block statistic of a single 1-D block."""
    block = np.asarray(block, dtype=np.float64)
    return float(z_values(block[None, :], z)[0])


def z_values(
    blocks: np.ndarray, z: ZFunction, mask: np.ndarray | None = None
) -> np.ndarray:
    """Row-wise block statistic; ``mask`` excludes padding positions."""
    a = np.abs(np.asarray(blocks, dtype=np.float64))
    if z.kind == Z_ABSMAX:
        if mask is not None:
            a = np.where(mask, a, 0.0)
        return a.max(axis=-1)
    # Log-sum-exp with a max shift so large beta * |x| cannot overflow.
    beta = z.beta
    m = np.where(mask, a, 0.0).max(axis=-1) if mask is not None else a.max(axis=-1)
    e = np.exp(beta * (a - m[..., None]))
    if mask is not None:
        e = np.where(mask, e, 0.0)
    return m + np.log(e.sum(axis=-1)) / beta


def block_scale(block: np.ndarray, spec: BlockSpec) -> float:
    """Ideal multiplier for one block; +inf sentinel when the block is zero."""
    zv = z_value(block, spec.z)
    if zv == 0.0:
        return np.inf
    return spec.elem_format.max_finite / zv


def quantize_scale(
    s: float, spec: BlockSpec, rng: np.random.Generator | None = None
) -> float:
    """Round an ideal multiplier into the scale format (always positive)."""
    return float(quantize_scales(np.asarray([s]), spec, rng)[0])


def quantize_scales(
    s: np.ndarray, spec: BlockSpec, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Vectorized scale quantization with overflow/underflow handling.

    +inf sentinels (zero blocks) saturate to the scale format's maximum;
    multipliers that round to zero are replaced according to the spec's
    zero mode so dequantization never divides by zero.
    """
    s = np.asarray(s, dtype=np.float64)
    fmt = spec.scale_format
    out = np.full(s.shape, fmt.max_finite)
    finite = np.isfinite(s)
    if finite.any():
        r, _, _ = round_array(s[finite], fmt, spec.scale_rounding, rng)
        if spec.zero_mode == ZERO_NEAREST_SUBNORMAL:
            zero_value = fmt.min_positive_subnormal
        else:
            zero_value = 1.0
        out[finite] = np.where(r <= 0, zero_value, r)
    return out


def nvfp4_rescale_constant(spec: BlockSpec) -> float:
    """Fixed divisor that re-centers per-block multipliers in a narrow
    scale format when tensor scaling is active (half of elem_max * scale_max)."""
    return spec.elem_format.max_finite * spec.scale_format.max_finite * 0.5


def nvfp4_rescale(s_prime: float, spec: BlockSpec = BlockSpec(scale_format=E4M3)) -> float:
    """Apply the fixed rescale divisor to one ideal multiplier."""
    return s_prime / nvfp4_rescale_constant(spec)


def _partition(flat: np.ndarray, block_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Split a flat array into zero-padded blocks plus a validity mask."""
    n = flat.size
    num_blocks = max(1, -(-n // block_size))
    padded = np.zeros(num_blocks * block_size, dtype=np.float64)
    padded[:n] = flat
    mask = np.zeros(num_blocks * block_size, dtype=bool)
    mask[:n] = True
    return padded.reshape(num_blocks, block_size), mask.reshape(num_blocks, block_size)


def quantize_blocks(
    X: np.ndarray,
    spec: BlockSpec,
    tensor_scaling: bool = False,
    rng: np.random.Generator | None = None,
    generalized_rescale: bool = False,
) -> BlockQuantResult:
    """Quantize a tensor keeping every intermediate quantity.

    With tensor scaling the global factor ``g`` is the maximum block
    statistic of the raw tensor (identity when the tensor is all zero);
    blocks of ``X / g`` are then quantized, and the statistic is
    recomputed on the normalized blocks (it is not linear in general).
    The fixed rescale divisor is applied automatically for the narrow
    E4M3 scale format, or for any format when ``generalized_rescale``.
    """
    X = np.asarray(X, dtype=np.float64)
    if not np.isfinite(X).all():
        raise ValueError("quantization requires finite inputs")
    blocks, mask = _partition(X.ravel(), spec.block_size)
    z_raw = z_values(blocks, spec.z, mask)

    g = None
    if tensor_scaling:
        g = float(z_raw.max())
        if g == 0.0:
            g = 1.0
        blocks = blocks / g
        z = z_values(blocks, spec.z, mask)
    else:
        z = z_raw

    with np.errstate(divide="ignore", over="ignore"):
        s_ideal = np.where(z > 0, spec.elem_format.max_finite / z, np.inf)

    rescale = 1.0
    if tensor_scaling and (spec.scale_format.name == E4M3.name or generalized_rescale):
        rescale = nvfp4_rescale_constant(spec)

    stored = quantize_scales(s_ideal / rescale, spec, rng)
    s_eff = rescale * stored

    q, _, _ = round_array(blocks * s_eff[:, None], spec.elem_format,
                          spec.elem_rounding, rng)
    codes = encode_array(q, spec.elem_format)
    values = q / s_eff[:, None]

    qt = QuantizedTensor(
        shape=X.shape,
        scales=stored,
        codes=codes.ravel(),
        spec=spec,
        global_scale=g,
        rescale=rescale,
    )
    return BlockQuantResult(
        qt=qt, blocks=blocks, mask=mask, z=z, s_ideal=s_ideal,
        s_eff=s_eff, values=values,
    )


def quantize_tensor(
    X: np.ndarray,
    spec: BlockSpec,
    tensor_scaling: bool = False,
    rng: np.random.Generator | None = None,
    generalized_rescale: bool = False,
) -> QuantizedTensor:
    """Quantize a tensor into per-block scales and 4-bit element codes."""
    return quantize_blocks(X, spec, tensor_scaling, rng, generalized_rescale).qt


def dequantize_tensor(qt: QuantizedTensor) -> np.ndarray:
    """Reconstruct the real tensor a QuantizedTensor represents."""
    l = qt.spec.block_size
    values = decode_array(qt.codes, qt.spec.elem_format).reshape(-1, l)
    s_eff = qt.rescale * qt.scales
    out = values / s_eff[:, None]
    if qt.global_scale is not None:
        out = out * qt.global_scale
    n = int(np.prod(qt.shape)) if qt.shape else 1
    return out.ravel()[:n].reshape(qt.shape)


def quantize_block(
    block: np.ndarray, spec: BlockSpec, rng: np.random.Generator | None = None
) -> tuple[float, np.ndarray]:
    """Quantize a single block; returns (stored scale, element codes)."""
    res = quantize_blocks(np.asarray(block, dtype=np.float64), spec, rng=rng)
    return float(res.qt.scales[0]), res.qt.codes[: np.asarray(block).size]


def dequantize_block(
    s_q: float, codes: np.ndarray, spec: BlockSpec
) -> np.ndarray:
    """Reconstruct a single block from its scale and element codes."""
    return decode_array(np.asarray(codes), spec.elem_format) / s_q


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

_MAGIC = b"MXQT"


def to_bytes(qt: QuantizedTensor) -> bytes:
    """Binary layout: header, scale codes (16-bit), packed 4-bit elem codes."""
    spec = qt.spec
    buf = io.BytesIO()
    elem_name = spec.elem_format.name.encode()
    scale_name = spec.scale_format.name.encode()
    buf.write(_MAGIC)
    buf.write(struct.pack(
        "<BHB", len(qt.shape), spec.block_size, 1 if qt.global_scale is not None else 0
    ))
    buf.write(struct.pack(f"<{len(qt.shape)}q", *qt.shape))
    buf.write(struct.pack("<dd", qt.global_scale or 0.0, qt.rescale))
    buf.write(struct.pack("<BB", len(elem_name), len(scale_name)))
    buf.write(elem_name)
    buf.write(scale_name)
    scale_codes = encode_array(qt.scales, spec.scale_format).astype(np.uint16)
    buf.write(struct.pack("<q", len(scale_codes)))
    buf.write(scale_codes.tobytes())
    codes = qt.codes.astype(np.uint8)
    if codes.size % 2:
        codes = np.append(codes, np.uint8(0))
    packed = (codes[0::2] | (codes[1::2] << 4)).astype(np.uint8)
    buf.write(struct.pack("<q", qt.codes.size))
    buf.write(packed.tobytes())
    return buf.getvalue()


def from_bytes(data: bytes) -> QuantizedTensor:
    """Inverse of :func:`to_bytes`."""
    buf = io.BytesIO(data)
    if buf.read(4) != _MAGIC:
        raise ValueError("not a serialized quantized tensor")
    ndim, block_size, has_g = struct.unpack("<BHB", buf.read(4))
    shape = struct.unpack(f"<{ndim}q", buf.read(8 * ndim))
    g, rescale = struct.unpack("<dd", buf.read(16))
    n_elem_name, n_scale_name = struct.unpack("<BB", buf.read(2))
    elem_fmt = get_format(buf.read(n_elem_name).decode())
    scale_fmt = get_format(buf.read(n_scale_name).decode())
    (n_scales,) = struct.unpack("<q", buf.read(8))
    scale_codes = np.frombuffer(buf.read(2 * n_scales), dtype=np.uint16)
    (n_codes,) = struct.unpack("<q", buf.read(8))
    packed = np.frombuffer(buf.read(-(-n_codes // 2)), dtype=np.uint8)
    codes = np.empty(packed.size * 2, dtype=np.uint8)
    codes[0::2] = packed & 0x0F
    codes[1::2] = packed >> 4
    spec = BlockSpec(block_size=block_size, elem_format=elem_fmt,
                     scale_format=scale_fmt)
    return QuantizedTensor(
        shape=tuple(shape),
        scales=decode_array(scale_codes.astype(np.int64), scale_fmt),
        codes=codes[:n_codes].astype(np.int64),
        spec=spec,
        global_scale=g if has_g else None,
        rescale=rescale,
    )


def to_csv(qt: QuantizedTensor) -> str:
    """Human-readable dump: one row per element with its block and scale."""
    l = qt.spec.block_size
    values = decode_array(qt.codes, qt.spec.elem_format)
    s_eff = qt.rescale * qt.scales
    lines = ["block,scale,code,value,dequantized"]
    for i, (code, val) in enumerate(zip(qt.codes, values)):
        b = i // l
        deq = val / s_eff[b] * (qt.global_scale if qt.global_scale else 1.0)
        lines.append(f"{b},{qt.scales[b]!r},{int(code)},{val!r},{deq!r}")
    return "\n".join(lines) + "\n"
