"""Small floating-point formats: enumeration, encoding, and rounding.

Element values (4-bit E2M1) and block scales (E8M0, E4M3, UE5M3, E8M3,
E5M2) are all instances of one parametric minifloat description.  Every
representable value is enumerated into a sorted grid once per format and
cached; rounding is then a vectorized search over that grid.

Signed zero is collapsed to +0 everywhere: the sign of zero never affects
dequantization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TIES_TO_EVEN = "TiesToEven"
TOWARD_POSITIVE = "TowardPositive"
STOCHASTIC = "Stochastic"

ROUNDING_MODES = (TIES_TO_EVEN, TOWARD_POSITIVE, STOCHASTIC)

# Special-value policies.
SPECIALS_NONE = "none"            # every code is a finite value
SPECIALS_TOP_EXPONENT = "top_exponent_reserved"  # IEEE-style inf/NaN exponent
SPECIALS_TOP_CODE_NAN = "top_code_nan"           # single NaN code (OCP E4M3 / E8M0)


@dataclass(frozen=True)
class FloatFormat:
    """Parametric minifloat description.

    ``exponent_only`` formats (mantissa_bits == 0, e.g. E8M0) carry no zero
    and no subnormals: the exponent field maps directly to a power of two.
    """

    name: str
    exponent_bits: int
    mantissa_bits: int
    bias: int
    signed: bool = True
    specials: str = SPECIALS_NONE

    def __post_init__(self):
        if not (1 <= self.exponent_bits <= 8):
            raise ValueError(f"exponent_bits out of range: {self.exponent_bits}")
        if not (0 <= self.mantissa_bits <= 3):
            raise ValueError(f"mantissa_bits out of range: {self.mantissa_bits}")

    @property
    def exponent_only(self) -> bool:
        return self.mantissa_bits == 0

    @property
    def max_finite(self) -> float:
        return float(_grid_data(self).values[-1])

    @property
    def min_positive(self) -> float:
        """Smallest positive representable value (subnormal if present)."""
        vals = _grid_data(self).values
        return float(vals[np.searchsorted(vals, 0.0, side="right")])

    @property
    def min_positive_subnormal(self) -> float:
        if self.exponent_only:
            return self.min_positive
        return 2.0 ** (1 - self.bias - self.mantissa_bits)


class _GridData:
    """Cached enumeration of one format: sorted values plus canonical codes."""

    def __init__(self, fmt: FloatFormat):
        codes, values = _enumerate(fmt)
        order = np.argsort(values, kind="stable")
        self.values = values[order]
        self.codes = codes[order]
        # Parity of the low encoding bit: mantissa LSB, or exponent-field LSB
        # for exponent-only formats.  Used by the ties-to-even rule.
        self.even = (self.codes & 1) == 0
        self.code_of = {float(v): int(c) for v, c in zip(self.values, self.codes)}
        self.value_of = {int(c): float(v) for v, c in zip(self.values, self.codes)}


def _enumerate(fmt: FloatFormat) -> tuple[np.ndarray, np.ndarray]:
    eb, mb, bias = fmt.exponent_bits, fmt.mantissa_bits, fmt.bias
    e_top = (1 << eb) - 1
    if fmt.specials == SPECIALS_TOP_EXPONENT:
        e_top -= 1

    codes: list[int] = []
    values: list[float] = []

    if fmt.exponent_only:
        for e in range(e_top + 1):
            if fmt.specials == SPECIALS_TOP_CODE_NAN and e == (1 << eb) - 1:
                continue
            codes.append(e)
            values.append(2.0 ** (e - bias))
    else:
        for e in range(e_top + 1):
            for m in range(1 << mb):
                if (
                    fmt.specials == SPECIALS_TOP_CODE_NAN
                    and e == (1 << eb) - 1
                    and m == (1 << mb) - 1
                ):
                    continue
                if e == 0:
                    v = (m / (1 << mb)) * 2.0 ** (1 - bias)
                else:
                    v = (1 + m / (1 << mb)) * 2.0 ** (e - bias)
                codes.append((e << mb) | m)
                values.append(v)
        if fmt.signed:
            sign_bit = 1 << (eb + mb)
            neg = [(c | sign_bit, -v) for c, v in zip(codes, values) if v != 0.0]
            codes += [c for c, _ in neg]
            values += [v for _, v in neg]
    return np.asarray(codes, dtype=np.uint32), np.asarray(values, dtype=np.float64)


_GRID_CACHE: dict[FloatFormat, _GridData] = {}


def _grid_data(fmt: FloatFormat) -> _GridData:
    data = _GRID_CACHE.get(fmt)
    if data is None:
        data = _GRID_CACHE[fmt] = _GridData(fmt)
    return data


def grid(fmt: FloatFormat) -> np.ndarray:
    """All finite representable values, ascending, zeros collapsed to +0."""
    return _grid_data(fmt).values.copy()


def encode(value: float, fmt: FloatFormat) -> int:
    """Canonical bit pattern of an exactly representable value."""
    code = _grid_data(fmt).code_of.get(float(value))
    if code is None:
        raise ValueError(f"{value!r} is not representable in {fmt.name}")
    return code


def decode(code: int, fmt: FloatFormat) -> float:
    value = _grid_data(fmt).value_of.get(int(code))
    if value is None:
        raise ValueError(f"code {code:#x} is not a finite {fmt.name} value")
    return value


def encode_array(values: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    data = _grid_data(fmt)
    idx = np.searchsorted(data.values, values)
    idx = np.clip(idx, 0, len(data.values) - 1)
    if not np.array_equal(data.values[idx], values):
        raise ValueError(f"array contains values not representable in {fmt.name}")
    return data.codes[idx]


def decode_array(codes: np.ndarray, fmt: FloatFormat) -> np.ndarray:
    data = _grid_data(fmt)
    lookup = np.full(int(data.codes.max()) + 1, np.nan)
    lookup[data.codes] = data.values
    values = lookup[codes]
    if np.isnan(values).any():
        raise ValueError(f"array contains invalid {fmt.name} codes")
    return values


def round_array(
    x: np.ndarray,
    fmt: FloatFormat,
    mode: str = TIES_TO_EVEN,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Round every element of ``x`` onto the format grid.

    Returns ``(rounded, saturated, underflowed)``.  Overflows saturate to
    ``sign(x) * max_finite``; inputs below the smallest positive grid value
    of a zero-free format clamp to that value.  ``underflowed`` marks
    nonzero inputs whose magnitude fell below the smallest positive
    representable value (the result may still be 0 or the clamp value;
    callers decide what underflow means for them).

    For exponent-only grids TiesToEven minimizes the *relative* deviation
    (decision boundary at the harmonic mean of neighbouring powers of two),
    which is the natural notion of nearest for a ratio-valued scale.  All
    other formats use absolute distance.  Ties break toward the even low
    encoding bit in both cases.

    NaN or infinite inputs are an error; the caller is expected to have
    screened them (the training loop does this through its loss scaler).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("round_array requires finite inputs")
    if mode not in ROUNDING_MODES:
        raise ValueError(f"unknown rounding mode {mode!r}")
    if mode == STOCHASTIC and rng is None:
        raise ValueError("Stochastic rounding requires an rng stream")

    data = _grid_data(fmt)
    g = data.values
    max_fin = g[-1]
    min_grid = g[0]

    saturated = np.abs(x) > max_fin
    underflowed = (x != 0) & (np.abs(x) < fmt.min_positive)

    clipped = np.clip(x, min_grid, max_fin)
    hi_idx = np.searchsorted(g, clipped, side="left")
    hi_idx = np.clip(hi_idx, 0, len(g) - 1)
    on_grid = g[hi_idx] == clipped

    if mode == TOWARD_POSITIVE:
        result = g[hi_idx]
    else:
        lo_idx = np.where(on_grid, hi_idx, np.maximum(hi_idx - 1, 0))
        lo = g[lo_idx]
        hi = g[hi_idx]
        span = hi - lo
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(span > 0, (clipped - lo) / span, 0.0)
        if mode == STOCHASTIC:
            pick_hi = rng.random(x.shape) < frac
            result = np.where(pick_hi, hi, lo)
        else:
            if fmt.exponent_only:
                # Relative-nearest: boundary at the harmonic mean of lo, hi.
                with np.errstate(invalid="ignore", divide="ignore"):
                    boundary = np.where(span > 0, 2.0 * lo * hi / (lo + hi), lo)
            else:
                boundary = lo + 0.5 * span
            pick_hi = clipped > boundary
            tie = (clipped == boundary) & ~on_grid
            pick_hi = pick_hi | (tie & data.even[hi_idx])
            result = np.where(pick_hi, hi, lo)

    # Saturation overrides: clamp preserves sign for signed formats.
    sat_val = np.sign(x) * max_fin if fmt.signed else np.full_like(x, max_fin)
    result = np.where(saturated, sat_val, result)
    return result, saturated, underflowed


def round_value(
    x: float,
    fmt: FloatFormat,
    mode: str = TIES_TO_EVEN,
    rng: np.random.Generator | None = None,
) -> tuple[float, bool, bool]:
    """Scalar convenience wrapper around :func:`round_array`."""
    r, s, u = round_array(np.asarray([x]), fmt, mode, rng)
    return float(r[0]), bool(s[0]), bool(u[0])


E2M1 = FloatFormat("E2M1", exponent_bits=2, mantissa_bits=1, bias=1, signed=True)
E8M0 = FloatFormat(
    "E8M0", exponent_bits=8, mantissa_bits=0, bias=127, signed=False,
    specials=SPECIALS_TOP_CODE_NAN,
)
E4M3 = FloatFormat(
    "E4M3", exponent_bits=4, mantissa_bits=3, bias=7, signed=True,
    specials=SPECIALS_TOP_CODE_NAN,
)
UE5M3 = FloatFormat("UE5M3", exponent_bits=5, mantissa_bits=3, bias=15, signed=False)
E8M3 = FloatFormat("E8M3", exponent_bits=8, mantissa_bits=3, bias=127, signed=False)
E5M2 = FloatFormat(
    "E5M2", exponent_bits=5, mantissa_bits=2, bias=15, signed=True,
    specials=SPECIALS_TOP_EXPONENT,
)

FORMATS: dict[str, FloatFormat] = {
    f.name: f for f in (E2M1, E8M0, E4M3, UE5M3, E8M3, E5M2)
}

FP4_MAX = E2M1.max_finite  # 6.0
E4M3_MAX = E4M3.max_finite  # 448.0


def get_format(name: str) -> FloatFormat:
    try:
        return FORMATS[name]
    except KeyError:
        valid = ", ".join(sorted(FORMATS))
        raise KeyError(f"unknown format {name!r}; valid names: {valid}") from None
