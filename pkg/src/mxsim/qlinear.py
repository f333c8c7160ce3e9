"""Linear layer computed through block-quantized operands.

Forward: Y = f(X) @ f(W).T where f quantizes each operand along the
contraction dimension.  Backward quantizes the incoming gradient twice
(once per backward matmul, blocked along each matmul's own contraction
dimension) and reuses the forward's dequantized operands, for six
quantization events per step in total (four fresh, two reused).  The
incoming-gradient and activation quantizations can use stochastic
rounding; weights are always rounded to nearest.  An optional random
sign-plus-Hadamard transform is applied to both operands of a matmul
along the contraction dimension, where it cancels in exact arithmetic
but spreads outliers before quantization.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .formats import STOCHASTIC, TIES_TO_EVEN
from .hadamard import (
    HADAMARD_ALL,
    HADAMARD_BACKWARD,
    HADAMARD_NONE,
    HadamardSpec,
    transform_along_axis,
)
from .mx import BlockQuantResult, BlockSpec, quantize_blocks
from .qgrad import GradConfig, TENSOR_GRAD_IGNORE, assemble_df_dX, assemble_dh_dX

SR_NONE = "None"
SR_BACKWARD = "BackwardActivations"
SR_ALL = "AllActivations"

SR_POLICIES = (SR_NONE, SR_BACKWARD, SR_ALL)


class NonFiniteGradientError(ValueError):
    """Incoming gradient contains NaN/inf; the loss scaler should react."""


@dataclass(frozen=True)
class QLinearConfig:
    spec: BlockSpec = field(default_factory=BlockSpec)
    grad: GradConfig = field(default_factory=GradConfig)
    hadamard: HadamardSpec = field(default_factory=HadamardSpec)
    tensor_scaling: bool = False
    generalized_rescale: bool = False
    sr_policy: str = SR_NONE
    quantize: bool = True  # False: exact dense layer (debug / oracle path)

    def __post_init__(self):
        if self.sr_policy not in SR_POLICIES:
            raise ValueError(f"unknown SR policy {self.sr_policy!r}")


@dataclass
class LayerContext:
    """Saved state sufficient to reproduce the backward pass bit-exactly."""

    x: np.ndarray  # high-precision input, as given
    w: np.ndarray
    fx: np.ndarray  # dequantized forward operands, padded along m
    fw: np.ndarray
    res_x: BlockQuantResult | None
    res_w: BlockQuantResult | None
    x_pad: np.ndarray  # transformed+padded high-precision operands
    w_pad: np.ndarray
    m_pad: int
    seed: int
    step: int
    site_counts: dict[str, int] = field(default_factory=dict)


def _pad_axis(a: np.ndarray, axis: int, multiple: int) -> np.ndarray:
    n = a.shape[axis]
    pad = (-n) % multiple
    if pad == 0:
        return a
    widths = [(0, 0)] * a.ndim
    widths[axis] = (0, pad)
    return np.pad(a, widths)


def _site_rng(seed: int, step: int, site: int) -> np.random.Generator:
    return np.random.default_rng([np.uint64(seed), np.uint64(step), np.uint64(site)])


def _needs_rng(spec: BlockSpec) -> bool:
    return STOCHASTIC in (spec.scale_rounding, spec.elem_rounding)


def _quantize_matrix(
    a: np.ndarray, spec: BlockSpec, cfg: QLinearConfig, rng
) -> BlockQuantResult:
    """Quantize a matrix whose trailing axis is a multiple of the block
    size, so flattening keeps blocks aligned with that axis."""
    return quantize_blocks(
        a, spec, tensor_scaling=cfg.tensor_scaling, rng=rng,
        generalized_rescale=cfg.generalized_rescale,
    )


def _step_hadamard(cfg: QLinearConfig, step: int) -> HadamardSpec:
    """Fresh sign diagonal every step, replayable from (seed, step)."""
    mixed = int(np.random.SeedSequence([cfg.hadamard.seed, step]).generate_state(1)[0])
    return replace(cfg.hadamard, seed=mixed)


def forward(
    X: np.ndarray, W: np.ndarray, cfg: QLinearConfig, seed: int = 0, step: int = 0
) -> tuple[np.ndarray, LayerContext]:
    """Y = f(X) @ f(W).T with X: [b, m], W: [n, m]."""
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if X.ndim != 2 or W.ndim != 2 or X.shape[1] != W.shape[1]:
        raise ValueError(f"shape mismatch: X {X.shape} vs W {W.shape}")
    l = cfg.spec.block_size

    x_pad = _pad_axis(X, 1, l)
    w_pad = _pad_axis(W, 1, l)
    m_pad = x_pad.shape[1]

    if cfg.hadamard.mode == HADAMARD_ALL:
        hspec = _step_hadamard(cfg, step)
        x_pad = transform_along_axis(x_pad, 1, hspec)
        w_pad = transform_along_axis(w_pad, 1, hspec)

    counts = {"forward_quant": 0, "backward_quant": 0, "backward_reused": 0}
    if cfg.quantize:
        x_round = STOCHASTIC if cfg.sr_policy == SR_ALL else TIES_TO_EVEN
        x_spec = replace(cfg.spec, elem_rounding=x_round)
        w_spec = replace(cfg.spec, elem_rounding=TIES_TO_EVEN)
        rng_x = _site_rng(seed, step, 0) if _needs_rng(x_spec) else None
        rng_w = _site_rng(seed, step, 1) if _needs_rng(w_spec) else None
        res_x = _quantize_matrix(x_pad, x_spec, cfg, rng_x)
        res_w = _quantize_matrix(w_pad, w_spec, cfg, rng_w)
        fx = res_x.qt.dequantize()
        fw = res_w.qt.dequantize()
        counts["forward_quant"] = 2
    else:
        res_x = res_w = None
        fx, fw = x_pad, w_pad

    Y = fx @ fw.T
    ctx = LayerContext(
        x=X, w=W, fx=fx, fw=fw, res_x=res_x, res_w=res_w,
        x_pad=x_pad, w_pad=w_pad, m_pad=m_pad, seed=seed, step=step,
        site_counts=counts,
    )
    return Y, ctx


def _operand_grad(
    res: BlockQuantResult, pad_shape: tuple[int, int], cfg: QLinearConfig
) -> np.ndarray:
    """Per-element derivative of an operand's quantization, padded shape."""
    spec = cfg.spec
    if cfg.tensor_scaling and cfg.grad.tensor_mode != TENSOR_GRAD_IGNORE:
        raw = res.blocks * (res.qt.global_scale or 1.0)
        d = assemble_dh_dX(res, raw, spec, cfg.grad)
    else:
        d = assemble_df_dX(
            res.blocks, res.s_ideal, res.s_eff,
            res.values * res.s_eff[:, None], res.z, spec, cfg.grad, res.mask,
            s_pre=res.s_ideal / res.qt.rescale,
        )
    return d.reshape(pad_shape)


def _quantize_gradient(
    g: np.ndarray, cfg: QLinearConfig, seed: int, step: int, site: int
) -> np.ndarray:
    """Quantize-dequantize an incoming gradient blocked along its last axis."""
    round_mode = (
        STOCHASTIC if cfg.sr_policy in (SR_BACKWARD, SR_ALL) else TIES_TO_EVEN
    )
    spec = replace(cfg.spec, elem_rounding=round_mode)
    rng = _site_rng(seed, step, site) if _needs_rng(spec) else None
    res = _quantize_matrix(_pad_axis(g, 1, spec.block_size), spec, cfg, rng)
    return res.qt.dequantize()


def backward(
    gY: np.ndarray, ctx: LayerContext, cfg: QLinearConfig
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. X and W given the upstream gradient of Y."""
    gY = np.asarray(gY, dtype=np.float64)
    if not np.isfinite(gY).all():
        raise NonFiniteGradientError("incoming gradient is not finite")
    b, m = ctx.x.shape
    n = ctx.w.shape[0]
    if gY.shape != (b, n):
        raise ValueError(f"gradient shape {gY.shape} != {(b, n)}")
    l = cfg.spec.block_size

    fw, fx = ctx.fw, ctx.fx
    backward_had = cfg.hadamard.mode in (HADAMARD_ALL, HADAMARD_BACKWARD)

    # Matmul 1 (input gradient): contract over n.
    g1 = _pad_axis(gY, 1, l)
    fw1 = _pad_axis(fw.T, 1, l).T  # pad n rows of fw
    if backward_had:
        hspec = _step_hadamard(cfg, ctx.step)
        g1 = transform_along_axis(g1, 1, hspec)
        fw1 = transform_along_axis(fw1, 0, hspec)
    if cfg.quantize:
        g1 = _quantize_gradient(g1, cfg, ctx.seed, ctx.step, 2)
        ctx.site_counts["backward_quant"] = ctx.site_counts.get("backward_quant", 0) + 1
    gx_pad = g1 @ fw1

    # Matmul 2 (weight gradient): contract over the batch b.
    g2 = _pad_axis(gY.T, 1, l)
    fx2 = _pad_axis(fx.T, 1, l).T  # pad batch rows of fx
    if backward_had:
        g2 = transform_along_axis(g2, 1, hspec)
        fx2 = transform_along_axis(fx2, 0, hspec)
    if cfg.quantize:
        g2 = _quantize_gradient(g2, cfg, ctx.seed, ctx.step, 3)
        ctx.site_counts["backward_quant"] += 1
    gw_pad = g2 @ fx2

    if cfg.quantize:
        ctx.site_counts["backward_reused"] = 2
        dq_x = _operand_grad(ctx.res_x, ctx.x_pad.shape, cfg)
        dq_w = _operand_grad(ctx.res_w, ctx.w_pad.shape, cfg)
        gx_pad = gx_pad * dq_x
        gw_pad = gw_pad * dq_w

    if cfg.hadamard.mode == HADAMARD_ALL:
        # Undo the forward rotation of the operands: X was transformed
        # before f, so the chain rule sends the gradient back through the
        # inverse (transpose) of the same orthogonal map.
        fwd_spec = _step_hadamard(cfg, ctx.step)
        from .hadamard import block_signs, sylvester

        signs = block_signs(fwd_spec.seed, ctx.m_pad // l, l)
        h = sylvester(l)

        def untransform(a):
            blocks = a.reshape(a.shape[0], ctx.m_pad // l, l)
            return ((blocks @ h) * signs).reshape(a.shape[0], ctx.m_pad)

        gx_pad = untransform(gx_pad)
        gw_pad = untransform(gw_pad)

    return gx_pad[:, :m], gw_pad[:, :m]
