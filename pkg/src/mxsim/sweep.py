"""Configuration sweeps: grid enumeration, complexity points, efficiency
scores, Pareto frontiers, and reconstruction-error experiments.

A sweep configuration is a flat record of technique choices (scale format,
rounding modes, gradient estimators, stochastic-rounding policy, ...).  Each
non-default technique carries a fixed complexity weight; the sum of active
weights is the configuration's complexity ``omega``.  The efficiency score
combines the relative validation-loss gain over a dense baseline with that
complexity.
"""

from __future__ import annotations

import concurrent.futures
import csv
import math
from dataclasses import dataclass
from itertools import product
from typing import Callable, Iterable, Sequence

import numpy as np

from .formats import get_format
from .mx import (
    BlockSpec,
    ZFunction,
    Z_ABSMAX,
    Z_LOGSUMEXP,
    dequantize_tensor,
    quantize_tensor,
)

__all__ = [
    "COMPLEXITY_WEIGHTS",
    "SweepConfig",
    "ScoreReport",
    "complexity_points",
    "score",
    "enumerate_configs",
    "EnumerationReport",
    "pareto_front",
    "recon_error_cell",
    "recon_error_experiment",
    "write_recon_csv",
    "RESULT_COLUMNS",
    "write_results_csv",
    "run_many",
]


# ---------------------------------------------------------------------------
# Configuration record
# ---------------------------------------------------------------------------

NOT_APPLICABLE = "N/A"

# Canonical value sets, written as they appear in result CSVs.
MAX_GRAD_OPTIONS = ("STE", "softsoftmax", "hardsoftmax", "absmax")
ESTIMATOR_OPTIONS = ("STE", "baseline", "spline")
TENSOR_GRAD_OPTIONS = ("ignore", "absmax", "STE")
ROUND_MODE_OPTIONS = ("TiesToEven", "TowardPositive", "Stochastic")
SR_OPTIONS = ("None", "backward", "all")
HADAMARD_OPTIONS = ("None", "all", "backward")
OPTIMISER_OPTIONS = ("Adam", "StableSPAM")

# Alternate spellings accepted from config files and result tables.
_SR_ALIASES = {
    "none": "None",
    "none_exact": "None",
    "n/a": "None",
    "backward": "backward",
    "backward act.": "backward",
    "backwardactivations": "backward",
    "intelfp4": "backward",
    "intelfp4_exact": "backward",
    "all": "all",
    "all act.": "all",
    "allactivations": "all",
    "all_activation": "all",
    "all_activation_exact": "all",
}

_HADAMARD_ALIASES = {
    "none": "None",
    "none_exact": "None",
    "n/a": "None",
    "all": "all",
    "all_exact": "all",
    "backward": "backward",
    "backward_exact": "backward",
    "backwardonly": "backward",
}

_ROUND_ALIASES = {
    "tiestoeven": "TiesToEven",
    "towardpositive": "TowardPositive",
    "stochastic": "Stochastic",
    "sr": "Stochastic",
}


def normalize_sr(value: str) -> str:
    """Map an SR policy spelling to its canonical form."""
    try:
        return _SR_ALIASES[str(value).strip().lower()]
    except KeyError:
        raise ValueError(f"unknown SR policy {value!r}") from None


def normalize_hadamard(value: str) -> str:
    """Map a Hadamard mode spelling to its canonical form."""
    try:
        return _HADAMARD_ALIASES[str(value).strip().lower()]
    except KeyError:
        raise ValueError(f"unknown hadamard mode {value!r}") from None


def normalize_round_mode(value: str) -> str:
    """Map a rounding-mode spelling to its canonical form."""
    try:
        return _ROUND_ALIASES[str(value).strip().lower()]
    except KeyError:
        raise ValueError(f"unknown round mode {value!r}") from None


@dataclass(frozen=True)
class SweepConfig:
    """One point of the hyperparameter grid, in result-table vocabulary.

    ``max_grad`` is the backward treatment of the block-maximum statistic,
    ``quant_grad`` the element quantizer's gradient estimator, ``scale_grad``
    the scale quantizer's gradient estimator, and ``tensor_grad`` the
    treatment of the global tensor scale (``N/A`` when tensor scaling is
    off).
    """

    scale_format: str = "E8M0"
    block_size: int = 32
    max_grad: str = "STE"
    quant_grad: str = "STE"
    hadamard: str = "None"
    scale_grad: str = "STE"
    sr: str = "None"
    optimiser: str = "Adam"
    loss_scaling: bool = False
    round_mode: str = "TiesToEven"
    tensor_scaling: bool = False
    tensor_grad: str = NOT_APPLICABLE
    nan_mode: str = "nearest_subnormal"


# ---------------------------------------------------------------------------
# Complexity points
# ---------------------------------------------------------------------------

#: Weight of each non-baseline technique.  A configuration's complexity is
#: the sum over the techniques it activates.
COMPLEXITY_WEIGHTS: dict[str, float] = {
    "non_ste_max_grad": 3.0,  # smoothed block-maximum backward
    "tensor_scale_grad": 3.0,  # gradient estimate for the global scale
    "non_ste_quant_grad": 2.0,  # smoothed element-quantizer backward
    "hadamard": 1.0,
    "non_ste_scale_grad": 1.5,  # smoothed scale-quantizer backward
    "stochastic_rounding": 0.5,
    "tensor_scaling": 0.5,
    "loss_scaling": 0.5,
    "spam_optimizer": 0.5,
    "stochastic_scale_rounding": 0.25,
}


def active_techniques(cfg: SweepConfig) -> list[str]:
    """Names of the weighted techniques a configuration activates."""
    active = []
    if cfg.max_grad not in ("STE", NOT_APPLICABLE):
        active.append("non_ste_max_grad")
    if cfg.tensor_grad in ("absmax", "STE"):
        active.append("tensor_scale_grad")
    if cfg.quant_grad not in ("STE", NOT_APPLICABLE):
        active.append("non_ste_quant_grad")
    if normalize_hadamard(cfg.hadamard) != "None":
        active.append("hadamard")
    if cfg.scale_grad not in ("STE", NOT_APPLICABLE):
        active.append("non_ste_scale_grad")
    if normalize_sr(cfg.sr) != "None":
        active.append("stochastic_rounding")
    if cfg.tensor_scaling:
        active.append("tensor_scaling")
    if cfg.loss_scaling:
        active.append("loss_scaling")
    if "SPAM" in cfg.optimiser:
        active.append("spam_optimizer")
    if normalize_round_mode(cfg.round_mode) == "Stochastic":
        active.append("stochastic_scale_rounding")
    return active


def complexity_points(cfg: SweepConfig) -> float:
    """Total complexity of a configuration (sum of active weights)."""
    return sum(COMPLEXITY_WEIGHTS[t] for t in active_techniques(cfg))


# ---------------------------------------------------------------------------
# Efficiency score
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreReport:
    """Score summary for one run against a baseline reference loss."""

    config_id: str
    m_ref: float
    m_c: float
    gain: float
    omega: float
    score: float


def score(m_ref: float, m_c: float, omega: float) -> float:
    """Efficiency score of a run with validation loss ``m_c``.

    ``m_ref`` is the best baseline validation loss for the same dataset and
    ``omega`` the run's complexity.  The relative gain ``(m_ref - m_c) /
    m_ref`` is divided by ``max(1, omega)`` when positive and multiplied by
    it when negative, so extra complexity always moves the score toward
    zero-or-worse.
    """
    if not m_ref > 0:
        raise ValueError(f"reference loss must be positive, got {m_ref}")
    gain = (m_ref - m_c) / m_ref
    penalty = max(1.0, omega)
    return gain / penalty if gain >= 0 else gain * penalty


def score_report(config_id: str, m_ref: float, m_c: float, omega: float) -> ScoreReport:
    return ScoreReport(
        config_id=config_id,
        m_ref=m_ref,
        m_c=m_c,
        gain=(m_ref - m_c) / m_ref,
        omega=omega,
        score=score(m_ref, m_c, omega),
    )


# ---------------------------------------------------------------------------
# Grid enumeration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepGrid:
    """Axis value lists for the full hyperparameter sweep."""

    scale_formats: Sequence[str] = ("E8M0", "E4M3")
    max_grads: Sequence[str] = MAX_GRAD_OPTIONS
    round_modes: Sequence[str] = ROUND_MODE_OPTIONS
    quant_grads: Sequence[str] = ESTIMATOR_OPTIONS
    scale_grads: Sequence[str] = ESTIMATOR_OPTIONS
    tensor_grads: Sequence[str] = TENSOR_GRAD_OPTIONS
    optimisers: Sequence[str] = OPTIMISER_OPTIONS
    loss_scalings: Sequence[bool] = (True, False)
    tensor_scalings: Sequence[bool] = (True, False)
    srs: Sequence[str] = SR_OPTIONS
    hadamards: Sequence[str] = HADAMARD_OPTIONS

    def cardinality(self) -> int:
        """Raw Cartesian-product size before constraint pruning."""
        return math.prod(
            len(axis)
            for axis in (
                self.scale_formats,
                self.max_grads,
                self.round_modes,
                self.quant_grads,
                self.scale_grads,
                self.tensor_grads,
                self.optimisers,
                self.loss_scalings,
                self.tensor_scalings,
                self.srs,
                self.hadamards,
            )
        )


@dataclass(frozen=True)
class EnumerationReport:
    configs: tuple[SweepConfig, ...]
    raw_count: int
    dropped: int


def _valid(cfg: SweepConfig, prune_dead_scale_grad: bool) -> bool:
    # With an STE block-maximum backward the scale-quantizer gradient path
    # is inert, so those combinations can optionally be pruned as redundant.
    if prune_dead_scale_grad and cfg.scale_grad != "STE" and cfg.max_grad == "STE":
        return False
    # The tensor-scale gradient option only exists when tensor scaling is on.
    if not cfg.tensor_scaling and cfg.tensor_grad != NOT_APPLICABLE:
        return False
    if cfg.tensor_scaling and cfg.tensor_grad == NOT_APPLICABLE:
        return False
    return True


def enumerate_configs(
    grid: SweepGrid | None = None, prune_dead_scale_grad: bool = False
) -> EnumerationReport:
    """Expand a grid into valid configurations.

    The tensor-scale gradient axis collapses to ``N/A`` whenever tensor
    scaling is disabled.  ``prune_dead_scale_grad`` additionally drops
    non-STE scale-quantizer gradients when the block-maximum backward is
    STE, where they have no effect on training.
    """
    grid = grid or SweepGrid()
    configs = []
    raw = 0
    for (
        fmt,
        max_grad,
        round_mode,
        quant_grad,
        scale_grad,
        tensor_grad,
        optimiser,
        loss_scaling,
        tensor_scaling,
        sr,
        hada,
    ) in product(
        grid.scale_formats,
        grid.max_grads,
        grid.round_modes,
        grid.quant_grads,
        grid.scale_grads,
        grid.tensor_grads,
        grid.optimisers,
        grid.loss_scalings,
        grid.tensor_scalings,
        grid.srs,
        grid.hadamards,
    ):
        raw += 1
        cfg = SweepConfig(
            scale_format=fmt,
            block_size=16 if fmt == "E4M3" else 32,
            max_grad=max_grad,
            quant_grad=quant_grad,
            hadamard=hada,
            scale_grad=scale_grad,
            sr=sr,
            optimiser=optimiser,
            loss_scaling=loss_scaling,
            round_mode=normalize_round_mode(round_mode),
            tensor_scaling=tensor_scaling,
            tensor_grad=tensor_grad if tensor_scaling else NOT_APPLICABLE,
        )
        if _valid(cfg, prune_dead_scale_grad):
            configs.append(cfg)
    # Collapsing tensor_grad to N/A creates duplicates; drop them while
    # preserving order.
    unique = tuple(dict.fromkeys(configs))
    return EnumerationReport(configs=unique, raw_count=raw, dropped=raw - len(unique))


# ---------------------------------------------------------------------------
# Pareto frontier
# ---------------------------------------------------------------------------


def pareto_front(records: Sequence[ScoreReport]) -> list[ScoreReport]:
    """Records not dominated in (lower complexity, higher score).

    A record is dominated when another has complexity <= and score >= with
    at least one strict inequality.
    """
    if not records:
        raise ValueError("records must be non-empty")
    front = []
    for r in records:
        dominated = any(
            (o.omega <= r.omega and o.score >= r.score)
            and (o.omega < r.omega or o.score > r.score)
            for o in records
        )
        if not dominated:
            front.append(r)
    return front


# ---------------------------------------------------------------------------
# Reconstruction-error experiments
# ---------------------------------------------------------------------------


def recon_error_cell(
    scale_format: str,
    block_size: int,
    tensor_scale: float,
    beta: float | None,
    rng: np.random.Generator,
    n_elements: int = 1 << 16,
) -> tuple[float, float]:
    """Mean and median relative error of round-tripping a Gaussian tensor.

    ``beta=None`` uses the exact block maximum; a finite ``beta`` uses the
    smooth log-sum-exp maximum with that inverse temperature.
    """
    x = rng.standard_normal(n_elements) * tensor_scale
    z = ZFunction(Z_ABSMAX) if beta is None else ZFunction(Z_LOGSUMEXP, beta=beta)
    spec = BlockSpec(
        block_size=block_size,
        scale_format=get_format(scale_format),
        z=z,
    )
    deq = dequantize_tensor(quantize_tensor(x, spec))
    nonzero = x != 0
    rel = np.abs(x[nonzero] - deq[nonzero]) / np.abs(x[nonzero])
    return float(rel.mean()), float(np.median(rel))


def recon_error_experiment(
    formats: Sequence[str] = ("E8M0", "E4M3", "UE5M3"),
    block_sizes: Sequence[int] = (8, 16, 32, 64, 128),
    tensor_scales: Sequence[float] = tuple(10.0**e for e in range(-4, 32, 4)),
    betas: Sequence[float] = (5.0, 10.0, 20.0, 40.0, 80.0, 160.0),
    seed: int = 0,
    n_elements: int = 1 << 16,
) -> list[dict[str, object]]:
    """Relative-error grid for both maximum statistics.

    Emits one row per cell with columns ``format, l, scale, beta,
    mean_rel_err, median_rel_err``.  Covers: exact-max error vs block size,
    exact-max error vs tensor scale (l=16), smooth-max error vs block size
    and vs tensor scale at the default inverse temperature 40, and
    smooth-max sensitivity to the inverse temperature.
    """
    rng = np.random.default_rng(seed)
    rows: list[dict[str, object]] = []

    def add(fmt: str, l: int, scale: float, beta: float | None) -> None:
        mean, median = recon_error_cell(fmt, l, scale, beta, rng, n_elements)
        rows.append(
            {
                "format": fmt,
                "l": l,
                "scale": scale,
                "beta": "" if beta is None else beta,
                "mean_rel_err": mean,
                "median_rel_err": median,
            }
        )

    for fmt in formats:
        # Exact max vs block size, unit scale.
        for l in block_sizes:
            add(fmt, l, 1.0, None)
        # Exact max vs tensor scale at l=16.
        for scale in tensor_scales:
            add(fmt, 16, scale, None)
        # Smooth max vs block size at the default inverse temperature.
        for l in block_sizes:
            add(fmt, l, 1.0, 40.0)
        # Smooth max vs tensor scale at l=16.
        for scale in tensor_scales:
            add(fmt, 16, scale, 40.0)
        # Smooth-max sensitivity to the inverse temperature.
        for beta in betas:
            add(fmt, 16, 1.0, beta)
    return rows


def write_recon_csv(path: str, rows: Iterable[dict[str, object]]) -> None:
    fieldnames = ["format", "l", "scale", "beta", "mean_rel_err", "median_rel_err"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# Result persistence
# ---------------------------------------------------------------------------

RESULT_COLUMNS = [
    "Dataset",
    "Val loss",
    "Train loss",
    "Scale",
    "Block size",
    "Max grad.",
    "Quant. grad",
    "Hadamard",
    "Scale grad",
    "SR",
    "Optimiser",
    "Loss scaling",
    "Round mode",
    "Tensor scaling",
    "Tensor grad",
    "Complexity points",
    "Score",
    "NaN mode",
]


def result_row(
    dataset: str,
    cfg: SweepConfig,
    val_loss: float,
    train_loss: float,
    m_ref: float,
) -> dict[str, object]:
    omega = complexity_points(cfg)
    return {
        "Dataset": dataset,
        "Val loss": val_loss,
        "Train loss": train_loss,
        "Scale": cfg.scale_format,
        "Block size": cfg.block_size,
        "Max grad.": cfg.max_grad,
        "Quant. grad": cfg.quant_grad,
        "Hadamard": cfg.hadamard,
        "Scale grad": cfg.scale_grad,
        "SR": cfg.sr,
        "Optimiser": cfg.optimiser,
        "Loss scaling": cfg.loss_scaling,
        "Round mode": cfg.round_mode,
        "Tensor scaling": cfg.tensor_scaling,
        "Tensor grad": cfg.tensor_grad,
        "Complexity points": f"{omega:.3f}",
        "Score": f"{score(m_ref, val_loss, omega):.3f}",
        "NaN mode": cfg.nan_mode,
    }


def write_results_csv(path: str, rows: Iterable[dict[str, object]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def build_qlinear_config(cfg: SweepConfig, beta: float = 40.0):
    """Translate a sweep record into an executable layer configuration."""
    from .hadamard import (
        HADAMARD_ALL,
        HADAMARD_BACKWARD,
        HADAMARD_NONE,
        HadamardSpec,
    )
    from .qgrad import GradConfig, QGradEstimator, TENSOR_GRAD_IGNORE
    from .qlinear import QLinearConfig, SR_ALL, SR_BACKWARD, SR_NONE

    if cfg.max_grad not in MAX_GRAD_OPTIONS:
        raise ValueError(f"unknown max-statistic gradient {cfg.max_grad!r}")
    for name, value in (("quant_grad", cfg.quant_grad), ("scale_grad", cfg.scale_grad)):
        if value not in ESTIMATOR_OPTIONS:
            raise ValueError(f"unknown {name} estimator {value!r}")

    z_kind = Z_LOGSUMEXP if cfg.max_grad == "softsoftmax" else Z_ABSMAX
    spec = BlockSpec(
        block_size=cfg.block_size,
        scale_format=get_format(cfg.scale_format),
        z=ZFunction(z_kind, beta=beta),
        scale_rounding=normalize_round_mode(cfg.round_mode),
        zero_mode=cfg.nan_mode,
    )
    tensor_mode = (
        cfg.tensor_grad if cfg.tensor_grad != NOT_APPLICABLE else TENSOR_GRAD_IGNORE
    )
    grad = GradConfig(
        elem_estimator=QGradEstimator(cfg.quant_grad),
        scale_mode=cfg.max_grad,
        scale_q_estimator=QGradEstimator(cfg.scale_grad),
        beta=beta,
        tensor_mode=tensor_mode,
    )
    hada = {
        "None": HADAMARD_NONE,
        "all": HADAMARD_ALL,
        "backward": HADAMARD_BACKWARD,
    }[normalize_hadamard(cfg.hadamard)]
    sr = {"None": SR_NONE, "backward": SR_BACKWARD, "all": SR_ALL}[
        normalize_sr(cfg.sr)
    ]
    return QLinearConfig(
        spec=spec,
        grad=grad,
        hadamard=HadamardSpec(block_size=cfg.block_size, mode=hada),
        tensor_scaling=cfg.tensor_scaling,
        sr_policy=sr,
    )


def run_many(
    configs: Sequence[SweepConfig],
    runner: Callable[[SweepConfig], dict[str, object]],
    jobs: int = 1,
) -> list[dict[str, object]]:
    """Execute ``runner`` over configurations, up to ``jobs`` at a time.

    Results are collected in configuration order regardless of completion
    order; appends are serialized by the collecting thread.
    """
    if jobs <= 1:
        return [runner(c) for c in configs]
    with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(runner, configs))
