"""Command-line entry point.

Subcommands: ``quantize`` (round-trip a tensor file), ``recon``
(reconstruction-error grid), ``train`` (one quantized training run),
``sweep`` (grid of training runs), ``pareto`` (frontier extraction), and
``plot`` (SVG rendering of result CSVs).  Every subcommand is deterministic
given its configuration and seed; the ``MXSIM_SEED`` environment variable
overrides ``--seed``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import os
import struct
import sys
from pathlib import Path

import numpy as np

from .formats import FORMATS, get_format
from .mx import (
    BlockSpec,
    ZERO_MODES,
    dequantize_tensor,
    quantize_tensor,
    to_bytes,
)
from .plots import (
    line_plot,
    quantizer_curve_plot,
    scale_deviation_plot,
    scatter_plot,
)
from .sweep import (
    SweepConfig,
    SweepGrid,
    build_qlinear_config,
    complexity_points,
    enumerate_configs,
    pareto_front,
    recon_error_experiment,
    result_row,
    run_many,
    score_report,
    write_recon_csv,
    write_results_csv,
)
from .trainer import (
    TASK_CLASSIFICATION,
    TASK_GAUSSIAN,
    TaskSpec,
    TrainConfig,
    train,
)


class ConfigError(Exception):
    """Invalid configuration input; maps to exit code 2."""


# ---------------------------------------------------------------------------
# Config files: plain `key = value` lines with # comments.
# ---------------------------------------------------------------------------


def parse_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip().strip("\"'")
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def _parse_bool(key: str, value: str) -> bool:
    lowered = value.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"key {key!r}: expected a boolean, got {value!r}")


_SWEEP_KEYS = {
    "scale_format": str,
    "block_size": int,
    "max_grad": str,
    "quant_grad": str,
    "hadamard": str,
    "scale_grad": str,
    "sr": str,
    "optimiser": str,
    "loss_scaling": bool,
    "round_mode": str,
    "tensor_scaling": bool,
    "tensor_grad": str,
    "nan_mode": str,
}

_TRAIN_KEYS = {
    "task": str,
    "n_samples": int,
    "dim": int,
    "n_classes": int,
    "hidden": str,
    "epochs": int,
    "batch_size": int,
    "lr": float,
}


def _convert(key: str, value: str, kind) -> object:
    if kind is bool:
        return _parse_bool(key, value)
    try:
        return kind(value)
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: {exc}") from exc


def sweep_config_from_dict(values: dict[str, str]) -> SweepConfig:
    kwargs = {}
    for key, value in values.items():
        if key in _SWEEP_KEYS:
            kwargs[key] = _convert(key, value, _SWEEP_KEYS[key])
        elif key not in _TRAIN_KEYS:
            valid = sorted(set(_SWEEP_KEYS) | set(_TRAIN_KEYS))
            raise ConfigError(f"unknown key {key!r}; valid keys: {', '.join(valid)}")
    cfg = SweepConfig(**kwargs)
    _validate_sweep_config(cfg)
    return cfg


def _validate_sweep_config(cfg: SweepConfig) -> None:
    if cfg.scale_format not in FORMATS:
        raise ConfigError(
            f"unknown scale format {cfg.scale_format!r}; "
            f"valid names: {', '.join(sorted(FORMATS))}"
        )
    if cfg.nan_mode not in ZERO_MODES:
        raise ConfigError(
            f"unknown nan mode {cfg.nan_mode!r}; valid: {', '.join(ZERO_MODES)}"
        )
    if cfg.optimiser != "Adam":
        raise ConfigError(
            f"optimiser {cfg.optimiser!r} is not bundled; only Adam ships with "
            "this package (plug third-party optimisers in programmatically)"
        )
    try:
        build_qlinear_config(cfg)
    except (ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def _task_from_dict(values: dict[str, str], seed: int) -> TaskSpec:
    kind = values.get("task", TASK_GAUSSIAN)
    if kind not in (TASK_GAUSSIAN, TASK_CLASSIFICATION):
        raise ConfigError(
            f"unknown task {kind!r}; valid: {TASK_GAUSSIAN}, {TASK_CLASSIFICATION}"
        )
    return TaskSpec(
        kind=kind,
        n_samples=_convert("n_samples", values.get("n_samples", "5000"), int),
        dim=_convert("dim", values.get("dim", "64"), int),
        n_classes=_convert("n_classes", values.get("n_classes", "2"), int),
        seed=seed,
    )


def _train_config(values: dict[str, str], qcfg, seed: int) -> TrainConfig:
    hidden = values.get("hidden", "64,32")
    try:
        hidden_dims = tuple(int(h) for h in hidden.split(",") if h.strip())
    except ValueError as exc:
        raise ConfigError(f"key 'hidden': {exc}") from exc
    return TrainConfig(
        qcfg=qcfg,
        hidden=hidden_dims,
        epochs=_convert("epochs", values.get("epochs", "20"), int),
        batch_size=_convert("batch_size", values.get("batch_size", "128"), int),
        lr=_convert("lr", values.get("lr", "1e-3"), float),
        seed=seed,
        loss_scaling=_parse_bool(
            "loss_scaling", values.get("loss_scaling", "False")
        ),
    )


# ---------------------------------------------------------------------------
# Tensor file IO for `quantize`
# ---------------------------------------------------------------------------


def read_tensor_file(path: str) -> np.ndarray:
    """Load a tensor from CSV or a little-endian f32 binary with dims header.

    The binary layout is ``uint32 ndim``, ``ndim * uint32`` dims, then the
    row-major f32 payload, all little-endian.
    """
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"tensor file not found: {path}")
    if p.suffix.lower() == ".csv":
        try:
            return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
        except ValueError as exc:
            raise ConfigError(f"cannot parse CSV tensor {path}: {exc}") from exc
    raw = p.read_bytes()
    if len(raw) < 4:
        raise ConfigError(f"binary tensor {path} is truncated")
    (ndim,) = struct.unpack_from("<I", raw, 0)
    header = 4 + 4 * ndim
    if ndim == 0 or ndim > 8 or len(raw) < header:
        raise ConfigError(f"binary tensor {path} has an invalid dims header")
    dims = struct.unpack_from(f"<{ndim}I", raw, 4)
    count = int(np.prod(dims))
    if len(raw) != header + 4 * count:
        raise ConfigError(
            f"binary tensor {path}: payload size does not match dims {dims}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=header).astype(np.float64)
    return data.reshape(dims)


def write_tensor_file(path: str, x: np.ndarray) -> None:
    dims = x.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _resolve_seed(args) -> int:
    env = os.environ.get("MXSIM_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"MXSIM_SEED must be an integer, got {env!r}") from exc
    return args.seed


def cmd_quantize(args) -> int:
    if args.format not in FORMATS:
        raise ConfigError(
            f"unknown scale format {args.format!r}; "
            f"valid names: {', '.join(sorted(FORMATS))}"
        )
    x = read_tensor_file(args.input)
    spec = BlockSpec(block_size=args.block_size, scale_format=get_format(args.format))
    qt = quantize_tensor(x.ravel(), spec)
    deq = dequantize_tensor(qt).reshape(x.shape)
    out = _out_dir(args)
    (out / "quantized.mxq").write_bytes(to_bytes(qt))
    np.savetxt(out / "dequantized.csv", np.atleast_2d(deq), delimiter=",")
    err = np.abs(x - deq)
    summary = (
        f"elements: {x.size}\n"
        f"max_abs_error: {err.max():.9g}\n"
        f"mean_abs_error: {err.mean():.9g}\n"
    )
    (out / "summary.txt").write_text(summary)
    print(summary, end="")
    return 0


def cmd_recon(args) -> int:
    formats = [args.format] if args.format else ["E8M0", "E4M3", "UE5M3"]
    for name in formats:
        if name not in FORMATS:
            raise ConfigError(
                f"unknown scale format {name!r}; "
                f"valid names: {', '.join(sorted(FORMATS))}"
            )
    block_sizes = (args.block_size,) if args.block_size else (8, 16, 32, 64, 128)
    rows = recon_error_experiment(
        formats=formats, block_sizes=block_sizes, seed=_resolve_seed(args)
    )
    out = _out_dir(args)
    path = out / "recon.csv"
    write_recon_csv(str(path), rows)
    print(f"wrote {len(rows)} cells to {path}")
    return 0


def _run_training(values: dict[str, str], cfg: SweepConfig, seed: int):
    from dataclasses import replace

    qcfg = build_qlinear_config(cfg)
    task = _task_from_dict(values, seed)
    tcfg = _train_config(values, qcfg, seed)
    tcfg = replace(tcfg, loss_scaling=cfg.loss_scaling or tcfg.loss_scaling)
    record = train(task, tcfg)
    # Reference loss: the same run with quantization disabled.
    dense_cfg = replace(tcfg, qcfg=replace(qcfg, quantize=False), loss_scaling=False)
    dense = train(task, dense_cfg)
    return record, dense


def cmd_train(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    cfg = sweep_config_from_dict(values)
    seed = _resolve_seed(args)
    record, dense = _run_training(values, cfg, seed)
    out = _out_dir(args)
    with open(out / "losses.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_loss", "dense_val_loss"])
        for i, (tr, va, dv) in enumerate(
            zip(record.train_losses, record.val_losses, dense.val_losses), start=1
        ):
            writer.writerow([i, tr, va, dv])
    m_ref = min(dense.val_losses)
    row = result_row(
        record.dataset,
        cfg,
        val_loss=record.val_losses[-1],
        train_loss=record.train_losses[-1],
        m_ref=m_ref,
    )
    write_results_csv(str(out / "results.csv"), [row])
    print(
        f"final train loss {record.train_losses[-1]:.6g}, "
        f"val loss {record.val_losses[-1]:.6g}, "
        f"dense reference {m_ref:.6g}, diverged={record.diverged}"
    )
    return 0


def _grid_from_dict(values: dict[str, str]) -> SweepGrid:
    def axis(key: str, default):
        if key not in values:
            return default
        return tuple(v.strip() for v in values[key].split(",") if v.strip())

    def bool_axis(key: str, default):
        if key not in values:
            return default
        return tuple(_parse_bool(key, v.strip()) for v in values[key].split(","))

    base = SweepGrid()
    return SweepGrid(
        scale_formats=axis("scale_formats", base.scale_formats),
        max_grads=axis("max_grads", base.max_grads),
        round_modes=axis("round_modes", base.round_modes),
        quant_grads=axis("quant_grads", base.quant_grads),
        scale_grads=axis("scale_grads", base.scale_grads),
        tensor_grads=axis("tensor_grads", base.tensor_grads),
        optimisers=axis("optimisers", ("Adam",)),
        loss_scalings=bool_axis("loss_scalings", base.loss_scalings),
        tensor_scalings=bool_axis("tensor_scalings", base.tensor_scalings),
        srs=axis("srs", base.srs),
        hadamards=axis("hadamards", base.hadamards),
    )


def cmd_sweep(args) -> int:
    values = parse_config_file(args.config) if args.config else {}
    grid_keys = {
        "scale_formats",
        "max_grads",
        "round_modes",
        "quant_grads",
        "scale_grads",
        "tensor_grads",
        "optimisers",
        "loss_scalings",
        "tensor_scalings",
        "srs",
        "hadamards",
    }
    grid_values = {k: v for k, v in values.items() if k in grid_keys}
    train_values = {k: v for k, v in values.items() if k not in grid_keys}
    report = enumerate_configs(_grid_from_dict(grid_values))
    if args.limit:
        configs = report.configs[: args.limit]
    else:
        configs = report.configs
    print(
        f"grid: {report.raw_count} raw combinations, "
        f"{len(report.configs)} valid, running {len(configs)}"
    )
    seed = _resolve_seed(args)

    def runner(cfg: SweepConfig) -> dict[str, object]:
        _validate_sweep_config(cfg)
        record, dense = _run_training(train_values, cfg, seed)
        return result_row(
            record.dataset,
            cfg,
            val_loss=record.val_losses[-1],
            train_loss=record.train_losses[-1],
            m_ref=min(dense.val_losses),
        )

    rows = run_many(configs, runner, jobs=args.jobs)
    out = _out_dir(args)
    write_results_csv(str(out / "results.csv"), rows)
    print(f"wrote {len(rows)} rows to {out / 'results.csv'}")
    return 0


def _read_results(path: str) -> list[dict[str, str]]:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"results file not found: {path}")
    with open(p, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConfigError(f"results file {path} is empty")
    for col in ("Complexity points", "Score"):
        if col not in rows[0]:
            raise ConfigError(f"results file {path} lacks column {col!r}")
    return rows


def cmd_pareto(args) -> int:
    rows = _read_results(args.results)
    reports = [
        score_report(
            config_id=str(i),
            m_ref=1.0,
            m_c=1.0 - float(r["Score"]),
            omega=float(r["Complexity points"]),
        )
        for i, r in enumerate(rows)
    ]
    front = pareto_front(reports)
    front_ids = {r.config_id for r in front}
    out = _out_dir(args)
    with open(out / "frontier.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(r for i, r in enumerate(rows) if str(i) in front_ids)
    points = [(r.omega, r.score) for r in reports]
    highlight = [(r.omega, r.score) for r in front]
    svg = scatter_plot(
        points,
        highlight,
        title="Efficiency frontier",
        xlabel="complexity points",
        ylabel="score",
    )
    (out / "pareto.svg").write_text(svg)
    print(f"frontier: {len(front)} of {len(rows)} runs")
    return 0


def cmd_plot(args) -> int:
    out = _out_dir(args)
    kind = args.kind
    if kind == "quantizer":
        svg = quantizer_curve_plot(args.estimator)
    elif kind == "scale-deviation":
        if args.format and args.format not in FORMATS:
            raise ConfigError(
                f"unknown scale format {args.format!r}; "
                f"valid names: {', '.join(sorted(FORMATS))}"
            )
        svg = scale_deviation_plot(args.format or "E8M0")
    elif kind == "loss":
        if not args.input:
            raise ConfigError("plot kind 'loss' requires an input CSV")
        with open(args.input, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or "epoch" not in rows[0]:
            raise ConfigError(f"{args.input} is not a loss-curve CSV")
        epochs = [float(r["epoch"]) for r in rows]
        series = {
            col: (epochs, [float(r[col]) for r in rows])
            for col in rows[0]
            if col != "epoch"
        }
        svg = line_plot(series, title="Training curves", xlabel="epoch", ylabel="loss")
    elif kind == "recon":
        if not args.input:
            raise ConfigError("plot kind 'recon' requires an input CSV")
        with open(args.input, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or "mean_rel_err" not in rows[0]:
            raise ConfigError(f"{args.input} is not a reconstruction-error CSV")
        series: dict[str, tuple[list[float], list[float]]] = {}
        for r in rows:
            if r["beta"] or float(r["scale"]) != 1.0:
                continue
            xs, ys = series.setdefault(r["format"], ([], []))
            xs.append(float(r["l"]))
            ys.append(float(r["mean_rel_err"]))
        svg = line_plot(
            series,
            title="Reconstruction error vs block size",
            xlabel="block size",
            ylabel="mean relative error",
            log_y=True,
        )
    elif kind == "pareto":
        if not args.input:
            raise ConfigError("plot kind 'pareto' requires a results CSV")
        rows = _read_results(args.input)
        points = [
            (float(r["Complexity points"]), float(r["Score"])) for r in rows
        ]
        svg = scatter_plot(
            points, title="Score vs complexity", xlabel="complexity points",
            ylabel="score",
        )
    else:  # pragma: no cover - argparse restricts choices
        raise ConfigError(f"unknown plot kind {kind!r}")
    path = out / f"{kind}.svg"
    path.write_text(svg)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mxsim",
        description="Bit-exact simulator for block-scaled 4-bit training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0, help="random seed")

    p = sub.add_parser("quantize", help="round-trip a tensor file")
    p.add_argument("input", help="tensor file (.csv or binary with dims header)")
    p.add_argument("--format", default="E8M0", help="scale format name")
    p.add_argument("--block-size", type=int, default=32, choices=(16, 32))
    common(p)

    p = sub.add_parser("recon", help="reconstruction-error grid")
    p.add_argument("--format", default=None, help="restrict to one scale format")
    p.add_argument("--block-size", type=int, default=None, choices=(16, 32))
    common(p)

    p = sub.add_parser("train", help="one quantized training run")
    p.add_argument("--config", default=None, help="key = value config file")
    common(p)

    p = sub.add_parser("sweep", help="grid of training runs")
    p.add_argument("--config", default=None, help="key = value grid file")
    p.add_argument("--jobs", type=int, default=1, help="concurrent runs")
    p.add_argument("--limit", type=int, default=0, help="run at most N configs")
    common(p)

    p = sub.add_parser("pareto", help="extract the efficiency frontier")
    p.add_argument("results", help="results CSV")
    common(p)

    p = sub.add_parser("plot", help="render an SVG from result CSVs")
    p.add_argument(
        "--kind",
        required=True,
        choices=("loss", "pareto", "recon", "quantizer", "scale-deviation"),
    )
    p.add_argument("--input", default=None, help="input CSV where applicable")
    p.add_argument("--format", default=None, help="scale format for curves")
    p.add_argument(
        "--estimator", default="sigmoid", help="surrogate kind for quantizer plots"
    )
    common(p)

    return parser


_COMMANDS = {
    "quantize": cmd_quantize,
    "recon": cmd_recon,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "pareto": cmd_pareto,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on bad flags, which matches our contract.
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
