#!/usr/bin/env python3
"""Train a small MLP on synthetic Gaussian regression twice — once with
4-bit block quantization in every linear layer, once with quantization
disabled — and report the loss curves side by side."""

import argparse
from dataclasses import replace

from mxsim.mx import BlockSpec
from mxsim.qlinear import QLinearConfig
from mxsim.trainer import TASK_GAUSSIAN, TaskSpec, TrainConfig, train


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--dim", type=int, default=64)
    ap.add_argument("--samples", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--noise-std", type=float, default=2.0)
    ap.add_argument("--block-size", type=int, default=32)
    args = ap.parse_args()

    task = TaskSpec(
        kind=TASK_GAUSSIAN,
        n_samples=args.samples,
        dim=args.dim,
        seed=args.seed,
        noise_std=args.noise_std,
    )
    qcfg = QLinearConfig(spec=BlockSpec(block_size=args.block_size))
    cfg = TrainConfig(qcfg=qcfg, hidden=(64, 32), epochs=args.epochs, seed=args.seed)

    quantized = train(task, cfg)
    dense = train(task, replace(cfg, qcfg=replace(qcfg, quantize=False)))

    print(f"{'epoch':>5}  {'quantized':>12}  {'dense':>12}")
    for i, (q, d) in enumerate(zip(quantized.train_losses, dense.train_losses)):
        print(f"{i + 1:>5}  {q:>12.6f}  {d:>12.6f}")
    ratio = quantized.train_losses[-1] / dense.train_losses[-1]
    print(f"final ratio quantized/dense: {ratio:.3f}")


if __name__ == "__main__":
    main()
