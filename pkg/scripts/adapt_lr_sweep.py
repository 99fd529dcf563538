"""Sweep the adaptation learning rate for one seed, reusing one pretrained base.

    python3 scripts/adapt_lr_sweep.py --seed 1 --lrs 1e-3 3e-3 1e-2
"""
import argparse
import copy
import dataclasses

import torch

from droneadapt.metrics import evaluate
from droneadapt.model import MaskNet, insert_adapters
from droneadapt.pipeline import BenchmarkConfig, EnhancementSession, ProtocolConfig, enhance, synthetic_benchmark
from droneadapt.training import train


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--lrs", type=float, nargs="+", default=[1e-3, 3e-3, 1e-2])
    ap.add_argument("--epochs", type=int, default=3)
    args = ap.parse_args()
    torch.set_num_threads(1)
    cfg = ProtocolConfig(seed=args.seed)
    bench = synthetic_benchmark(BenchmarkConfig(), args.seed)
    base_cfg = dataclasses.replace(cfg.model, adapters=(False,) * len(cfg.model.channels))
    base = MaskNet(base_cfg, seed=args.seed)
    train(base, bench.pretrain, "full", cfg.pretrain, cfg.stft)
    score = lambda m: evaluate(lambda y: enhance(y, EnhancementSession(m, cfg.stft)), bench.test).mean_si_snr
    print(f"noisy {evaluate(None, bench.test).mean_si_snr:.2f}  wo_tuning {score(base):.2f}")
    for lr in args.lrs:
        m = insert_adapters(copy.deepcopy(base), cfg.model.adapters, seed=args.seed)
        tc = dataclasses.replace(cfg.adapt, lr=lr, epochs=args.epochs)
        res = train(m, bench.adapt, "adapter_tune", tc, cfg.stft, val=bench.val)
        print(f"lr {lr:g}: adapter_tuning {score(m):.2f}  val curve {[round(h['val_sisnr'], 2) for h in res.history]}")


if __name__ == "__main__":
    main()
