"""Run the desk-scale transfer protocol for several seeds and tabulate the results.

    python3 scripts/run_protocol.py --seeds 1 2 3 --out runs/protocol
"""
import argparse
import logging
import time
from pathlib import Path

from droneadapt.pipeline import BenchmarkConfig, ProtocolConfig, synthetic_benchmark, transfer_protocol


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--out", default="runs/protocol")
    ap.add_argument("--scratch", action="store_true", help="add the from-scratch condition")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    rows = []
    for seed in args.seeds:
        t0 = time.process_time()
        bench = synthetic_benchmark(BenchmarkConfig(), seed)
        res = transfer_protocol(bench, ProtocolConfig(seed=seed, include_scratch=args.scratch))
        res.write(Path(args.out) / f"seed{seed}")
        cpu = time.process_time() - t0
        s = {k: r.mean_si_snr for k, r in res.reports.items()}
        rows.append((seed, s, cpu))
        print(res.summary_tsv(), f"cpu {cpu:.0f} s", flush=True)
    print("seed\tnoisy\two_tuning\tfine_tuning\tadapter_tuning\tgain_vs_wo\tgain_vs_noisy\tcpu_s")
    for seed, s, cpu in rows:
        print(f"{seed}\t{s['noisy']:.2f}\t{s['wo_tuning']:.2f}\t{s['fine_tuning']:.2f}\t{s['adapter_tuning']:.2f}"
              f"\t{s['adapter_tuning'] - s['wo_tuning']:+.2f}\t{s['adapter_tuning'] - s['noisy']:+.2f}\t{cpu:.0f}")


if __name__ == "__main__":
    main()
