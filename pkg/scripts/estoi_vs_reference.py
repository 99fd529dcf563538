"""Compare our ESTOI with the pystoi reference on synthetic drone-noise mixtures.

Development-time oracle only: pystoi is a test extra, not a runtime dependency.

    python3 scripts/estoi_vs_reference.py --n 20
"""
import argparse

import numpy as np
from pystoi import stoi

from droneadapt.datagen import mix_at_snr, random_drone_spec, synth_drone_noise, synth_speech
from droneadapt.metrics import estoi


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=20)
    ap.add_argument("--seconds", type=float, default=4.0)
    args = ap.parse_args()
    diffs = []
    for i in range(args.n):
        r = np.random.default_rng(i)
        s = synth_speech(r, args.seconds).samples
        v = synth_drone_noise(random_drone_spec(r, "constant"), args.seconds).samples
        y = mix_at_snr(s, v, r.uniform(-10, 5)).mixture
        ours, ref = estoi(s, y), stoi(s, y, 16000, extended=True)
        diffs.append(ours - ref)
        print(f"{i:3d}  ours {ours:.4f}  pystoi {ref:.4f}  diff {ours - ref:+.4f}")
    print(f"max |diff| = {np.max(np.abs(diffs)):.4f}")


if __name__ == "__main__":
    main()
