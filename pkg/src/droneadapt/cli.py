"""Command-line interface.

Subcommands: show-config, synth, build-data, pretrain, adapt, finetune,
enhance, evaluate, protocol. Exit codes: 0 success, 1 runtime or validation
failure (one-line diagnostic on stderr), 2 usage error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, load_config
from .datagen import (
    DatasetManifest,
    ManifestEntry,
    MixtureRecord,
    build_dataset,
    random_drone_spec,
    read_wav,
    synth_drone_noise,
    synth_generic_noise,
    synth_speech,
    write_wav,
)
from .dsp import SAMPLE_RATE
from .errors import FormatError, LengthError, NonFiniteLossError, StateError, ValidationError
from .metrics import evaluate
from .model import MaskNet, insert_adapters
from .pipeline import EnhancementSession, ProtocolConfig, enhance, synthetic_benchmark, transfer_protocol
from .training import train

log = logging.getLogger("droneadapt")

RECORDS = "records.tsv"


# ------------------------------------------------------------------ helpers


def _config(args) -> RunConfig:
    overrides = {"seed": args.seed}
    for key in ("lr", "epochs", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[f"{args.stage}.{key}"] = val
    return load_config(args.config, overrides)


def write_records(out_dir, records: list[MixtureRecord]):
    """Export mixtures as WAV triples plus a ``records.tsv`` index.

    Clean and mixture share one scale factor so the mixture peaks at 0.9,
    which keeps PCM16 from clipping and leaves the SNR unchanged. The noise
    is peak-normalised on its own and the stored gain compensates.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["index\tclean_id\tnoise_id\ttarget_snr_db\tapplied_noise_gain"]
    for i, r in enumerate(records):
        c = 0.9 / max(np.max(np.abs(r.mixture)), 1e-12)
        k = 0.9 / max(np.max(np.abs(r.noise)), 1e-12)
        write_wav(out / f"{i:05d}_clean.wav", c * r.clean)
        write_wav(out / f"{i:05d}_noise.wav", k * r.noise)
        write_wav(out / f"{i:05d}_mix.wav", c * r.mixture)
        # mixture = clean + gain * noise still holds (up to PCM16 rounding) for the stored files
        lines.append(f"{i}\t{r.clean_id}\t{r.noise_id}\t{r.target_snr_db:.6f}\t{c * r.applied_noise_gain / k:.9g}")
    (out / RECORDS).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_records(data_dir) -> list[MixtureRecord]:
    d = Path(data_dir)
    index = d / RECORDS
    if not index.exists():
        raise FormatError(f"{d} has no {RECORDS}; create it with build-data")
    records = []
    for line in index.read_text(encoding="utf-8").splitlines()[1:]:
        if not line.strip():
            continue
        i, cid, nid, snr, gain = line.split("\t")
        k = int(i)
        clean = read_wav(d / f"{k:05d}_clean.wav").samples
        noise = read_wav(d / f"{k:05d}_noise.wav").samples
        mix = read_wav(d / f"{k:05d}_mix.wav").samples
        records.append(MixtureRecord(clean, noise, mix, float(snr), float(gain), cid, nid))
    if not records:
        raise ValidationError(f"{index} lists no records")
    return records


# -------------------------------------------------------------- subcommands


def cmd_show_config(args):
    print(_config(args).to_json())


def cmd_synth(args):
    """Write synthetic speech, drone and generic-noise clips with two manifests."""
    cfg = _config(args)
    bc = cfg.benchmark
    out = Path(args.out)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    seed = cfg.seed
    drone, generic = [], []

    def put(name, w):
        write_wav(out / "wav" / f"{name}.wav", w)
        return f"wav/{name}.wav"

    for split, n, stream in (("train", bc.clean_train, 11), ("test", bc.clean_test, 12)):
        for i in range(n):
            sid = f"spk-{split}{i:02d}"
            path = put(sid, synth_speech(np.random.default_rng([seed, stream, i]), bc.clip_s))
            drone.append(ManifestEntry("clean", split, "-", sid, path))
            if split == "train":
                generic.append(ManifestEntry("clean", split, "-", sid, path))
    for split, n, stream in (("train", bc.drones_train, 31), ("val", bc.drones_val, 32), ("test", bc.drones_test, 33)):
        for i in range(n):
            kind = "dynamic" if i % 2 else "constant"
            spec = random_drone_spec(np.random.default_rng([seed, stream, i]), kind)
            nid = f"drone-{split}{i:02d}-{kind}"
            drone.append(ManifestEntry("noise", split, kind, nid, put(nid, synth_drone_noise(spec, bc.clip_s))))
    kinds = ("pink", "babble", "modulated")
    for i in range(bc.generic_noises):
        nid = f"generic-{kinds[i % 3]}{i:02d}"
        w = synth_generic_noise(np.random.default_rng([seed, 21, i]), bc.clip_s, kinds[i % 3])
        generic.append(ManifestEntry("noise", "train", "constant", nid, put(nid, w)))
    DatasetManifest(drone, out).dump(out / "drone_manifest.tsv")
    DatasetManifest(generic, out).dump(out / "generic_manifest.tsv")
    log.info("wrote %d drone-manifest and %d generic-manifest entries to %s", len(drone), len(generic), out)


def cmd_build_data(args):
    cfg = _config(args)
    manifest = DatasetManifest.load(args.manifest)
    manifest.validate(decode=True)
    data = dataclasses.replace(
        cfg.data,
        seed=cfg.seed,
        **{k: v for k, v in (("count", args.count), ("crop_s", args.crop), ("snr_lo", args.snr_lo), ("snr_hi", args.snr_hi)) if v is not None},
    )
    records = build_dataset(manifest, args.split, data)
    write_records(args.out, records)
    log.info("wrote %d mixtures to %s", len(records), args.out)


def _train_and_save(args, model, policy, tc):
    cfg = _config(args)
    records = read_records(args.data)
    val = read_records(args.val) if args.val else None
    log_path = Path(args.out).with_suffix(".history.tsv")
    res = train(model, records, policy, tc, cfg.stft, val=val, log_path=log_path)
    save_checkpoint(model, args.out, res.optimizer, res.step, res.rng_state)
    log.info("saved %s after %d steps", args.out, res.step)


def cmd_pretrain(args):
    cfg = _config(args)
    model_cfg = dataclasses.replace(cfg.model, adapters=(False,) * len(cfg.model.channels))
    tc = dataclasses.replace(cfg.pretrain, seed=cfg.seed)
    _train_and_save(args, MaskNet(model_cfg, seed=cfg.seed), "full", tc)


def cmd_adapt(args):
    cfg = _config(args)
    model = insert_adapters(load_checkpoint(args.base), cfg.model.adapters, seed=cfg.seed)
    _train_and_save(args, model, "adapter_tune", dataclasses.replace(cfg.adapt, seed=cfg.seed))


def cmd_finetune(args):
    cfg = _config(args)
    model = load_checkpoint(args.base)
    _train_and_save(args, model, "fine_tune", dataclasses.replace(cfg.adapt, seed=cfg.seed))


def cmd_enhance(args):
    cfg = _config(args)
    try:
        sr, _ = scipy.io.wavfile.read(args.input, mmap=True)
    except ValueError as exc:
        raise FormatError(f"{args.input}: not a readable WAV file ({exc})") from None
    if sr != SAMPLE_RATE:
        raise ValidationError(f"{args.input}: sample rate {sr} Hz, expected {SAMPLE_RATE} Hz")
    w = read_wav(args.input, target_rate=None)
    model = load_checkpoint(args.ckpt)
    mode = "without_adapters" if args.without_adapters else "with_adapters"
    out = enhance(w, EnhancementSession(model, cfg.stft, mode))
    write_wav(args.output, out)


def cmd_evaluate(args):
    cfg = _config(args)
    records = read_records(args.data)
    if args.condition == "noisy":
        fn = None
    else:
        if not args.ckpt:
            raise ValidationError("--ckpt is required for the enhanced condition")
        session = EnhancementSession(load_checkpoint(args.ckpt), cfg.stft)
        fn = lambda y: enhance(y, session)
    report = evaluate(fn, records, args.condition, workers=args.threads)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.with_suffix(".json").write_text(report.to_json(), encoding="utf-8")
    out.with_suffix(".tsv").write_text(report.to_tsv(), encoding="utf-8")
    print(f"{report.condition}\tn={report.n}\tsi_snr={report.mean_si_snr:.4f}\testoi={report.mean_estoi:.4f}")


def cmd_protocol(args):
    cfg = _config(args)
    manifest = DatasetManifest.load(args.drone_manifest) if args.drone_manifest else None
    bench = synthetic_benchmark(cfg.benchmark, cfg.seed, manifest)
    pc = ProtocolConfig(cfg.seed, cfg.model, cfg.stft, cfg.pretrain, cfg.adapt, args.with_scratch)
    result = transfer_protocol(bench, pc, workers=args.threads)
    result.write(args.out)
    sys.stdout.write(result.summary_tsv())


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="droneadapt", description="Drone-noise speech enhancement with bottleneck adapters.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (flags override it)")
    common.add_argument("--seed", type=int, help="seed for all randomness")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="worker threads for data and evaluation")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_, stage="pretrain"):
        sp = sub.add_parser(name, parents=[common], help=help_)
        sp.set_defaults(func=fn, stage=stage)
        return sp

    add("show-config", cmd_show_config, "print the effective configuration")
    sp = add("synth", cmd_synth, "write synthetic clips and manifests")
    sp.add_argument("--out", required=True)

    sp = add("build-data", cmd_build_data, "mix manifest clips into a dataset directory")
    sp.add_argument("manifest")
    sp.add_argument("--split", choices=("train", "val", "test"), default="train")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int)
    sp.add_argument("--crop", type=float)
    sp.add_argument("--snr-lo", type=float, dest="snr_lo")
    sp.add_argument("--snr-hi", type=float, dest="snr_hi")

    for name, fn, stage, help_ in (
        ("pretrain", cmd_pretrain, "pretrain", "train a base model (all parameters)"),
        ("adapt", cmd_adapt, "adapt", "insert adapters and train adapters + gates"),
        ("finetune", cmd_finetune, "adapt", "train encoder FSMN layers + gates"),
    ):
        sp = add(name, fn, help_, stage)
        sp.add_argument("--data", required=True, help="dataset directory from build-data")
        sp.add_argument("--val", help="validation dataset directory")
        sp.add_argument("--out", required=True, help="checkpoint to write")
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", type=int, dest="batch_size")
        if name != "pretrain":
            sp.add_argument("--base", required=True, help="pretrained checkpoint")

    sp = add("enhance", cmd_enhance, "enhance one 16 kHz WAV file")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--without-adapters", action="store_true")

    sp = add("evaluate", cmd_evaluate, "score a dataset directory")
    sp.add_argument("--data", required=True)
    sp.add_argument("--condition", choices=("noisy", "enhanced"), default="noisy")
    sp.add_argument("--ckpt")
    sp.add_argument("--out", required=True, help="report path stem (.json and .tsv are written)")

    sp = add("protocol", cmd_protocol, "two-stage transfer run with a comparison report")
    sp.add_argument("--out", required=True)
    sp.add_argument("--drone-manifest", help="manifest of extra drone-noise WAVs")
    sp.add_argument("--with-scratch", action="store_true", help="also train from random init on drone data")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    torch.set_num_threads(1)
    try:
        args.func(args)
    except (ValidationError, FormatError, LengthError, StateError, NonFiniteLossError, FileNotFoundError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"droneadapt {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
