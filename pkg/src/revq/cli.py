"""Command-line entry point: train, encode, decode, eval, and the three
structural experiments.  Usage problems (bad flags, missing files, invalid
configs) exit with code 2; runtime failures exit with code 1."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import harness
from .audio_frontend import PcmSignal, WavError, read_wav, signal_to_windows, write_wav
from .bitstream import StreamError
from .engine import load_model, save_model
from .trainer import TrainConfig, parse_kv_file, synth_dataset


class UsageError(Exception):
    pass


def _read_config(path) -> dict:
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    try:
        return parse_kv_file(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _read_file(path, kind: str) -> bytes:
    if not os.path.exists(path):
        raise UsageError(f"{kind} file not found: {path}")
    with open(path, "rb") as f:
        return f.read()


def _load_dataset(kv: dict, wav_path=None) -> list[np.ndarray]:
    if wav_path is not None:
        sig = read_wav(_read_file(wav_path, "input"))
        block = int(kv.get("latent_dim", 64))
        t = int(kv.get("frames_per_window", 8))
        windows, _ = signal_to_windows(sig, block, t)
        if not windows:
            raise UsageError("input WAV is too short to produce any window")
        return windows
    spec = harness.make_synth_spec(kv)
    n_windows = int(kv.get("n_windows", 512))
    return synth_dataset(spec, n_windows, int(kv.get("seed", 0)))


def cmd_train(args) -> int:
    kv = _read_config(args.config)
    if args.seed is not None:
        kv["seed"] = str(args.seed)
    data = _load_dataset(kv, args.input)
    try:
        model, _ = harness.train_from_config(kv, data)
    except ValueError as exc:
        raise UsageError(f"invalid training config: {exc}") from exc
    save_model(model, args.output)
    print(f"trained model written to {args.output}")
    return 0


def cmd_encode(args) -> int:
    model = load_model(_read_file(args.model, "model") and args.model)
    sig = read_wav(_read_file(args.input, "input"))
    if args.k_r < 0 or args.k_r > model.n_experts:
        raise UsageError(f"--k-r must lie in [0, {model.n_experts}]")
    stream = harness.encode_signal(sig, model, args.k_r, args.frames_per_window)
    with open(args.output, "wb") as f:
        f.write(stream)
    print(f"encoded {len(sig.samples)} samples into {len(stream)} bytes")
    return 0


def cmd_decode(args) -> int:
    model = load_model(_read_file(args.model, "model") and args.model)
    sig = harness.decode_stream(_read_file(args.input, "input"), model)
    with open(args.output, "wb") as f:
        f.write(write_wav(sig))
    print(f"decoded {len(sig.samples)} samples at {sig.sample_rate} Hz")
    return 0


def cmd_eval(args) -> int:
    ref = read_wav(_read_file(args.input, "reference"))
    deg = read_wav(_read_file(args.degraded, "degraded"))
    m = harness.eval_metrics(ref, deg)
    print(f"mse={m.mse} snr_db={m.snr_db} log_stft_l1={m.log_stft_l1}")
    if args.csv:
        harness.write_csv(
            args.csv,
            [{"mse": m.mse, "snr_db": m.snr_db, "log_stft_l1": m.log_stft_l1}],
        )
    return 0


def _model_for_experiment(args, kv, data):
    if getattr(args, "model", None):
        return load_model(_read_file(args.model, "model") and args.model)
    train_split, _ = harness.split_holdout(data)
    model, _ = harness.train_from_config(kv, train_split)
    return model


def cmd_exp_adaptive(args) -> int:
    kv = _read_config(args.config)
    data = _load_dataset(kv)
    model = _model_for_experiment(args, kv, data)
    _, holdout = harness.split_holdout(data)
    k_r = args.k_r if args.k_r is not None else int(kv.get("eval_k_r", 3))
    summary, rows = harness.exp_adaptive(model, holdout, k_r)
    if args.csv:
        harness.write_csv(args.csv, rows)
    for key, value in summary.items():
        print(f"{key}={value}")
    return 0


def cmd_exp_utilization(args) -> int:
    kv = _read_config(args.config)
    data = _load_dataset(kv)
    sweep = [int(x) for x in kv.get("n_r_sweep", "4,6,8,16").split(",")]
    k_r = args.k_r if args.k_r is not None else int(kv.get("eval_k_r", 2))
    rows = harness.exp_utilization(sweep, k_r, kv, data)
    if args.csv:
        harness.write_csv(args.csv, rows)
    for row in rows:
        print(
            f"n_experts={row['n_experts']} mse={row['mse']:.6g} "
            f"usage_pct={row['usage_pct']:.1f}"
        )
    return 0


def cmd_exp_vbr(args) -> int:
    kv = _read_config(args.config)
    data = _load_dataset(kv)
    model = _model_for_experiment(args, kv, data)
    _, holdout = harness.split_holdout(data)
    sample_rate = int(kv.get("sample_rate", 16000))
    block = int(kv.get("block_size", kv.get("latent_dim", 16)))
    rows = harness.exp_vbr(model, holdout, sample_rate, block)
    if args.csv:
        harness.write_csv(args.csv, rows)
    for row in rows:
        print(
            f"k_r={row['k_r']} total_bps={row['total_bps']:.2f} "
            f"mse={row['mse']:.6g} snr_db={row['snr_db']:.2f}"
        )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="revq",
        description="Residual-experts vector quantization codec and harness",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a config")
    t.add_argument("--config", required=True)
    t.add_argument("--output", required=True, help="model file to write")
    t.add_argument("--input", default=None, help="optional training WAV")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode a WAV into a coded stream")
    e.add_argument("--model", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--output", required=True)
    e.add_argument("--k-r", dest="k_r", type=int, required=True)
    e.add_argument("--frames-per-window", dest="frames_per_window", type=int, default=8)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode a coded stream into a WAV")
    d.add_argument("--model", required=True)
    d.add_argument("--input", required=True)
    d.add_argument("--output", required=True)
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="compare a degraded WAV against a reference")
    v.add_argument("--input", required=True, help="reference WAV")
    v.add_argument("--degraded", required=True)
    v.add_argument("--csv", default=None)
    v.set_defaults(func=cmd_eval)

    a = sub.add_parser("exp-adaptive", help="fixed vs oracle vs routed selection")
    a.add_argument("--config", required=True)
    a.add_argument("--model", default=None)
    a.add_argument("--k-r", dest="k_r", type=int, default=None)
    a.add_argument("--csv", default=None)
    a.set_defaults(func=cmd_exp_adaptive)

    u = sub.add_parser("exp-utilization", help="usage and quality vs pool size")
    u.add_argument("--config", required=True)
    u.add_argument("--k-r", dest="k_r", type=int, default=None)
    u.add_argument("--csv", default=None)
    u.set_defaults(func=cmd_exp_utilization)

    b = sub.add_parser("exp-vbr", help="rate/quality sweep over k_r")
    b.add_argument("--config", required=True)
    b.add_argument("--model", default=None)
    b.add_argument("--csv", default=None)
    b.set_defaults(func=cmd_exp_vbr)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (StreamError, WavError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
