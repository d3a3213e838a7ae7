"""Experiment harness: signal metrics, the encode/decode pipeline, and the
structural experiments (fixed-vs-adaptive selection, expert utilization
against pool size, and the variable-bitrate sweep)."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .audio_frontend import PcmSignal, signal_to_windows, windows_to_signal
from .bitstream import StreamHeader, bitrate_report, pack_stream, unpack_stream
from .engine import (
    RevqModel,
    RoutingMask,
    cascade_with_mask,
    _reconstruct,
    oracle_select,
    revq_dequantize,
    revq_quantize,
    window_mse,
)
from .trainer import SynthSpec, TrainConfig, build_initial_model, synth_dataset, train

STFT_SIZE = 512
STFT_HOP = 256
STFT_EPS = 1e-5

__all__ = [
    "Metrics",
    "eval_metrics",
    "encode_signal",
    "decode_stream",
    "split_holdout",
    "make_synth_spec",
    "train_from_config",
    "exp_adaptive",
    "exp_utilization",
    "exp_vbr",
]


@dataclass
class Metrics:
    mse: float
    snr_db: float
    log_stft_l1: float
    bitrate: dict | None = None


def _stft_logmag(x: np.ndarray) -> np.ndarray:
    """Log magnitude of an STFT with 512-point frames, hop 256, periodic
    Hann window.  Short signals are zero-padded to one full frame."""
    n = x.shape[0]
    if n < STFT_SIZE:
        x = np.concatenate([x, np.zeros(STFT_SIZE - n)])
        n = STFT_SIZE
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(STFT_SIZE) / STFT_SIZE)
    starts = range(0, n - STFT_SIZE + 1, STFT_HOP)
    frames = np.stack([x[s : s + STFT_SIZE] * window for s in starts])
    return np.log(np.abs(np.fft.rfft(frames, axis=1)) + STFT_EPS)


def eval_metrics(ref: PcmSignal, deg: PcmSignal) -> Metrics:
    """Sample-domain MSE and SNR plus a log-magnitude STFT L1 distance.

    SNR is reported as +inf when the signals are identical.
    """
    if ref.samples.shape != deg.samples.shape:
        raise ValueError("signals must have equal length")
    if ref.sample_rate != deg.sample_rate:
        raise ValueError("signals must share one sample rate")
    err = ref.samples - deg.samples
    mse = float(np.mean(err**2)) if err.size else 0.0
    err_power = float(np.sum(err**2))
    sig_power = float(np.sum(ref.samples**2))
    if err_power == 0.0:
        snr = np.inf
    elif sig_power == 0.0:
        snr = -np.inf
    else:
        snr = 10.0 * np.log10(sig_power / err_power)
    stft_l1 = float(np.mean(np.abs(_stft_logmag(ref.samples) - _stft_logmag(deg.samples))))
    return Metrics(mse=mse, snr_db=float(snr), log_stft_l1=stft_l1)


# --- codec pipeline -----------------------------------------------------------


def encode_signal(
    sig: PcmSignal, m: RevqModel, k_r: int, frames_per_window: int
) -> bytes:
    """WAV samples to a coded stream: DCT front-end, routed quantization of
    every window at the requested k_r, bit-exact packing."""
    windows, pad = signal_to_windows(sig, m.dim, frames_per_window)
    quantized = [revq_quantize(fb, m, k_r)[0] for fb in windows]
    header = StreamHeader(
        sample_rate=sig.sample_rate,
        block_size=m.dim,
        frames_per_window=frames_per_window,
        dim=m.dim,
        n_experts=m.n_experts,
        k_shared=m.shared.size,
        k_expert=m.experts[0].size if m.experts else 1,
        n_windows=len(quantized),
        tail_pad=pad,
    )
    return pack_stream(header, quantized)


def decode_stream(data: bytes, m: RevqModel) -> PcmSignal:
    """Coded stream back to samples; the model must match the header."""
    header, quantized = unpack_stream(data)
    if header.dim != m.dim or header.n_experts != m.n_experts:
        raise ValueError("model shape disagrees with the stream header")
    if header.k_shared != m.shared.size or (
        m.experts and header.k_expert != m.experts[0].size
    ):
        raise ValueError("model codebook sizes disagree with the stream header")
    if header.block_size != header.dim:
        raise ValueError("stream was not produced by the DCT front-end")
    recons = [revq_dequantize(qw, m) for qw in quantized]
    return windows_to_signal(recons, header.sample_rate, header.tail_pad)


# --- experiment support -------------------------------------------------------


def split_holdout(data: list, frac: float = 0.1) -> tuple[list, list]:
    """Deterministic split: the last `frac` of windows by index are held out."""
    n_hold = max(1, int(len(data) * frac))
    return data[:-n_hold], data[-n_hold:]


def make_synth_spec(kv: dict) -> SynthSpec:
    """Build a mixture spec from config keys: n_modes equally weighted modes
    with seeded random mean directions of norm mode_radius."""
    dim = int(kv.get("latent_dim", 16))
    n_modes = int(kv.get("n_modes", 8))
    scale = float(kv.get("mode_scale", 0.25))
    radius = float(kv.get("mode_radius", 4.0))
    t = int(kv.get("frames_per_window", 8))
    seed = int(kv.get("mode_seed", kv.get("seed", 0)))
    rng = np.random.default_rng([seed, n_modes])
    modes = []
    for _ in range(n_modes):
        direction = rng.standard_normal(dim)
        direction *= radius / np.linalg.norm(direction)
        modes.append((direction, scale, 1.0 / n_modes))
    return SynthSpec(modes, dim, t)


def train_from_config(
    kv: dict, data: list[np.ndarray], n_experts: int | None = None
) -> tuple[RevqModel, "TrainConfig"]:
    """Initialize from the data and run the configured training."""
    cfg = TrainConfig.from_mapping(kv)
    init = build_initial_model(
        data,
        n_experts=n_experts if n_experts is not None else int(kv.get("n_experts", 8)),
        k_shared=int(kv.get("k_shared", 16)),
        k_expert=int(kv.get("k_expert", 16)),
        seed=cfg.seed,
    )
    model, _ = train(cfg, data, init)
    return model, cfg


def exp_adaptive(
    m: RevqModel, dataset: list[np.ndarray], k_r: int
) -> tuple[dict, list[dict]]:
    """Per-window MSE under fixed-first-k_r experts, the exhaustive oracle
    subset, and the learned routing.  The oracle never loses: it enumerates
    every subset including the fixed prefix and the routed choice."""
    fixed_mask = RoutingMask(tuple(range(1, k_r + 1)))
    rows = []
    for w, fb in enumerate(dataset):
        qw_fixed = cascade_with_mask(fb, m, fixed_mask)
        fixed = window_mse(fb, _reconstruct(qw_fixed, m))
        _, oracle = oracle_select(fb, m, k_r)
        _, recon = revq_quantize(fb, m, k_r)
        routed = window_mse(fb, recon)
        rows.append(
            {"window": w, "fixed_mse": fixed, "oracle_mse": oracle, "routed_mse": routed}
        )
    fixed = float(np.mean([r["fixed_mse"] for r in rows]))
    oracle = float(np.mean([r["oracle_mse"] for r in rows]))
    routed = float(np.mean([r["routed_mse"] for r in rows]))
    gap = fixed - oracle
    summary = {
        "fixed_mse": fixed,
        "oracle_mse": oracle,
        "routed_mse": routed,
        "improvement_pct": 100.0 * gap / fixed if fixed > 0 else 0.0,
        "routed_improvement_pct": 100.0 * (fixed - routed) / fixed if fixed > 0 else 0.0,
        "routed_recovery_pct": 100.0 * (fixed - routed) / gap if gap > 0 else 0.0,
    }
    return summary, rows


def selection_usage(m: RevqModel, dataset: list[np.ndarray], k_r: int) -> float:
    """Fraction of the expert pool selected at least once over a dataset."""
    seen = np.zeros(m.n_experts, dtype=bool)
    for fb in dataset:
        qw, _ = revq_quantize(fb, m, k_r)
        for i in qw.mask.selected:
            seen[i - 1] = True
    return float(seen.sum() / m.n_experts)


def exp_utilization(
    n_r_values: list[int],
    k_r: int,
    kv: dict,
    data: list[np.ndarray],
) -> list[dict]:
    """Train one model per pool size on identical data and seeds; report
    held-out MSE and the fraction of experts actually selected."""
    train_data, holdout = split_holdout(data)
    rows = []
    for n_r in n_r_values:
        model, _ = train_from_config(kv, train_data, n_experts=n_r)
        mses = []
        for fb in holdout:
            _, recon = revq_quantize(fb, model, k_r)
            mses.append(window_mse(fb, recon))
        rows.append(
            {
                "n_experts": n_r,
                "mse": float(np.mean(mses)),
                "usage_pct": 100.0 * selection_usage(model, holdout, k_r),
            }
        )
    return rows


def exp_vbr(
    m: RevqModel,
    dataset: list[np.ndarray],
    sample_rate: int,
    block_size: int,
) -> list[dict]:
    """Sweep k_r over a frozen model: rate from the actual packed stream,
    distortion over the latent windows."""
    t = dataset[0].shape[0]
    rows = []
    for k_r in range(m.n_experts + 1):
        quantized = []
        sig_power = 0.0
        err_power = 0.0
        mses = []
        for fb in dataset:
            qw, recon = revq_quantize(fb, m, k_r)
            quantized.append(qw)
            mses.append(window_mse(fb, recon))
            sig_power += float(np.sum(np.asarray(fb) ** 2))
            err_power += float(np.sum((np.asarray(fb) - recon) ** 2))
        header = StreamHeader(
            sample_rate=sample_rate,
            block_size=block_size,
            frames_per_window=t,
            dim=m.dim,
            n_experts=m.n_experts,
            k_shared=m.shared.size,
            k_expert=m.experts[0].size if m.experts else 1,
            n_windows=len(quantized),
        )
        stream = pack_stream(header, quantized)
        report = bitrate_report(header, unpack_stream(stream)[1])
        snr = 10.0 * np.log10(sig_power / err_power) if err_power > 0 else np.inf
        rows.append(
            {
                "k_r": k_r,
                "total_bps": report["total_bps"],
                "mask_bps": report["mask_bps"],
                "codes_bps": report["codes_bps"],
                "mse": float(np.mean(mses)),
                "snr_db": float(snr),
            }
        )
    return rows


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        for row in rows:
            w.writerow(row)
