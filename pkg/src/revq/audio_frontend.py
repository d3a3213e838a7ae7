"""Deterministic, invertible audio-to-latent transform.

PCM-16 mono WAV in and out, non-overlapping blocks, and an orthonormal DCT-II
per block.  The front-end alone round-trips to within DCT rounding, so every
bit of coding loss downstream is attributable to quantization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import scipy.fft

__all__ = [
    "WavError",
    "PcmSignal",
    "read_wav",
    "write_wav",
    "dct_forward",
    "dct_inverse",
    "signal_to_windows",
    "windows_to_signal",
]

PCM_SCALE = 32768.0


class WavError(ValueError):
    """Unsupported or malformed WAV data."""


@dataclass
class PcmSignal:
    samples: np.ndarray  # floats in [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("samples must be a 1-D sequence")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    @property
    def duration_seconds(self) -> float:
        return self.samples.shape[0] / self.sample_rate


def read_wav(data: bytes) -> PcmSignal:
    """Parse a RIFF/WAVE file: PCM, 16-bit, mono only.

    Samples are scaled to [-1, 1] by 1/32768.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    pcm = None
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + chunk_size]
        if len(body) < chunk_size:
            raise WavError(f"truncated '{chunk_id.decode('latin1')}' chunk")
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise WavError("fmt chunk too short")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            pcm = body
        pos += 8 + chunk_size + (chunk_size & 1)  # chunks are word-aligned
    if fmt is None:
        raise WavError("missing fmt chunk")
    if pcm is None:
        raise WavError("missing data chunk")
    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise WavError(f"unsupported audio format {audio_format}; PCM only")
    if channels != 1:
        raise WavError(f"unsupported channel count {channels}; mono only")
    if bits != 16:
        raise WavError(f"unsupported bit depth {bits}; 16-bit only")
    if len(pcm) % 2:
        raise WavError("data chunk has an odd byte count")
    samples = np.frombuffer(pcm, dtype="<i2").astype(np.float64) / PCM_SCALE
    return PcmSignal(samples, sample_rate)


def write_wav(sig: PcmSignal) -> bytes:
    """Inverse of ``read_wav``: round half away from zero, clamp to the
    16-bit grid."""
    x = sig.samples * PCM_SCALE
    q = np.where(x >= 0, np.floor(x + 0.5), np.ceil(x - 0.5))
    q = np.clip(q, -32768, 32767).astype("<i2")
    pcm = q.tobytes()
    byte_rate = sig.sample_rate * 2
    fmt = struct.pack("<HHIIHH", 1, 1, sig.sample_rate, byte_rate, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(pcm)) + pcm
    return b"RIFF" + struct.pack("<I", len(body)) + body


def dct_forward(block: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-II of one block."""
    block = np.asarray(block, dtype=np.float64)
    if block.ndim != 1 or block.shape[0] < 1:
        raise ValueError("block must be a nonempty 1-D array")
    return scipy.fft.dct(block, type=2, norm="ortho")


def dct_inverse(coeffs: np.ndarray) -> np.ndarray:
    """Orthonormal DCT-III: exact inverse of ``dct_forward``."""
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim != 1 or coeffs.shape[0] < 1:
        raise ValueError("coeffs must be a nonempty 1-D array")
    return scipy.fft.idct(coeffs, type=2, norm="ortho")


def signal_to_windows(
    sig: PcmSignal, block_size: int, frames_per_window: int
) -> tuple[list[np.ndarray], int]:
    """Zero-pad, split into blocks, DCT each, group T frames per window.

    Returns the window list and the number of padding samples appended, which
    ``windows_to_signal`` strips for exact-length inversion.
    """
    if block_size < 1 or frames_per_window < 1:
        raise ValueError("block_size and frames_per_window must be >= 1")
    n = sig.samples.shape[0]
    if n == 0:
        return [], 0
    span = block_size * frames_per_window
    pad = (-n) % span
    x = np.concatenate([sig.samples, np.zeros(pad)]) if pad else sig.samples
    blocks = x.reshape(-1, block_size)
    frames = scipy.fft.dct(blocks, type=2, norm="ortho", axis=1)
    windows = [
        frames[w : w + frames_per_window]
        for w in range(0, frames.shape[0], frames_per_window)
    ]
    return windows, pad


def windows_to_signal(
    windows: list[np.ndarray], sample_rate: int, tail_pad: int = 0
) -> PcmSignal:
    """Inverse DCT per frame, concatenate blocks, strip the recorded tail
    padding."""
    if not windows:
        return PcmSignal(np.zeros(0), sample_rate)
    frames = np.concatenate([np.asarray(w, dtype=np.float64) for w in windows])
    blocks = scipy.fft.idct(frames, type=2, norm="ortho", axis=1)
    samples = blocks.reshape(-1)
    if tail_pad:
        if tail_pad >= samples.shape[0] + 1:
            raise ValueError("tail padding exceeds the decoded length")
        samples = samples[: samples.shape[0] - tail_pad]
    return PcmSignal(samples, sample_rate)
