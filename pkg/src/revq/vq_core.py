"""Single-codebook vector quantization.

Nearest-neighbor assignment under squared Euclidean distance, k-means++
initialization, EMA codebook updates, and dead-code refresh.  All operations
are pure: they return new arrays / new ``Codebook`` instances and are
deterministic given their inputs and seeds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

EMA_EPS = 1e-5

__all__ = [
    "EMA_EPS",
    "Codebook",
    "nearest_code",
    "quantize_frames",
    "kmeans_init",
    "ema_update",
    "dead_code_refresh",
    "codebook_to_bytes",
    "codebook_from_bytes",
]


@dataclass
class Codebook:
    """K learned D-dimensional codewords plus EMA statistics.

    ``ema_counts`` carries the soft usage mass per codeword, ``ema_sums`` the
    running numerators (so ``codewords[i] == ema_sums[i] / max(ema_counts[i],
    EMA_EPS)`` after any EMA update), and ``usage`` counts hard assignments
    since the last dead-code refresh.
    """

    codewords: np.ndarray
    ema_counts: np.ndarray
    ema_sums: np.ndarray
    usage: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.codewords = np.asarray(self.codewords, dtype=np.float64)
        self.ema_counts = np.asarray(self.ema_counts, dtype=np.float64)
        self.ema_sums = np.asarray(self.ema_sums, dtype=np.float64)
        if self.codewords.ndim != 2:
            raise ValueError("codewords must be a K x D matrix")
        k, d = self.codewords.shape
        if k < 2 or d < 1:
            raise ValueError(f"need K >= 2 and D >= 1, got K={k}, D={d}")
        if self.usage is None:
            self.usage = np.zeros(k, dtype=np.int64)
        else:
            self.usage = np.asarray(self.usage, dtype=np.int64)
        if self.ema_counts.shape != (k,) or self.ema_sums.shape != (k, d):
            raise ValueError("EMA statistic shapes do not match codewords")
        if self.usage.shape != (k,):
            raise ValueError("usage shape does not match codebook size")
        if not np.all(np.isfinite(self.codewords)):
            raise ValueError("codewords contain non-finite entries")
        if np.any(self.ema_counts < 0):
            raise ValueError("ema_counts must be nonnegative")

    @property
    def size(self) -> int:
        return self.codewords.shape[0]

    @property
    def dim(self) -> int:
        return self.codewords.shape[1]

    def copy(self) -> "Codebook":
        return Codebook(
            self.codewords.copy(),
            self.ema_counts.copy(),
            self.ema_sums.copy(),
            self.usage.copy(),
        )

    @staticmethod
    def from_codewords(codewords: np.ndarray) -> "Codebook":
        """Fresh codebook: unit EMA mass, sums equal to the codewords."""
        codewords = np.asarray(codewords, dtype=np.float64)
        return Codebook(
            codewords.copy(),
            np.ones(codewords.shape[0]),
            codewords.copy(),
            np.zeros(codewords.shape[0], dtype=np.int64),
        )


def _check_frames(frames: np.ndarray, dim: int | None = None) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError("frames must be a T x D matrix with T >= 1")
    if not np.all(np.isfinite(frames)):
        raise ValueError("frames contain non-finite entries")
    if dim is not None and frames.shape[1] != dim:
        raise ValueError(
            f"frame dimension {frames.shape[1]} does not match codebook dimension {dim}"
        )
    return frames


def nearest_code(v: np.ndarray, cb: Codebook) -> tuple[int, np.ndarray, np.ndarray]:
    """Assign one vector to its nearest codeword (squared Euclidean).

    Ties break toward the lowest index.  Returns ``(index, codeword,
    residual)`` with ``residual = v - codeword``.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (cb.dim,):
        raise ValueError(f"expected a vector of dimension {cb.dim}, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValueError("input vector contains non-finite entries")
    d2 = np.sum((v - cb.codewords) ** 2, axis=1)
    idx = int(np.argmin(d2))  # argmin returns the first minimum: lowest index wins
    codeword = cb.codewords[idx].copy()
    return idx, codeword, v - codeword


# Row chunk for the batched distance scan; bounds the T x K x D temporary.
_CHUNK = 256


def quantize_frames(fb: np.ndarray, cb: Codebook) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise nearest-codeword assignment of a T x D frame batch.

    Uses the same distance arithmetic as ``nearest_code`` so batched and
    per-row assignment agree exactly.  Returns ``(codes, residuals)``.
    """
    fb = _check_frames(fb, cb.dim)
    t = fb.shape[0]
    codes = np.empty(t, dtype=np.int64)
    for lo in range(0, t, _CHUNK):
        hi = min(lo + _CHUNK, t)
        diff = fb[lo:hi, None, :] - cb.codewords[None, :, :]
        d2 = np.sum(diff * diff, axis=2)
        codes[lo:hi] = np.argmin(d2, axis=1)
    residuals = fb - cb.codewords[codes]
    return codes, residuals


def kmeans_init(samples: np.ndarray, k: int, iters: int, seed) -> Codebook:
    """Build a codebook by k-means++ seeding plus ``iters`` Lloyd iterations.

    Deterministic given ``seed``.  Empty clusters keep their previous center.
    Requires at least K samples.
    """
    samples = _check_frames(samples)
    m = samples.shape[0]
    if m < k:
        raise ValueError(f"need at least K={k} samples, got {m}")
    rng = np.random.default_rng(seed)

    centers = np.empty((k, samples.shape[1]), dtype=np.float64)
    centers[0] = samples[rng.integers(m)]
    d2 = np.sum((samples - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # all remaining mass is on already-chosen points; pick any unused sample
            centers[i] = samples[rng.integers(m)]
        else:
            centers[i] = samples[rng.choice(m, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((samples - centers[i]) ** 2, axis=1))

    cb = Codebook.from_codewords(centers)
    for _ in range(iters):
        codes, _ = quantize_frames(samples, cb)
        new_centers = cb.codewords.copy()
        for i in range(k):
            mask = codes == i
            if np.any(mask):
                new_centers[i] = samples[mask].mean(axis=0)
        cb = Codebook.from_codewords(new_centers)
    return cb


def ema_update(
    cb: Codebook, fb: np.ndarray, codes: np.ndarray, decay: float
) -> Codebook:
    """One exponential-moving-average codebook update.

    ``counts <- decay * counts + (1 - decay) * n_i`` and likewise for the
    per-code frame sums; every codeword is then renormalized to
    ``sums / max(counts, EMA_EPS)``.  Hard ``usage`` counters accumulate n_i.
    """
    if not (0.0 < decay < 1.0):
        raise ValueError(f"decay must lie in (0, 1), got {decay}")
    fb = _check_frames(fb, cb.dim)
    codes = np.asarray(codes, dtype=np.int64)
    if codes.shape != (fb.shape[0],):
        raise ValueError("codes must assign exactly one code per frame")
    if np.any(codes < 0) or np.any(codes >= cb.size):
        raise ValueError("code index out of range")

    k = cb.size
    n = np.bincount(codes, minlength=k).astype(np.float64)
    sums = np.zeros_like(cb.ema_sums)
    np.add.at(sums, codes, fb)

    new_counts = decay * cb.ema_counts + (1.0 - decay) * n
    new_sums = decay * cb.ema_sums + (1.0 - decay) * sums
    new_codewords = new_sums / np.maximum(new_counts, EMA_EPS)[:, None]
    new_usage = cb.usage + n.astype(np.int64)
    return Codebook(new_codewords, new_counts, new_sums, new_usage)


def dead_code_refresh(cb: Codebook, fb: np.ndarray, min_usage: int, seed) -> Codebook:
    """Replace under-used codewords with frames sampled from the batch.

    Every codeword with ``usage < min_usage`` since the last refresh is reset
    to a seeded random frame of ``fb`` (with unit EMA mass); all usage
    counters restart from zero.
    """
    fb = _check_frames(fb, cb.dim)
    rng = np.random.default_rng(seed)
    new = cb.copy()
    dead = np.flatnonzero(cb.usage < min_usage)
    for i in dead:
        frame = fb[rng.integers(fb.shape[0])]
        new.codewords[i] = frame
        new.ema_counts[i] = 1.0
        new.ema_sums[i] = frame
    new.usage[:] = 0
    return new


def codebook_to_bytes(cb: Codebook) -> bytes:
    """Little-endian binary form: u32 K, u32 D, K x D f32 codewords,
    K f32 ema_counts, K x D f32 ema_sums.  Hard usage counters are transient
    and not serialized."""
    out = bytearray()
    out += struct.pack("<II", cb.size, cb.dim)
    out += cb.codewords.astype("<f4").tobytes()
    out += cb.ema_counts.astype("<f4").tobytes()
    out += cb.ema_sums.astype("<f4").tobytes()
    return bytes(out)


def codebook_from_bytes(data: bytes, offset: int = 0) -> tuple[Codebook, int]:
    """Inverse of ``codebook_to_bytes``; returns the codebook and the offset
    one past its encoding."""
    if len(data) - offset < 8:
        raise ValueError("truncated codebook header")
    k, d = struct.unpack_from("<II", data, offset)
    offset += 8
    need = 4 * (k * d + k + k * d)
    if len(data) - offset < need:
        raise ValueError("truncated codebook payload")
    codewords = np.frombuffer(data, dtype="<f4", count=k * d, offset=offset)
    offset += 4 * k * d
    counts = np.frombuffer(data, dtype="<f4", count=k, offset=offset)
    offset += 4 * k
    sums = np.frombuffer(data, dtype="<f4", count=k * d, offset=offset)
    offset += 4 * k * d
    cb = Codebook(
        codewords.reshape(k, d).astype(np.float64),
        counts.astype(np.float64),
        sums.reshape(k, d).astype(np.float64),
        np.zeros(k, dtype=np.int64),
    )
    return cb, offset
