"""Bit-exact stream serialization.

Wire layout (little-endian header, then MSB-first packed window payloads):

* header: magic "RVQ1", u16 version, u32 sample_rate, u32 block_size,
  u32 frames_per_window (T), u32 D, u32 N_r, u32 K_shared, u32 K_expert,
  u32 n_windows, u32 tail_pad (zero samples appended by the encoder).
* per window: 4-bit k_r, then the routing mask as its lexicographic
  combinatorial rank in ceil(log2 C(N_r, k_r)) bits, then T shared codes of
  ceil(log2 K_shared) bits each, then k_r x T expert codes of
  ceil(log2 K_expert) bits each (rows in ascending expert order).  Each
  window is zero-padded to a byte boundary.

See FORMAT.md for the byte-for-byte description and a golden vector.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from math import comb
from typing import NamedTuple

import numpy as np

from .engine import QuantizedWindow, RoutingMask

STREAM_MAGIC = b"RVQ1"
STREAM_VERSION = 1
KR_FIELD_BITS = 4  # per-window k_r field; supports at most 15 active experts
HEADER_SIZE = 42

__all__ = [
    "StreamError",
    "StreamHeader",
    "WindowPacket",
    "BitWriter",
    "BitReader",
    "subset_rank",
    "subset_unrank",
    "mask_bits",
    "code_bits",
    "MaskOverhead",
    "overhead_bps",
    "pack_stream",
    "unpack_stream",
    "bitrate_report",
]


class StreamError(ValueError):
    """Malformed, inconsistent, or corrupted stream data."""


# --- combinatorial number system ---------------------------------------------


def _check_subset(selected, n: int) -> tuple[int, ...]:
    sel = tuple(int(i) for i in selected)
    if list(sel) != sorted(set(sel)):
        raise ValueError("subset must be strictly ascending without duplicates")
    if sel and (sel[0] < 1 or sel[-1] > n):
        raise ValueError(f"subset elements must lie in [1, {n}]")
    return sel


def subset_rank(selected, n: int) -> int:
    """Lexicographic rank of an ascending k-subset of {1..n}, in [0, C(n,k))."""
    sel = _check_subset(selected, n)
    k = len(sel)
    rank = 0
    prev = 0
    for i, c in enumerate(sel):
        for j in range(prev + 1, c):
            rank += comb(n - j, k - i - 1)
        prev = c
    return rank


def subset_unrank(rank: int, n: int, k: int) -> tuple[int, ...]:
    """Inverse of ``subset_rank``: the ascending k-subset with the given rank."""
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, {n}], got {k}")
    if not 0 <= rank < comb(n, k):
        raise ValueError(f"rank {rank} out of range [0, C({n},{k}))")
    out = []
    c = 0
    for i in range(k):
        c += 1
        while rank >= comb(n - c, k - i - 1):
            rank -= comb(n - c, k - i - 1)
            c += 1
        out.append(c)
    return tuple(out)


def mask_bits(n: int, k: int) -> int:
    """ceil(log2 C(n, k)) bits to index one k-subset of {1..n}; 0 when C = 1."""
    if not 0 <= k <= n:
        raise ValueError(f"k must lie in [0, {n}], got {k}")
    return (comb(n, k) - 1).bit_length()


def code_bits(k: int) -> int:
    """ceil(log2 k) bits per code index of a size-k codebook."""
    if k < 1:
        raise ValueError("codebook size must be positive")
    return (k - 1).bit_length()


class MaskOverhead(NamedTuple):
    ceiled_bps: float  # what the wire actually spends
    exact_bps: float  # the non-ceiled log2 C(n,k) / W figure, for reporting


def overhead_bps(n: int, k: int, window_seconds: float) -> MaskOverhead:
    """Routing-mask side-information rate for one window length.

    Returns both the ceiled wire cost mask_bits(n,k)/W and the non-ceiled
    log2(C(n,k))/W reporting figure.
    """
    if window_seconds <= 0:
        raise ValueError("window_seconds must be positive")
    exact = math.log2(comb(n, k)) / window_seconds
    return MaskOverhead(mask_bits(n, k) / window_seconds, exact)


# --- MSB-first bit packing ----------------------------------------------------


class BitWriter:
    """Accumulates values MSB-first into a byte buffer."""

    def __init__(self):
        self._bytes = bytearray()
        self._acc = 0
        self._nbits = 0

    @property
    def bit_position(self) -> int:
        return 8 * len(self._bytes) + self._nbits

    def write(self, value: int, nbits: int) -> None:
        if nbits < 0:
            raise ValueError("invalid field width")
        if not 0 <= value < (1 << nbits):
            raise ValueError(f"value {value} does not fit in {nbits} bits")
        self._acc = (self._acc << nbits) | value
        self._nbits += nbits
        while self._nbits >= 8:
            self._nbits -= 8
            self._bytes.append((self._acc >> self._nbits) & 0xFF)
        self._acc &= (1 << self._nbits) - 1

    def align(self) -> None:
        """Zero-pad to the next byte boundary."""
        if self._nbits:
            self.write(0, 8 - self._nbits)

    def getvalue(self) -> bytes:
        if self._nbits:
            raise ValueError("unaligned writer; call align() first")
        return bytes(self._bytes)


class BitReader:
    """Reads MSB-first fields from a byte buffer."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0  # bit cursor

    @property
    def bit_position(self) -> int:
        return self._pos

    @property
    def bits_left(self) -> int:
        return 8 * len(self._data) - self._pos

    def read(self, nbits: int) -> int:
        if nbits > self.bits_left:
            raise StreamError("truncated stream payload")
        value = 0
        pos = self._pos
        for _ in range(nbits):
            byte = self._data[pos >> 3]
            value = (value << 1) | ((byte >> (7 - (pos & 7))) & 1)
            pos += 1
        self._pos = pos
        return value

    def align(self) -> None:
        """Skip to the next byte boundary; padding bits must be zero."""
        rem = (-self._pos) % 8
        if rem and self.read(rem) != 0:
            raise StreamError("nonzero padding bits")


# --- stream header and packets -------------------------------------------------


@dataclass
class StreamHeader:
    sample_rate: int
    block_size: int
    frames_per_window: int
    dim: int
    n_experts: int
    k_shared: int
    k_expert: int
    n_windows: int
    tail_pad: int = 0
    version: int = STREAM_VERSION

    def __post_init__(self):
        if self.block_size < 1 or self.frames_per_window < 1:
            raise ValueError("block_size and frames_per_window must be >= 1")
        for name in ("sample_rate", "dim", "n_experts", "k_shared", "k_expert"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_windows < 0 or self.tail_pad < 0:
            raise ValueError("n_windows and tail_pad must be nonnegative")

    @property
    def window_seconds(self) -> float:
        return self.frames_per_window * self.block_size / self.sample_rate

    @property
    def duration_seconds(self) -> float:
        return self.n_windows * self.window_seconds

    def to_bytes(self) -> bytes:
        return STREAM_MAGIC + struct.pack(
            "<HIIIIIIIII",
            self.version,
            self.sample_rate,
            self.block_size,
            self.frames_per_window,
            self.dim,
            self.n_experts,
            self.k_shared,
            self.k_expert,
            self.n_windows,
            self.tail_pad,
        )

    @staticmethod
    def from_bytes(data: bytes) -> "StreamHeader":
        if len(data) < 4 or data[:4] != STREAM_MAGIC:
            raise StreamError("bad stream magic")
        if len(data) < HEADER_SIZE:
            raise StreamError("truncated stream header")
        fields = struct.unpack_from("<HIIIIIIIII", data, 4)
        version = fields[0]
        if version != STREAM_VERSION:
            raise StreamError(f"unsupported stream version {version}")
        try:
            return StreamHeader(*fields[1:], version=version)
        except ValueError as exc:
            raise StreamError(f"invalid stream header: {exc}") from exc


@dataclass
class WindowPacket:
    """Decoded per-window fields: the 4-bit k_r, the mask's combinatorial
    rank, and the fixed-width code indices."""

    k_r: int
    mask_rank: int
    shared_codes: np.ndarray
    expert_codes: np.ndarray  # k_r x T

    def to_window(self, n_experts: int) -> QuantizedWindow:
        mask = RoutingMask(subset_unrank(self.mask_rank, n_experts, self.k_r))
        return QuantizedWindow(mask, self.shared_codes, self.expert_codes)

    @staticmethod
    def from_window(qw: QuantizedWindow, n_experts: int) -> "WindowPacket":
        return WindowPacket(
            qw.mask.k,
            subset_rank(qw.mask.selected, n_experts),
            qw.shared_codes,
            qw.expert_codes,
        )


def _check_window(h: StreamHeader, qw: QuantizedWindow) -> None:
    if qw.n_frames != h.frames_per_window:
        raise StreamError("window frame count disagrees with the header")
    if qw.mask.k > (1 << KR_FIELD_BITS) - 1:
        raise StreamError(f"k_r={qw.mask.k} does not fit the 4-bit field")
    if qw.mask.selected and qw.mask.selected[-1] > h.n_experts:
        raise StreamError("mask selects an expert beyond the header pool")
    if np.any(qw.shared_codes < 0) or np.any(qw.shared_codes >= h.k_shared):
        raise StreamError("shared code index out of range for the header")
    if qw.expert_codes.size and (
        np.any(qw.expert_codes < 0) or np.any(qw.expert_codes >= h.k_expert)
    ):
        raise StreamError("expert code index out of range for the header")


def _write_window(bw: BitWriter, h: StreamHeader, qw: QuantizedWindow) -> dict:
    """Pack one window; returns the measured bit span of each field group."""
    _check_window(h, qw)
    pkt = WindowPacket.from_window(qw, h.n_experts)
    sbits = code_bits(h.k_shared)
    ebits = code_bits(h.k_expert)

    start = bw.bit_position
    bw.write(pkt.k_r, KR_FIELD_BITS)
    bw.write(pkt.mask_rank, mask_bits(h.n_experts, pkt.k_r))
    after_mask = bw.bit_position
    for c in pkt.shared_codes:
        bw.write(int(c), sbits)
    for row in pkt.expert_codes:
        for c in row:
            bw.write(int(c), ebits)
    after_codes = bw.bit_position
    bw.align()
    end = bw.bit_position
    return {
        "mask_field_bits": after_mask - start,  # 4-bit k_r + rank
        "code_bits": after_codes - after_mask,
        "pad_bits": end - after_codes,
    }


def pack_stream(h: StreamHeader, windows: list[QuantizedWindow]) -> bytes:
    """Serialize a header and its windows; deterministic, byte-aligned per
    window."""
    if len(windows) != h.n_windows:
        raise StreamError(
            f"header declares {h.n_windows} windows, got {len(windows)}"
        )
    bw = BitWriter()
    for qw in windows:
        _write_window(bw, h, qw)
    return h.to_bytes() + bw.getvalue()


def unpack_stream(data: bytes) -> tuple[StreamHeader, list[QuantizedWindow]]:
    """Exact inverse of ``pack_stream``.  Every malformation is rejected with
    a ``StreamError`` diagnostic; no input crashes the parser."""
    h = StreamHeader.from_bytes(data)
    br = BitReader(data[HEADER_SIZE:])
    sbits = code_bits(h.k_shared)
    ebits = code_bits(h.k_expert)
    t = h.frames_per_window
    windows = []
    for w in range(h.n_windows):
        k_r = br.read(KR_FIELD_BITS)
        if k_r > h.n_experts:
            raise StreamError(f"window {w}: k_r={k_r} exceeds the expert pool")
        rank = br.read(mask_bits(h.n_experts, k_r))
        if rank >= comb(h.n_experts, k_r):
            raise StreamError(f"window {w}: mask rank {rank} out of range")
        shared = np.empty(t, dtype=np.int64)
        for i in range(t):
            shared[i] = br.read(sbits)
            if shared[i] >= h.k_shared:
                raise StreamError(f"window {w}: shared code out of range")
        expert = np.empty((k_r, t), dtype=np.int64)
        for row in range(k_r):
            for i in range(t):
                expert[row, i] = br.read(ebits)
                if expert[row, i] >= h.k_expert:
                    raise StreamError(f"window {w}: expert code out of range")
        br.align()
        windows.append(WindowPacket(k_r, rank, shared, expert).to_window(h.n_experts))
    if br.bits_left:
        raise StreamError("trailing data after the last window")
    return h, windows


def bitrate_report(h: StreamHeader, windows: list[QuantizedWindow]) -> dict:
    """Bit accounting over a stream, in bits per second of coded audio.

    Field sizes are measured from the packer's bit cursor, not inferred.
    Window byte-alignment padding is counted separately and included in the
    total.
    """
    if h.n_windows == 0 or len(windows) != h.n_windows:
        raise StreamError("bitrate report needs a nonempty, consistent stream")
    duration = h.duration_seconds
    if duration <= 0:
        raise StreamError("stream duration must be positive")
    mask_total = 0
    code_total = 0
    pad_total = 0
    bw = BitWriter()
    for qw in windows:
        spans = _write_window(bw, h, qw)
        mask_total += spans["mask_field_bits"]
        code_total += spans["code_bits"]
        pad_total += spans["pad_bits"]
    header_bits = 8 * HEADER_SIZE
    total = code_total + mask_total + pad_total + header_bits
    return {
        "codes_bps": code_total / duration,
        "mask_bps": mask_total / duration,
        "padding_bps": pad_total / duration,
        "header_amortized_bps": header_bits / duration,
        "total_bps": total / duration,
    }
