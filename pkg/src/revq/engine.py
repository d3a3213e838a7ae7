"""Dual-path residual-experts quantization.

A shared codebook quantizes every window; a bias-free linear router scores a
pool of expert codebooks, the top-k_r scores select which experts run, and
the selected experts then refine the running residual strictly in ascending
index order.  Scores decide WHICH experts participate, never the order: the
cascade sequence is always the sorted selected set.

Expert indices are 1-based throughout (expert ``i`` lives at
``model.experts[i - 1]``), matching the routing-mask wire format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from math import comb

import numpy as np

from .vq_core import (
    Codebook,
    _check_frames,
    codebook_from_bytes,
    codebook_to_bytes,
    quantize_frames,
)

MODEL_MAGIC = b"REVQ"
MODEL_VERSION = 1
ORACLE_SUBSET_LIMIT = 100_000

__all__ = [
    "Router",
    "RevqModel",
    "RoutingMask",
    "QuantizedWindow",
    "affinity_scores",
    "topk_mask",
    "ste_mask_backward",
    "revq_quantize",
    "revq_dequantize",
    "oracle_select",
    "cascade_with_mask",
    "expert_contributions",
    "pin_zero_codeword",
    "model_to_bytes",
    "model_from_bytes",
    "save_model",
    "load_model",
]


@dataclass
class Router:
    """Bias-free affinity weights, one row per expert."""

    weights: np.ndarray  # N_r x D

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("router weights must be an N_r x D matrix")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("router weights contain non-finite entries")

    @property
    def n_experts(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class RevqModel:
    """One shared codebook, an ordered expert pool, and the router.

    The expert list order is immutable: it defines the cascade application
    order regardless of routing scores.
    """

    shared: Codebook
    experts: list[Codebook]
    router: Router
    dim: int

    def __post_init__(self):
        if self.shared.dim != self.dim:
            raise ValueError("shared codebook dimension mismatch")
        for i, e in enumerate(self.experts):
            if e.dim != self.dim:
                raise ValueError(f"expert {i + 1} dimension mismatch")
        if self.router.dim != self.dim or self.router.n_experts != len(self.experts):
            raise ValueError("router shape does not match the expert pool")

    @property
    def n_experts(self) -> int:
        return len(self.experts)


@dataclass
class RoutingMask:
    """Sorted ascending list of selected expert indices (1-based)."""

    selected: tuple[int, ...]

    def __post_init__(self):
        self.selected = tuple(int(i) for i in self.selected)
        if list(self.selected) != sorted(set(self.selected)):
            raise ValueError("mask indices must be strictly ascending and distinct")
        if self.selected and self.selected[0] < 1:
            raise ValueError("expert indices are 1-based")

    @property
    def k(self) -> int:
        return len(self.selected)

    def as_binary(self, n_experts: int) -> np.ndarray:
        if self.selected and self.selected[-1] > n_experts:
            raise ValueError("mask selects an expert beyond the pool")
        vec = np.zeros(n_experts, dtype=np.int64)
        for i in self.selected:
            vec[i - 1] = 1
        return vec


@dataclass
class QuantizedWindow:
    """Code indices for one window: shared codes for every frame plus one row
    of expert codes per selected expert, rows in ascending expert order."""

    mask: RoutingMask
    shared_codes: np.ndarray  # T int64
    expert_codes: np.ndarray  # k_r x T int64

    def __post_init__(self):
        self.shared_codes = np.asarray(self.shared_codes, dtype=np.int64)
        self.expert_codes = np.asarray(self.expert_codes, dtype=np.int64)
        if self.shared_codes.ndim != 1:
            raise ValueError("shared_codes must be a length-T vector")
        t = self.shared_codes.shape[0]
        if self.expert_codes.size == 0:
            self.expert_codes = self.expert_codes.reshape(self.mask.k, t if self.mask.k else 0)
        if self.expert_codes.shape[0] != self.mask.k:
            raise ValueError("expert_codes rows must correspond 1:1 with the mask")
        if self.mask.k and self.expert_codes.shape[1] != t:
            raise ValueError("expert_codes must cover all T frames")

    @property
    def n_frames(self) -> int:
        return self.shared_codes.shape[0]


def affinity_scores(fb: np.ndarray, router: Router) -> np.ndarray:
    """Per-expert affinity: the router applied to the time-mean frame.

    Equals (1/T) sum_t of the per-frame scores, by linearity.
    """
    fb = _check_frames(fb, router.dim)
    return router.weights @ fb.mean(axis=0)


def topk_mask(scores: np.ndarray, k_r: int) -> RoutingMask:
    """Select the k_r largest scores; ties break toward the lowest index.

    The result is sorted ascending regardless of score order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError("scores must be a vector")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores contain non-finite entries")
    n = scores.shape[0]
    if not 0 <= k_r <= n:
        raise ValueError(f"k_r must lie in [0, {n}], got {k_r}")
    # stable sort on negated scores: equal scores keep ascending index order
    order = np.argsort(-scores, kind="stable")
    chosen = np.sort(order[:k_r])
    return RoutingMask(tuple(int(i) + 1 for i in chosen))


def ste_mask_backward(upstream_grad_wrt_mask: np.ndarray) -> np.ndarray:
    """Straight-through backward for the hard selection mask.

    The forward value is the hard 0/1 mask; the backward pass treats it as the
    raw scores plus a stopped-gradient correction, so the gradient with
    respect to the scores is the upstream mask gradient, unchanged.
    """
    g = np.asarray(upstream_grad_wrt_mask, dtype=np.float64)
    return g.copy()


def cascade_with_mask(
    fb: np.ndarray, m: RevqModel, mask: RoutingMask
) -> QuantizedWindow:
    """Run the ordered cascade for an explicit expert selection.

    The shared codebook quantizes the window, then each selected expert (in
    ascending index order) quantizes the running residual.
    """
    fb = _check_frames(fb, m.dim)
    if mask.selected and mask.selected[-1] > m.n_experts:
        raise ValueError("mask selects an expert beyond the pool")
    shared_codes, residual = quantize_frames(fb, m.shared)
    rows = []
    for i in mask.selected:
        codes, residual = quantize_frames(residual, m.experts[i - 1])
        rows.append(codes)
    expert_codes = (
        np.stack(rows) if rows else np.empty((0, fb.shape[0]), dtype=np.int64)
    )
    return QuantizedWindow(mask, shared_codes, expert_codes)


def _reconstruct(qw: QuantizedWindow, m: RevqModel) -> np.ndarray:
    """Sum the shared codewords and each selected expert's codewords, in
    ascending expert order.  Both quantize and dequantize return exactly this
    arithmetic path, so their outputs are bit-identical."""
    recon = m.shared.codewords[qw.shared_codes].copy()
    for row, i in enumerate(qw.mask.selected):
        recon += m.experts[i - 1].codewords[qw.expert_codes[row]]
    return recon


def revq_quantize(
    fb: np.ndarray, m: RevqModel, k_r: int
) -> tuple[QuantizedWindow, np.ndarray]:
    """Quantize one window: shared stage, routed top-k_r selection, ordered
    expert cascade.  Returns the code window and its reconstruction."""
    if k_r > m.n_experts:
        raise ValueError(f"k_r={k_r} exceeds the expert pool size {m.n_experts}")
    scores = affinity_scores(fb, m.router)
    mask = topk_mask(scores, k_r)
    qw = cascade_with_mask(fb, m, mask)
    return qw, _reconstruct(qw, m)


def revq_dequantize(qw: QuantizedWindow, m: RevqModel) -> np.ndarray:
    """Rebuild a window from its codes: the exact inverse of the codes
    produced by ``revq_quantize``."""
    if qw.mask.selected and qw.mask.selected[-1] > m.n_experts:
        raise ValueError("window selects an expert beyond the pool")
    if np.any(qw.shared_codes < 0) or np.any(qw.shared_codes >= m.shared.size):
        raise ValueError("shared code index out of range")
    for row, i in enumerate(qw.mask.selected):
        codes = qw.expert_codes[row]
        if np.any(codes < 0) or np.any(codes >= m.experts[i - 1].size):
            raise ValueError(f"expert {i} code index out of range")
    return _reconstruct(qw, m)


def window_mse(fb: np.ndarray, recon: np.ndarray) -> float:
    """Mean squared error over all T x D entries of a window."""
    fb = np.asarray(fb, dtype=np.float64)
    return float(np.mean((fb - recon) ** 2))


def oracle_select(
    fb: np.ndarray, m: RevqModel, k_r: int
) -> tuple[RoutingMask, float]:
    """Exhaustively evaluate every k_r-subset through the ordered cascade and
    return the one with minimal reconstruction MSE.

    Ties resolve to the lexicographically smallest subset.  Guarded: refuses
    pools with more than ``ORACLE_SUBSET_LIMIT`` subsets.
    """
    from itertools import combinations

    n = m.n_experts
    if k_r > n:
        raise ValueError(f"k_r={k_r} exceeds the expert pool size {n}")
    if comb(n, k_r) > ORACLE_SUBSET_LIMIT:
        raise ValueError(
            f"C({n},{k_r}) = {comb(n, k_r)} subsets exceed the enumeration guard"
        )
    fb = _check_frames(fb, m.dim)
    best_mask = None
    best_err = np.inf
    for subset in combinations(range(1, n + 1), k_r):
        mask = RoutingMask(subset)
        qw = cascade_with_mask(fb, m, mask)
        err = window_mse(fb, _reconstruct(qw, m))
        if err < best_err:  # lex-first subset wins ties: iteration is lex order
            best_err = err
            best_mask = mask
    return best_mask, float(best_err)


def expert_contributions(qw: QuantizedWindow, m: RevqModel) -> dict[int, np.ndarray]:
    """Per selected expert, the T x D array of codewords it contributed."""
    out = {}
    for row, i in enumerate(qw.mask.selected):
        out[i] = m.experts[i - 1].codewords[qw.expert_codes[row]]
    return out


def pin_zero_codeword(cb: Codebook) -> Codebook:
    """Freeze codeword 0 to the zero vector (with zero EMA numerator).

    Every codebook in a model keeps one all-zeros codeword so that each
    cascade stage is non-expansive: a residual can always map to zero, so
    error after a stage never exceeds error before it.
    """
    new = cb.copy()
    new.codewords[0] = 0.0
    new.ema_sums[0] = 0.0
    new.ema_counts[0] = max(new.ema_counts[0], 1.0)
    return new


# --- model serialization -----------------------------------------------------
#
# Little-endian: magic "REVQ", u16 version, u32 D, u32 N_r, u32 K_shared,
# u32 K_expert, shared codebook, N_r expert codebooks (vq_core layout),
# then the N_r x D f32 router matrix.


def model_to_bytes(m: RevqModel) -> bytes:
    k_expert = m.experts[0].size if m.experts else 0
    for e in m.experts:
        if e.size != k_expert:
            raise ValueError("all expert codebooks must share one size")
    out = bytearray()
    out += MODEL_MAGIC
    out += struct.pack(
        "<HIIII", MODEL_VERSION, m.dim, m.n_experts, m.shared.size, k_expert
    )
    out += codebook_to_bytes(m.shared)
    for e in m.experts:
        out += codebook_to_bytes(e)
    out += m.router.weights.astype("<f4").tobytes()
    return bytes(out)


def model_from_bytes(data: bytes) -> RevqModel:
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise ValueError("bad model magic")
    if len(data) < 22:
        raise ValueError("truncated model header")
    version, dim, n_r, k_shared, k_expert = struct.unpack_from("<HIIII", data, 4)
    if version != MODEL_VERSION:
        raise ValueError(f"unsupported model version {version}")
    offset = 22
    shared, offset = codebook_from_bytes(data, offset)
    if shared.size != k_shared or shared.dim != dim:
        raise ValueError("shared codebook shape disagrees with the model header")
    experts = []
    for i in range(n_r):
        e, offset = codebook_from_bytes(data, offset)
        if e.size != k_expert or e.dim != dim:
            raise ValueError(f"expert {i + 1} shape disagrees with the model header")
        experts.append(e)
    need = 4 * n_r * dim
    if len(data) - offset < need:
        raise ValueError("truncated router matrix")
    weights = np.frombuffer(data, dtype="<f4", count=n_r * dim, offset=offset)
    offset += need
    if offset != len(data):
        raise ValueError("trailing bytes after model payload")
    return RevqModel(
        shared, experts, Router(weights.reshape(n_r, dim).astype(np.float64)), dim
    )


def save_model(m: RevqModel, path) -> None:
    with open(path, "wb") as f:
        f.write(model_to_bytes(m))


def load_model(path) -> RevqModel:
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
