"""Desk-scale model training.

Codebooks learn by EMA updates on the frames each stage actually sees; the
router learns by plain SGD on a manually composed gradient: the hard top-k
mask passes its upstream gradient straight through to the affinity scores,
and the scores are linear in the router weights with the window's mean frame
as their Jacobian.  Everything is deterministic given the config seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .engine import (
    RevqModel,
    Router,
    RoutingMask,
    affinity_scores,
    pin_zero_codeword,
    ste_mask_backward,
    topk_mask,
)
from .vq_core import (
    Codebook,
    _check_frames,
    dead_code_refresh,
    ema_update,
    kmeans_init,
    quantize_frames,
)

MIN_USAGE = 1  # dead-code threshold per refresh interval

__all__ = [
    "MIN_USAGE",
    "TrainConfig",
    "TrainHistory",
    "SynthSpec",
    "parse_kv_file",
    "synth_dataset",
    "router_gradient",
    "build_initial_model",
    "train_step",
    "train",
]


@dataclass
class TrainConfig:
    steps: int
    batch_windows: int
    frames_per_window: int
    decay: float = 0.99
    router_lr: float = 1e-2
    k_r_schedule: str = "uniform"
    seed: int = 0
    refresh_interval: int = 50

    def __post_init__(self):
        for name in ("steps", "batch_windows", "frames_per_window", "refresh_interval"):
            if getattr(self, name) < 1 and not (name == "steps" and self.steps == 0):
                raise ValueError(f"{name} must be positive")
        if not 0.0 < self.decay < 1.0:
            raise ValueError("decay must lie in (0, 1)")
        if self.router_lr < 0:
            raise ValueError("router_lr must be nonnegative")
        _parse_schedule(self.k_r_schedule)  # fail fast on bad specs

    @staticmethod
    def from_mapping(kv: dict) -> "TrainConfig":
        def get(name, cast, default):
            return cast(kv[name]) if name in kv else default

        return TrainConfig(
            steps=int(kv["steps"]),
            batch_windows=int(kv["batch_windows"]),
            frames_per_window=int(kv["frames_per_window"]),
            decay=get("decay", float, 0.99),
            router_lr=get("router_lr", float, 1e-2),
            k_r_schedule=get("k_r_schedule", str, "uniform"),
            seed=get("seed", int, 0),
            refresh_interval=get("refresh_interval", int, 50),
        )


def parse_kv_file(path) -> dict:
    """Plain-text key=value config; '#' starts a comment."""
    out = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _parse_schedule(spec: str):
    """Schedule spec: 'fixed:K', 'uniform:LO:HI', or bare 'uniform' for the
    default uniform draw over {1 .. N_r - 1}."""
    parts = spec.split(":")
    if parts[0] == "fixed" and len(parts) == 2:
        k = int(parts[1])
        if k < 0:
            raise ValueError("fixed schedule needs k >= 0")
        return lambda rng, n_experts: k
    if parts[0] == "uniform" and len(parts) == 1:
        return lambda rng, n_experts: int(rng.integers(1, max(n_experts, 2)))
    if parts[0] == "uniform" and len(parts) == 3:
        lo, hi = int(parts[1]), int(parts[2])
        if not 1 <= lo <= hi:
            raise ValueError("uniform schedule needs 1 <= lo <= hi")
        return lambda rng, n_experts: int(rng.integers(lo, hi + 1))
    raise ValueError(f"unrecognized k_r schedule {spec!r}")


def sample_k_r(cfg: TrainConfig, rng, n_experts: int) -> int:
    k = _parse_schedule(cfg.k_r_schedule)(rng, n_experts)
    if not 0 <= k <= n_experts:
        raise ValueError(f"schedule produced k_r={k} outside [0, {n_experts}]")
    return k


@dataclass
class TrainHistory:
    mse: np.ndarray  # per step, mean over the batch
    grad_norm: np.ndarray  # Frobenius norm of the applied router gradient
    freqs: np.ndarray  # steps x N_r selection frequencies

    def to_csv(self, path) -> None:
        n_experts = self.freqs.shape[1]
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(
                ["step", "mse", "grad_norm"]
                + [f"freq_{i}" for i in range(1, n_experts + 1)]
            )
            for s in range(self.mse.shape[0]):
                w.writerow(
                    [s, repr(float(self.mse[s])), repr(float(self.grad_norm[s]))]
                    + [repr(float(v)) for v in self.freqs[s]]
                )


@dataclass
class SynthSpec:
    """Mixture of Gaussian modes; each window is drawn from a single mode so
    routing has learnable per-window structure."""

    modes: list  # (mean: D-vector, scale: float, weight: float)
    dim: int
    frames_per_window: int

    def __post_init__(self):
        if not self.modes:
            raise ValueError("need at least one mode")
        weights = np.array([w for _, _, w in self.modes], dtype=np.float64)
        if np.any(weights <= 0):
            raise ValueError("mode weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("mode weights must sum to 1")
        for mean, scale, _ in self.modes:
            if np.asarray(mean).shape != (self.dim,):
                raise ValueError("mode mean dimension mismatch")
            if scale < 0:
                raise ValueError("mode scale must be nonnegative")
        if self.frames_per_window < 1:
            raise ValueError("frames_per_window must be >= 1")


def synth_dataset(spec: SynthSpec, n_windows: int, seed) -> list[np.ndarray]:
    """Draw unimodal windows: pick a mode by weight, emit T Gaussian frames."""
    rng = np.random.default_rng(seed)
    weights = np.array([w for _, _, w in spec.modes], dtype=np.float64)
    windows = []
    for _ in range(n_windows):
        mode = int(rng.choice(len(spec.modes), p=weights))
        mean, scale, _ = spec.modes[mode]
        frames = np.asarray(mean, dtype=np.float64) + scale * rng.standard_normal(
            (spec.frames_per_window, spec.dim)
        )
        windows.append(frames)
    return windows


def _cascade_detailed(fb: np.ndarray, m: RevqModel, mask: RoutingMask):
    """Ordered cascade that also keeps each stage's input frames and codes,
    for EMA accumulation and the router gradient."""
    shared_codes, residual = quantize_frames(fb, m.shared)
    stages = []  # (expert index 1-based, stage input, codes)
    for i in mask.selected:
        codes, new_residual = quantize_frames(residual, m.experts[i - 1])
        stages.append((i, residual, codes))
        residual = new_residual
    recon = m.shared.codewords[shared_codes].copy()
    for i, _, codes in stages:
        recon += m.experts[i - 1].codewords[codes]
    return shared_codes, stages, recon


def _mask_gradient(
    m: RevqModel, mask: RoutingMask, stages, recon_err_grad: np.ndarray
) -> np.ndarray:
    """dL/dmask_i: inner product of expert i's summed codeword contribution
    with the reconstruction-error gradient; zero for unselected experts."""
    g = np.zeros(m.n_experts)
    for i, _, codes in stages:
        contribution = m.experts[i - 1].codewords[codes]
        g[i - 1] = float(np.sum(contribution * recon_err_grad))
    return g


def router_gradient(
    fb: np.ndarray, m: RevqModel, mask: RoutingMask, recon_err_grad: np.ndarray
) -> np.ndarray:
    """Compose the router gradient dL/dU for one window.

    Chain: dL/dmask via each selected expert's contribution, the
    straight-through identity dL/dS = dL/dmask, and dS_j/dU[j] = mean frame.
    Rows of unselected experts are exactly zero.
    """
    fb = _check_frames(fb, m.dim)
    recon_err_grad = np.asarray(recon_err_grad, dtype=np.float64)
    if recon_err_grad.shape != fb.shape:
        raise ValueError("recon_err_grad must match the frame batch shape")
    if mask.selected and mask.selected[-1] > m.n_experts:
        raise ValueError("mask selects an expert beyond the pool")
    _, stages, _ = _cascade_detailed(fb, m, mask)
    dl_dmask = _mask_gradient(m, mask, stages, recon_err_grad)
    dl_ds = ste_mask_backward(dl_dmask)
    return np.outer(dl_ds, fb.mean(axis=0))


def build_initial_model(
    windows: list[np.ndarray],
    n_experts: int,
    k_shared: int,
    k_expert: int,
    seed,
    kmeans_iters: int = 10,
) -> RevqModel:
    """Seed a model from data: k-means for the shared codebook, k-means on
    the post-shared residuals for each expert (per-expert seeds), a small
    random router, and the zero codeword pinned everywhere."""
    if not windows:
        raise ValueError("need at least one window to initialize from")
    samples = np.concatenate([_check_frames(w) for w in windows])
    dim = samples.shape[1]
    seeds = np.random.default_rng(seed).integers(0, 2**63 - 1, size=n_experts + 2)

    shared = pin_zero_codeword(kmeans_init(samples, k_shared, kmeans_iters, seeds[0]))
    _, residuals = quantize_frames(samples, shared)
    experts = [
        pin_zero_codeword(kmeans_init(residuals, k_expert, kmeans_iters, seeds[1 + e]))
        for e in range(n_experts)
    ]
    rng = np.random.default_rng(seeds[-1])
    router = Router(rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_experts, dim)))
    return RevqModel(shared, experts, router, dim)


def train_step(
    m: RevqModel, batch: list[np.ndarray], cfg: TrainConfig, step: int
) -> tuple[RevqModel, dict]:
    """One batch: per-window routing and cascade, EMA statistics for every
    touched codebook, one SGD step on the router, and a periodic dead-code
    refresh.  Pure: returns a new model."""
    if not batch:
        raise ValueError("batch must be nonempty")
    rng = np.random.default_rng([cfg.seed, step])
    n_experts = m.n_experts
    t = cfg.frames_per_window

    shared_frames, shared_codes = [], []
    expert_frames = [[] for _ in range(n_experts)]
    expert_codes = [[] for _ in range(n_experts)]
    grad_sum = np.zeros_like(m.router.weights)
    counts = np.zeros(n_experts)
    mse_sum = 0.0
    k_sum = 0

    for fb in batch:
        fb = _check_frames(fb, m.dim)
        if fb.shape[0] != t:
            raise ValueError("window frame count disagrees with the config")
        k_r = sample_k_r(cfg, rng, n_experts)
        k_sum += k_r
        scores = affinity_scores(fb, m.router)
        mask = topk_mask(scores, k_r)
        s_codes, stages, recon = _cascade_detailed(fb, m, mask)

        shared_frames.append(fb)
        shared_codes.append(s_codes)
        for i, stage_input, codes in stages:
            expert_frames[i - 1].append(stage_input)
            expert_codes[i - 1].append(codes)
            counts[i - 1] += 1

        mse_sum += float(np.mean((fb - recon) ** 2))
        err_grad = 2.0 * (recon - fb) / recon.size
        dl_ds = ste_mask_backward(_mask_gradient(m, mask, stages, err_grad))
        grad_sum += np.outer(dl_ds, fb.mean(axis=0))

    grad_mean = grad_sum / len(batch)
    router = Router(m.router.weights - cfg.router_lr * grad_mean)

    shared = pin_zero_codeword(
        ema_update(
            m.shared,
            np.concatenate(shared_frames),
            np.concatenate(shared_codes),
            cfg.decay,
        )
    )
    experts = []
    for e in range(n_experts):
        if expert_frames[e]:
            cb = ema_update(
                m.experts[e],
                np.concatenate(expert_frames[e]),
                np.concatenate(expert_codes[e]),
                cfg.decay,
            )
            experts.append(pin_zero_codeword(cb))
        else:
            experts.append(m.experts[e].copy())

    if (step + 1) % cfg.refresh_interval == 0:
        all_frames = np.concatenate(shared_frames)
        shared = pin_zero_codeword(
            dead_code_refresh(shared, all_frames, MIN_USAGE, rng.integers(2**63 - 1))
        )
        _, residual_pool = quantize_frames(all_frames, shared)
        experts = [
            pin_zero_codeword(
                dead_code_refresh(e, residual_pool, MIN_USAGE, rng.integers(2**63 - 1))
            )
            for e in experts
        ]

    record = {
        "mse": mse_sum / len(batch),
        "grad_norm": float(np.linalg.norm(grad_mean)),
        "freqs": counts / len(batch),
        "mean_k_r": k_sum / len(batch),
    }
    return RevqModel(shared, experts, router, m.dim), record


def train(
    cfg: TrainConfig, data: list[np.ndarray], init: RevqModel
) -> tuple[RevqModel, TrainHistory]:
    """Run the configured number of steps over the dataset in cyclic order."""
    if not data:
        raise ValueError("training data must be nonempty")
    m = init
    mse = np.zeros(cfg.steps)
    grad_norm = np.zeros(cfg.steps)
    freqs = np.zeros((cfg.steps, init.n_experts))
    for step in range(cfg.steps):
        base = step * cfg.batch_windows
        batch = [data[(base + j) % len(data)] for j in range(cfg.batch_windows)]
        m, record = train_step(m, batch, cfg, step)
        mse[step] = record["mse"]
        grad_norm[step] = record["grad_norm"]
        freqs[step] = record["freqs"]
    return m, TrainHistory(mse, grad_norm, freqs)
