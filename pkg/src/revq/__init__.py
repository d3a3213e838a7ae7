"""Residual-experts vector quantization.

A shared codebook plus sparsely routed expert codebooks applied in ascending
index order, with EMA codebook training, a straight-through router gradient,
combinatorial routing-mask coding, and a bit-exact variable-bitrate stream
format.
"""

from .vq_core import (
    Codebook,
    nearest_code,
    quantize_frames,
    kmeans_init,
    ema_update,
    dead_code_refresh,
)
from .engine import (
    Router,
    RevqModel,
    RoutingMask,
    QuantizedWindow,
    affinity_scores,
    topk_mask,
    ste_mask_backward,
    revq_quantize,
    revq_dequantize,
    oracle_select,
    save_model,
    load_model,
)
from .bitstream import (
    StreamError,
    StreamHeader,
    subset_rank,
    subset_unrank,
    mask_bits,
    overhead_bps,
    pack_stream,
    unpack_stream,
    bitrate_report,
)
from .trainer import (
    TrainConfig,
    TrainHistory,
    SynthSpec,
    synth_dataset,
    router_gradient,
    build_initial_model,
    train_step,
    train,
)
from .audio_frontend import (
    PcmSignal,
    read_wav,
    write_wav,
    dct_forward,
    dct_inverse,
    signal_to_windows,
    windows_to_signal,
)
from .harness import Metrics, eval_metrics, encode_signal, decode_stream

__version__ = "0.1.0"
