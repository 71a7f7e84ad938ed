"""Streaming speech encoder with time-shifted contextual attention.

Dynamic right context masks, chunked convolution with lookahead, a low-latency
streaming pipeline and brute-force oracles that check the streaming engine
against offline evaluation.
"""

from .encoder import Encoder, EncoderConfig, ctc_greedy
from .masking import (AttnMask, ContextConfig, ContextRanges, chunk_mask, context_ranges, drc_mask,
                      sample_training_context, tsca_step_mask)
from .streaming import (EmissionEvent, LatencyReport, SimClock, StreamConfig, StreamState, finalize,
                        latency_report, open_session, push_chunk, realized_windows, run_batch,
                        stream_features)

__all__ = [
    "AttnMask", "ContextConfig", "ContextRanges", "EmissionEvent", "Encoder", "EncoderConfig",
    "LatencyReport", "SimClock", "StreamConfig", "StreamState", "chunk_mask", "context_ranges",
    "ctc_greedy", "drc_mask", "finalize", "latency_report", "open_session", "push_chunk",
    "realized_windows", "run_batch", "sample_training_context", "stream_features", "tsca_step_mask",
]
