"""Split-learning protocol simulation and transcript recording."""

from .protocol import (
    FT_LR,
    SplitError,
    SplitRun,
    SplitSegments,
    SplitSpec,
    TrainState,
    TrainingDiverged,
    bottom_forward,
    centralized_step,
    init_state,
    pre_finetune,
    protocol_exchange,
    recording_points,
    run_split_ft,
    sl_train_step,
    split,
    split_perplexity,
    top_forward,
    trunk_forward,
)
from .transcript import (
    BatchMeta,
    Transcript,
    TranscriptRecord,
    quantize,
    read_transcript_log,
    record_from_json,
    record_to_json,
    write_transcript_log,
)

__all__ = [
    "BatchMeta", "FT_LR", "SplitError", "SplitRun", "SplitSegments", "SplitSpec", "TrainState",
    "TrainingDiverged", "Transcript", "TranscriptRecord", "bottom_forward", "centralized_step",
    "init_state", "pre_finetune", "protocol_exchange", "quantize", "read_transcript_log",
    "record_from_json", "record_to_json", "recording_points", "run_split_ft", "sl_train_step",
    "split", "split_perplexity", "top_forward", "trunk_forward", "write_transcript_log",
]
