"""Miniature byte-level causal LM, its GRU inverter head, and checkpoints."""

from .checkpoint import load_checkpoint, load_model, save_checkpoint, save_model
from .gru import GRU_DROPOUT, GRU_HIDDEN, gru_hidden_sequence, gru_invert, init_gru_inverter
from .model import (
    ATTN_MATRICES,
    ConfigError,
    ModelConfig,
    ModelParams,
    SegmentRange,
    adapter_l2_norm,
    add_positions,
    apply_head,
    attach_adapters,
    build_model,
    embed_tokens,
    forward_segment,
    full_forward,
    lm_loss,
    perplexity,
    run_blocks,
)
from .tokenizer import BOS, BYTE_VOCAB, PAD, TokenBatch, detokenize, detokenize_bytes, encode_batch, tokenize
from .training import BatchStream, epoch_batches, lm_value_and_grad, pretrain, train_lm

__all__ = [
    "ATTN_MATRICES", "BOS", "BYTE_VOCAB", "BatchStream", "ConfigError", "GRU_DROPOUT", "GRU_HIDDEN",
    "ModelConfig", "ModelParams", "PAD", "SegmentRange", "TokenBatch", "adapter_l2_norm",
    "add_positions", "apply_head", "attach_adapters", "build_model", "detokenize",
    "detokenize_bytes", "embed_tokens", "encode_batch", "epoch_batches", "forward_segment",
    "full_forward", "gru_hidden_sequence", "gru_invert", "init_gru_inverter", "lm_loss",
    "lm_value_and_grad", "load_checkpoint", "load_model", "perplexity", "pretrain", "run_blocks",
    "save_checkpoint", "save_model", "tokenize", "train_lm",
]
