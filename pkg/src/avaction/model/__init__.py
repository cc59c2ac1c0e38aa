"""Audio-visual Transformer with caption and action decoders."""

from avaction.model.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from avaction.model.network import (
    Batch,
    Encodings,
    PreconditionError,
    SequenceLengthError,
    classify_semantic,
    collate,
    decode_step,
    decoder_forward,
    decoder_logits,
    embed_tokens,
    embedding_table,
    encode,
    mean_pool,
    propose_segments,
    soft_token_embedding,
    teacher_forcing_arrays,
)
from avaction.model.params import HEADS, OWNERS, ModelConfig, ModelParams, init_params

__all__ = [
    "HEADS", "OWNERS", "Batch", "CheckpointError", "Encodings", "ModelConfig", "ModelParams",
    "PreconditionError", "SequenceLengthError", "classify_semantic", "collate", "decode_step",
    "decoder_forward", "decoder_logits", "embed_tokens", "embedding_table", "encode", "init_params",
    "load_checkpoint", "mean_pool", "propose_segments", "save_checkpoint", "soft_token_embedding",
    "teacher_forcing_arrays",
]
