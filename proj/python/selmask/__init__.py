"""Selective-masking pre-training toolkit (C++ core)."""

from ._selmask import (
    ConfigError,
    Error,
    MalformedSequenceError,
    ModelConfig,
    NumericError,
    Parameters,
    StageError,
    Vocab,
    apply_random_masking,
    apply_selective_masking,
    detokenize,
    find_important_tokens,
    generate_synth,
    grad_check_sequence,
    init_parameters,
    load_checkpoint,
    masked_count,
    mlm_predict,
    run_experiment,
    save_checkpoint,
    seq_classify,
    token_classify,
    tokenize,
)

__all__ = [
    "ConfigError",
    "Error",
    "MalformedSequenceError",
    "ModelConfig",
    "NumericError",
    "Parameters",
    "StageError",
    "Vocab",
    "apply_random_masking",
    "apply_selective_masking",
    "detokenize",
    "find_important_tokens",
    "generate_synth",
    "grad_check_sequence",
    "init_parameters",
    "load_checkpoint",
    "masked_count",
    "mlm_predict",
    "run_experiment",
    "save_checkpoint",
    "seq_classify",
    "token_classify",
    "tokenize",
]
