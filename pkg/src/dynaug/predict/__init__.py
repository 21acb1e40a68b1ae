"""Age regressors validating the augmentation: CNN, CNN+attention, TALSTM."""

from .layers import (
    MhaParams,
    TimeAttentionParams,
    conv1d,
    conv1d_backward,
    maxpool1d,
    maxpool1d_backward,
    maxpool1d_with_indices,
    mha_backward,
    mha_forward,
    multihead_attention,
    pooled_length,
    softmax_backward,
    time_attention,
    time_attention_backward,
    time_attention_forward,
)
from .models import CnnConfig, CnnModel, TalstmConfig, TimeAttentionLstm, tower_stage_lengths
from .training import (
    PREDICTOR_KINDS,
    PredictorTrainConfig,
    build_predictor,
    evaluate_mae,
    load_predictor,
    predict_ages,
    save_predictor,
    stack_records,
    train_predictor,
)

__all__ = [
    "CnnConfig",
    "CnnModel",
    "MhaParams",
    "PREDICTOR_KINDS",
    "PredictorTrainConfig",
    "TalstmConfig",
    "TimeAttentionLstm",
    "TimeAttentionParams",
    "build_predictor",
    "conv1d",
    "conv1d_backward",
    "evaluate_mae",
    "load_predictor",
    "maxpool1d",
    "maxpool1d_backward",
    "maxpool1d_with_indices",
    "mha_backward",
    "mha_forward",
    "multihead_attention",
    "pooled_length",
    "predict_ages",
    "save_predictor",
    "softmax_backward",
    "stack_records",
    "time_attention",
    "time_attention_backward",
    "time_attention_forward",
    "tower_stage_lengths",
    "train_predictor",
]
