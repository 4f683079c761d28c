"""Neural comprehension models: feed-forward classifier and the
encoder-decoder multi-task model, with a from-scratch numpy training stack
(GRU cells, Adagrad, gradient clipping, finite-difference verification)."""

from .encdec import (
    EncDecClassifier,
    Vec2seqParams,
    generate_caption,
    init_vec2seq_params,
    load_vec2seq,
    lower_instances,
    multitask_loss,
    predict_batch,
    save_vec2seq,
    vec2seq_forward,
    vec2seq_train,
)
from .ffnn import (
    FFNNClassifier,
    FFNNParams,
    ffnn_forward,
    ffnn_train,
    init_ffnn_params,
    load_ffnn,
    predict_instance,
    save_ffnn,
)
from .gradcheck import grad_check, numeric_gradient, relative_error
from .gru import gru_backward, gru_forward, init_gru_params
from .optim import Adagrad, TrainConfig, clip_global_norm, global_norm
from .trainlog import TrainLogRow, write_training_log

__all__ = [
    "Adagrad",
    "EncDecClassifier",
    "FFNNClassifier",
    "FFNNParams",
    "TrainConfig",
    "TrainLogRow",
    "Vec2seqParams",
    "clip_global_norm",
    "ffnn_forward",
    "ffnn_train",
    "generate_caption",
    "global_norm",
    "grad_check",
    "gru_backward",
    "gru_forward",
    "init_ffnn_params",
    "init_gru_params",
    "init_vec2seq_params",
    "load_ffnn",
    "load_vec2seq",
    "lower_instances",
    "multitask_loss",
    "numeric_gradient",
    "predict_batch",
    "predict_instance",
    "relative_error",
    "save_ffnn",
    "save_vec2seq",
    "vec2seq_forward",
    "vec2seq_train",
    "write_training_log",
]
