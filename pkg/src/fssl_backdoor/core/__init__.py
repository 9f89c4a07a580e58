"""Minimal differentiable encoder engine."""

from .encoder import (
    EncoderSpec,
    EncoderState,
    LayerSpec,
    Tape,
    batchnorm,
    conv,
    default_spec,
    dense,
    embed_many,
    flatten,
    forward,
    forward_train,
    identity_spec,
    init_params,
    make_state,
    normalize_rows,
    pool,
    relu,
    run,
    trainable_mask,
)
from .losses import (
    CRITERIA,
    DEFAULT_TEMPERATURE,
    LossResult,
    backdoor_loss,
    cosine_similarity,
    ntxent,
    ntxent_loss,
    pair_similarity,
)
from .optim import Optimizer, OptimizerConfig, optimizer_step
from .params import (
    BN_AFFINE,
    BN_STAT,
    WEIGHT,
    Layout,
    ParameterVector,
    Segment,
    load_checkpoint,
    save_checkpoint,
)
