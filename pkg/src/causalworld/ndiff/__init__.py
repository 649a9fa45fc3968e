from .tensor import (
    DetachedNodeError,
    Tape,
    Tensor,
    add,
    assert_finite,
    backward,
    clip,
    concat,
    div,
    exp,
    gather_rows,
    log,
    log_softmax,
    matmul,
    mul,
    neg,
    pick_cols,
    pow_const,
    relu,
    sigmoid,
    slice_cols,
    softmax,
    sub,
    tanh,
    tmean,
    tsum,
    using_dtype,
)
from .layers import Embedding, GruCell, Linear, Mlp, Module, uniform_fan_in, zeros_param
from .optim import Adam, NonFiniteGradientError, clip_by_global_norm
from .serial import BlobFormatError, assign_params, file_digest, load_params, save_params
