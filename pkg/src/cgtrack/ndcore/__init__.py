"""Dense array kernel with reverse-mode differentiation."""
from .array import (
    DimensionError,
    NDArray,
    Node,
    Tape,
    UsageError,
    as_array,
    backward,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    record_pieces,
    set_debug,
    set_default_dtype,
)
from .ops import (
    abs,
    activation,
    add,
    batch_norm,
    clip,
    concat,
    concat_channels,
    conv2d,
    conv_out_size,
    depthwise_conv2d,
    div,
    exp,
    getitem,
    global_avg_pool,
    hadamard,
    hardswish,
    linear,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    power,
    reciprocal,
    relu,
    relu6,
    repeat_batch,
    reshape,
    sigmoid,
    softmax,
    sub,
    sum,
    transpose,
    upsample_nearest2x,
)
