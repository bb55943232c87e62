from .gradcheck import finite_diff_grad, relative_error
from .ops import (
    conv2d,
    crop2d,
    cross_entropy,
    dilation_rate,
    maxpool2,
    relu,
    same_padding,
    softmax_channels,
    transposed_conv,
    zero_insert_kernel,
)
from .tensor import Gradients, NonFiniteError, ShapeError, Tape, TapeError, Tensor, backward

__all__ = [
    "Gradients",
    "NonFiniteError",
    "ShapeError",
    "Tape",
    "TapeError",
    "Tensor",
    "backward",
    "conv2d",
    "crop2d",
    "cross_entropy",
    "dilation_rate",
    "finite_diff_grad",
    "maxpool2",
    "relative_error",
    "relu",
    "same_padding",
    "softmax_channels",
    "transposed_conv",
    "zero_insert_kernel",
]
