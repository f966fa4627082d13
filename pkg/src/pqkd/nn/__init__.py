from .functional import (
    conv2d,
    cross_entropy,
    dropout,
    global_avg_pool,
    kernel_contract,
    linear,
    log_softmax,
    maxpool2x2,
    pick,
    relu,
    softmax,
)
from .optim import AdamState, adam_step, zero_grad
from .tensor import Tensor, as_tensor

__all__ = [
    "Tensor",
    "as_tensor",
    "conv2d",
    "relu",
    "maxpool2x2",
    "global_avg_pool",
    "linear",
    "dropout",
    "log_softmax",
    "softmax",
    "pick",
    "cross_entropy",
    "kernel_contract",
    "AdamState",
    "adam_step",
    "zero_grad",
]

from .gradcheck import check_gradients, numerical_grad, relative_error  # noqa: E402

__all__ += ["check_gradients", "numerical_grad", "relative_error"]
