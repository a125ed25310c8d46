from .tensor import Tensor, no_grad, grad_enabled, relu, leaky_relu, tanh, sigmoid, concat
from .functional import (
    conv1d, conv2d, conv2d_transpose, batch_norm, BatchNormState, avg_pool1d, nn_upsample1d,
    dense, softmax_ce, sigmoid_ce,
)
from .optim import Adam, AdamState, LrSchedule, adam_step, lr_at, WAVENET_SCHEDULE, BASELINE_SCHEDULE
from .checkpoint import read_checkpoint, write_checkpoint
from .gradcheck import gradcheck


def init_uniform(rng, shape, fan_in: int, dtype=None, scale: float = 1.0):
    """Fan-in scaled uniform init in ``[-scale/sqrt(fan_in), scale/sqrt(fan_in)]``."""
    import numpy as np

    bound = scale / np.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype or np.float32), requires_grad=True)
