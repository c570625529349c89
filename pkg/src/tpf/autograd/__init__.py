from . import ops
from .gradcheck import check_gradients, check_gradients_multi
from .nn import Conv2d, LayerNorm, Linear, Module, Parameter
from .optim import AdamW, clip_grad_norm
from .ops import conv2d, cosine_sim, elementwise, layernorm, matmul, mean_sq_err, softmax
from .tensor import ShapeError, TapeError, Tensor, as_tensor, no_grad, tensor

__all__ = [
    "AdamW", "Conv2d", "LayerNorm", "Linear", "Module", "Parameter", "ShapeError", "TapeError",
    "Tensor", "as_tensor", "check_gradients", "check_gradients_multi", "clip_grad_norm",
    "conv2d", "cosine_sim", "elementwise", "layernorm", "matmul", "mean_sq_err", "no_grad",
    "ops", "softmax", "tensor",
]
