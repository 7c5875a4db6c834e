"""Product-unit residual networks on a small NumPy autodiff core."""

from .architectures import ArchitectureSpec, BlockSpec, arch_spec, build_block, build_network, count_params, create_model, init_parameters
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
