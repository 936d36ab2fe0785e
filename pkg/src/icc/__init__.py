"""Inception-based crowd counting at desk scale.

Subpackages: ``tensor`` (autodiff core), ``optim`` (AdamW), ``model`` (the
network as a declarative graph plus executor), ``loss`` (counting / optimal
transport / total variation), ``data`` (annotation pipeline and file
formats), ``flops`` (operation-count analysis), ``train`` (training loop,
evaluation, inference) and ``cli``.
"""

from .model import ModelConfig, build_icc, init_parameters
from .tensor import Tensor, set_default_dtype

__all__ = ["ModelConfig", "Tensor", "build_icc", "init_parameters", "set_default_dtype"]
__version__ = "0.1.0"
