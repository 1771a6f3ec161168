from . import tensor
from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .nn import (
    LOG_2PI,
    LOGVAR_MAX,
    LOGVAR_MIN,
    Adam,
    AdamState,
    Mlp,
    adam_step,
    clamp_logvar,
    gaussian_logpdf,
    kl_diag_gaussians,
    reparam_sample,
)
from .rng import STREAMS, child_seed, substream
from .tensor import Tensor, backward, constant, parameter

__all__ = [
    "Adam", "AdamState", "LOG_2PI", "LOGVAR_MAX", "LOGVAR_MIN", "Mlp", "STREAMS", "Tensor",
    "adam_step", "backward", "child_seed", "clamp_logvar", "constant", "gaussian_logpdf",
    "kl_diag_gaussians", "load_into", "parameter", "read_checkpoint", "reparam_sample",
    "save_checkpoint", "substream", "tensor",
]
