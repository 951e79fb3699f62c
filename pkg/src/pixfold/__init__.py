"""Progressive pixel-synthesis image generator with pixel folding, on a numpy autograd core."""

from .config import (
    BLOCK_VARIANTS,
    DiscriminatorConfig,
    GeneratorConfig,
    RunConfig,
    TrainConfig,
    reference_config,
    toy_config,
)
from .folding import FoldSpec, fold, unfold
from .generator import Generator
from .tensor import Tensor, backward, grad, no_grad

__version__ = "0.1.0"
