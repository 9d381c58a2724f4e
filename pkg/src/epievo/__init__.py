"""Epigenetic neuroevolution of layered convolutional / fully connected classifiers.

Network structure evolves through speciated mutation and crossover while
weights are trained by backpropagation; offspring inherit trained weights
gene by gene.
"""

from .ecosystem import Ecosystem, EcosystemConfig, GenerationMetrics, init_ecosystem, run_generation
from .model import KernelShape, LayerSpec, Network, evaluate, forward, train_epoch

__all__ = [
    "Ecosystem",
    "EcosystemConfig",
    "GenerationMetrics",
    "KernelShape",
    "LayerSpec",
    "Network",
    "evaluate",
    "forward",
    "init_ecosystem",
    "run_generation",
    "train_epoch",
]
__version__ = "0.1.0"
