"""crossmpi: a desk-scale cross-modal prompt-injection laboratory.

Image-only perturbations are optimized against the fusion-critical hidden
states of a small bundled vision-language model, redirecting it to an
attacker-chosen task while the text prompt stays benign. The package covers
the full pipeline: synthetic corpus generation, model training, layer-wise
probing, saliency-weighted budget masks, the attack optimizer, metrics,
defenses, and a CLI.
"""

__version__ = "0.1.0"

from .tensor import Tensor, backward, grad_check

__all__ = ["Tensor", "backward", "grad_check", "__version__"]
