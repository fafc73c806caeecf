"""Missing-modality robust emotion recognition in conversation.

A party-attentive recurrent classifier, per-utterance common-representation
learning with adversarial imputation, and the alternating training loop that
couples them, on top of a small reverse-mode autodiff engine.
"""

from .engine import Tensor, backward
from .optim import Adam

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "Adam", "__version__"]
