"""Paretic-side detection and action classification from kinematic windows.

Res-TCN and LSTM classifiers trained jointly through a fusion head with a
distillation term, plus a small discrete Bayesian network that turns a
detected paretic side and patient metadata into impairment estimates.
"""
__version__ = "0.1.0"

from .estimator import FusionDistillClassifier  # noqa: E402
from .models import ModelBundle, load_checkpoint, save_checkpoint  # noqa: E402
from .windowing import SlidingWindowTransformer  # noqa: E402

__all__ = ["FusionDistillClassifier", "ModelBundle", "SlidingWindowTransformer",
           "load_checkpoint", "save_checkpoint", "__version__"]
