"""chartlm: recursive-transformer sentence encoder over a differentiable
binary chart, with pruned linear-time tree induction, a bidirectional cloze
training objective, and parsing/language-modeling evaluation metrics."""

from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
