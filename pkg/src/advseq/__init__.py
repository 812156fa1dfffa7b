"""advseq: adversarial input generation and robust training for small
transformer translation models, with a noisy-input evaluation harness."""

__version__ = "0.1.0"

from .autodiff import GradTape, Tensor  # noqa: F401
