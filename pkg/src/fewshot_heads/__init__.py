"""Few-shot adversarial meta-learning for landmark-driven head image synthesis."""

__version__ = "0.1.0"

from fewshot_heads.errors import ConfigurationError, DataError

__all__ = ["ConfigurationError", "DataError", "__version__"]
