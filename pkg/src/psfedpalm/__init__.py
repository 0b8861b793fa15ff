"""Spectrum-consistent federated palmprint verification on a numpy embedder."""
__version__ = "0.1.0"

from .estimator import PSFedPalm  # noqa: E402

__all__ = ["PSFedPalm", "__version__"]
