"""Joint left-atrium segmentation and surface scar quantification on synthetic phantoms."""

__version__ = "0.1.0"

from .errors import SesaError  # noqa: E402

__all__ = ["SesaError", "__version__"]
