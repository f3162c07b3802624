"""coneglue: numerical laboratory for cone-localized gluing of asymptotically
flat vacuum initial data for the Einstein constraint equations."""

__version__ = "0.1.0"

from .geometry import (ConeSpec, DomainGrid, GridParams, WeightParams,
                       build_domain)
from .picard import localize
from .estimator import ConeLocalizer

__all__ = ["ConeSpec", "DomainGrid", "GridParams", "WeightParams",
           "build_domain", "localize", "ConeLocalizer", "__version__"]
