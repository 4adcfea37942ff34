"""viewdistill: train an ensemble of partial-view ReID teachers, cache their
flip-averaged supervisory representations, and distill them into a single
holistic student through feature-map and representation factorization
branches."""

__version__ = "0.1.0"

from .config import FDConfig
from .views import CANONICAL_VIEWS, ViewSpec, canonical_views

__all__ = ["FDConfig", "ViewSpec", "CANONICAL_VIEWS", "canonical_views",
           "__version__"]
