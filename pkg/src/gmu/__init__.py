"""Generation-guided multi-level unified network for temporal video grounding."""

from gmu.grounding_core import Interval, MomentGrid

__version__ = "0.1.0"

__all__ = ["Interval", "MomentGrid", "__version__"]
