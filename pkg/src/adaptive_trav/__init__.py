"""Online self-supervised traversability: descriptor maps, roughness labels,
GP cost/speed maps with CVaR risk shaping, and an MPPI closed loop."""

from .errors import (BufferFullError, EpisodeAborted, InvalidInputError, NumericError,
                     PlannerError)

__version__ = "0.1.0"

__all__ = ["BufferFullError", "EpisodeAborted", "InvalidInputError", "NumericError",
           "PlannerError", "__version__"]
