"""Waterfall cascade of dilated neighborhood attention for 2D pose estimation."""

from .autodiff import (Tensor, Graph, backward, constant, finite_diff_check,
                       no_grad, parameter)
from .attention import (AttentionConfig, AttentionProjections, RelPosBias,
                        na_forward, na_oracle, neighborhood_indices, receptive_field)
from .errors import (AnnotationError, CheckpointError, ChecksumError,
                     ConfigurationError, DimensionError, NumericError, VersionError)

__version__ = "0.1.0"
