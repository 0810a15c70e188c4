"""Neural networks for unordered point clouds: shared per-point MLPs and max pooling."""

from .errors import (
    ConfigError,
    DimensionError,
    EmptySetError,
    LabelError,
    NumericError,
    ParseError,
    SetNetError,
    TheoremViolation,
    UnsupportedAggregatorError,
)
from .pointnet import (
    BackboneSpec,
    ClassifierSpec,
    ModelState,
    SegmenterSpec,
    classify_forward,
    count_parameters,
    load_checkpoint,
    orthogonality_loss,
    save_checkpoint,
    segment_forward,
)

__version__ = "0.1.0"
