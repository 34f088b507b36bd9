"""glandseg: two-channel instance segmentation with staged training and
object-level evaluation, sized to run end to end on a CPU."""

__version__ = "0.1.0"

from .core import (
    EdgeMap,
    ImageTensor,
    InstanceMap,
    LabelMap,
    ProbabilityMap,
    TrainingSample,
    ValidationError,
    canonicalize_instances,
    instance_to_edges,
    instance_to_semantic,
)
