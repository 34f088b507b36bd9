from .checkpoint import (
    CheckpointError,
    checkpoint_arch,
    load_checkpoint,
    read_checkpoint_arrays,
    save_checkpoint,
)
from .coords import CoordMap, ShapeError, compose, crop_offset, crop_to
from .gradcheck import NumericError, gradient_check, max_gradient_error
from .losses import (
    CLAMP_EPS,
    EdgeLossTerms,
    binary_cross_entropy_sum,
    edge_batch,
    edge_loss,
    fusion_loss,
    label_batch,
    pixelwise_log_loss,
    region_loss,
    total_finetune_loss,
)
from .network import (
    GROUP_NAMES,
    NUM_SIDE_BRANCHES,
    ArchConfig,
    ForwardOutputs,
    MultiChannelNet,
    bilinear_kernel,
    image_batch,
    init_group,
    initialize,
    xavier_limit,
)
