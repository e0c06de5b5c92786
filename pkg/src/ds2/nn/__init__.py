"""Network layers, the layer stack and its checkpoint format."""

from ds2.nn.layers import (
    BN_EPS,
    BN_MOMENTUM,
    RELU_CAP,
    ConvSpec,
    DenseSpec,
    OutputSpec,
    RecurrentSpec,
    RowConvSpec,
    SeqBatchNorm,
    clipped_relu,
    clipped_relu_grad,
    softmax_output,
)
from ds2.nn.network import (
    CheckpointError,
    Network,
    ParamVector,
    count_params,
    hidden_for_budget,
    load_checkpoint,
    save_checkpoint,
    table_stack,
)

__all__ = [
    "BN_EPS", "BN_MOMENTUM", "RELU_CAP", "ConvSpec", "DenseSpec", "OutputSpec", "RecurrentSpec",
    "RowConvSpec", "SeqBatchNorm", "clipped_relu", "clipped_relu_grad", "softmax_output",
    "CheckpointError", "Network", "ParamVector", "count_params", "hidden_for_budget",
    "load_checkpoint", "save_checkpoint", "table_stack",
]
