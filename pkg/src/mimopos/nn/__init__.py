"""From-scratch neural network building blocks on numpy."""

from .layers import (AvgPool3D, BatchNorm3D, Conv3D, GlobalAvgPool, Layer,
                     Linear, MaxPool3D, Parallel, Parameter, ReLU, Sequential,
                     concat_channels, split_channels)
from .losses import mse_l2_loss
from .optim import Adam
from .gradcheck import (check_layer_gradients, distinct_values,
                        relative_error, run_gradient_suite)

__all__ = [
    "AvgPool3D", "BatchNorm3D", "Conv3D", "GlobalAvgPool", "Layer", "Linear",
    "MaxPool3D", "Parallel", "Parameter", "ReLU", "Sequential",
    "concat_channels", "split_channels", "mse_l2_loss", "Adam",
    "check_layer_gradients", "distinct_values", "relative_error",
    "run_gradient_suite",
]
