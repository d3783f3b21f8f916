"""Small dense-tensor engine: 3D (de)convolutions, batch norm, optimisers."""
from .checkpoint import CheckpointFormatError, load_checkpoint, save_checkpoint
from .conv import (
    ShapeError,
    conv3d_backward,
    conv3d_forward,
    conv_output_length,
    conv_padding,
    deconv3d_backward,
    deconv3d_forward,
    deconv_crop,
)
from .gradcheck import finite_diff_check, relative_error
from .layers import (
    Activation,
    BatchNorm,
    Conv3D,
    ConvLayerSpec,
    Dense,
    Flatten,
    Sequential,
    activation_backward,
    activation_forward,
    sigmoid,
)
from .optim import SGD, Adadelta, adadelta_step, sgd_step
