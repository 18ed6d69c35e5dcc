from .functional import (
    affine,
    batchnorm2d,
    conv2d,
    interpolate_upsample,
    relu,
    transposed_conv2d,
)
from .gradcheck import finite_diff_check, relative_error, scalar_function_check
from .graph import ComputeGraph, GradientMap, GraphError, ModelParameters, backward, init_parameters
from .tensor import NonFiniteError, ShapeError, as_tensor

__all__ = [
    "ComputeGraph",
    "GradientMap",
    "GraphError",
    "ModelParameters",
    "NonFiniteError",
    "ShapeError",
    "affine",
    "as_tensor",
    "backward",
    "batchnorm2d",
    "conv2d",
    "finite_diff_check",
    "init_parameters",
    "interpolate_upsample",
    "relative_error",
    "relu",
    "scalar_function_check",
    "transposed_conv2d",
]
