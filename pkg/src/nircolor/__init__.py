"""Colorization of near-infrared images with a multi-scale patch CNN."""

__version__ = "0.1.0"

from .image import load_image, save_image  # noqa: E402
from .inference import colorize, colorize_raw, colorize_raw_fast  # noqa: E402
from .metrics import rmse, scielab  # noqa: E402
from .postprocess import add_details, joint_bilateral  # noqa: E402
from .preprocess import decompose, decompose_pyramid  # noqa: E402
from .topology import (TopologySpec, build_model, coherence_gap, load_model,  # noqa: E402
                       required_roi, save_model)
from .trainer import TrainConfig, lr_search, train  # noqa: E402

__all__ = [
    "TopologySpec", "TrainConfig", "add_details", "build_model", "coherence_gap", "colorize",
    "colorize_raw", "colorize_raw_fast", "decompose", "decompose_pyramid", "joint_bilateral",
    "load_image", "load_model", "lr_search", "required_roi", "rmse", "save_image", "save_model",
    "scielab", "train",
]
