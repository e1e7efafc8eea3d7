"""Cross-modal, cross-domain adaptation for LiDAR BEV 3D detection on synthetic scenes."""

from .diffcore import ContractError, NumericError, Tape, Tensor
from .geometry import Box7, iou_3d, iou_bev

__all__ = ["Box7", "ContractError", "NumericError", "Tape", "Tensor", "iou_3d", "iou_bev"]
__version__ = "0.1.0"
