"""Bird's-eye Post-Encroachment Time maps from multi-camera vehicle detections.

Pipeline: per-camera detection polygons on a common ground grid are grouped
by timestamp (``sync``), fused into vehicle rectangles (``fusion``), and
accumulated into per-pixel PET statistics (``pet``) that are rendered as
heatmaps (``render``).  ``store`` keeps the intermediate records and
``simulator`` provides synthetic scenes with ground truth.
"""

from petmap.errors import PetmapError
from petmap.geometry import RotatedRect, estimate_homography, min_area_rect
from petmap.fusion import FusionConfig, fuse_group
from petmap.pet import PetGrid
from petmap.sync import DetectionFrame, FrameGroup, SyncBuffer

__version__ = "0.1.0"

__all__ = [
    "DetectionFrame",
    "FrameGroup",
    "FusionConfig",
    "PetGrid",
    "PetmapError",
    "RotatedRect",
    "SyncBuffer",
    "estimate_homography",
    "fuse_group",
    "min_area_rect",
]
