"""Affordance-grasping toolkit: annotation cascade, instruction generation,
gIoU/cIoU benchmarking, mask-token protocol and depth-based grasp poses."""

__version__ = "0.1.0"

from .core import (
    AffordanceRecord,
    CategoryLabel,
    DatasetManifest,
    load_manifest,
    sample_subset,
    save_manifest,
    validate_manifest,
)
from .graspgen import GraspPose, GripperSpec, principal_axes, propose_grasp, transform_grasp
from .maskops import BBox, BinaryMask, RleMask, iou, rasterize_box, rasterize_polygon, rle_decode, rle_encode
from .metrics import compute_ciou, compute_giou, evaluate_benchmark
from .predict import SYSTEM_PROMPT, compose_query, select_mask
from .projection import (
    CameraExtrinsics,
    CameraIntrinsics,
    DepthImage,
    backproject_masked,
    backproject_pixel,
    project_point,
)
