"""Neural signed distance fields from single noisy point clouds.

A shape prior is trained as an auto-decoder on analytic shapes, then finetuned
on one noisy cloud with a local noise-to-noise EMD objective.
"""

from .autodiff import AdamState, Tape, Var, adam_step
from .finetune import FinetuneConfig, finetune, finetune_step, global_mapping_step
from .geometry import (
    AffineTransform,
    KnnIndex,
    LocalRegion,
    PointCloud,
    add_noise,
    normalize_to_unit,
    read_point_cloud,
    sample_local_region,
    split_strategy,
    write_point_cloud,
)
from .mesher import TriangleMesh, extract_zero_level, marching_cubes, read_mesh, write_mesh
from .metrics import MetricReport, chamfer, evaluate_mesh, f_score, normal_consistency
from .prior import AnalyticShape, PriorConfig, train_prior
from .sdf_net import (
    Checkpoint,
    SdfNetwork,
    VanishingGradientError,
    denoise_points,
    evaluate,
    load_checkpoint,
    pull_to_surface,
    save_checkpoint,
)
from .transport import Matching, emd_loss, exact_emd

__version__ = "0.1.0"
