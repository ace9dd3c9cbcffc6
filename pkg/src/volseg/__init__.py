"""volseg: dynamic neural volumes with semantic attention decomposition.

Fit a time-varying neural volume (color, density, scene flow, semantics,
attention) to a short monocular video with precomputed prior maps, then
decompose the scene into salient objects and background by clustering the
rendered features.  The heavy lifting is split across focused modules;
this package root re-exports the user-facing API.
"""

__version__ = "0.1.0"

from .cluster import (
    ClusterConfig,
    ClusterModel,
    SaliencyClusterer,
    assign_view,
    blend_quantile_baseline,
    flow_salient_filter,
    isolate_object,
    oracle_select,
)
from .field import EncodingConfig, FieldConfig, FieldParams, init_field_params
from .metrics import EvalReport, ari, evaluate_split, iou, psnr, ssim
from .postprocess import CrfConfig, DenseCrf, crf_refine
from .pyramid import PcaReducer, PyramidConfig, build_pyramids
from .render import composite, make_sample_batch, render_flow_map, render_frame
from .scene_io import (
    Bounds,
    CameraPose,
    DatasetError,
    FormatError,
    FrameBundle,
    PyramidLayout,
    RayBatch,
    SceneDataset,
    generate_rays,
    load_dataset,
    normalize_dataset,
    save_raw_dataset,
)
from .synth import BlobSpec, GroundTruth, SynthSpec, generate_scene
from .training import (
    DecaySchedule,
    LossWeights,
    short_schedule_weights,
    SceneReconstructor,
    TrainConfig,
    TrainingError,
    TrainResult,
    fit,
)
from .validation import ValidationError

__all__ = [
    "__version__",
    "ValidationError",
    "FormatError",
    "DatasetError",
    "TrainingError",
    "SceneDataset",
    "FrameBundle",
    "CameraPose",
    "Bounds",
    "RayBatch",
    "PyramidLayout",
    "generate_rays",
    "load_dataset",
    "save_raw_dataset",
    "normalize_dataset",
    "SynthSpec",
    "BlobSpec",
    "GroundTruth",
    "generate_scene",
    "FieldConfig",
    "EncodingConfig",
    "FieldParams",
    "init_field_params",
    "composite",
    "make_sample_batch",
    "render_frame",
    "render_flow_map",
    "TrainConfig",
    "LossWeights",
    "short_schedule_weights",
    "DecaySchedule",
    "TrainResult",
    "fit",
    "SceneReconstructor",
    "PyramidConfig",
    "PcaReducer",
    "build_pyramids",
    "ClusterConfig",
    "ClusterModel",
    "SaliencyClusterer",
    "assign_view",
    "flow_salient_filter",
    "blend_quantile_baseline",
    "isolate_object",
    "oracle_select",
    "CrfConfig",
    "DenseCrf",
    "crf_refine",
    "ari",
    "iou",
    "psnr",
    "ssim",
    "evaluate_split",
    "EvalReport",
]
