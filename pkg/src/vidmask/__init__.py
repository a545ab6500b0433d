"""Region-masked video object detection at desk scale.

Mask construction over a token grid, a toy windowed ViT backbone with
reference-feature reuse for masked frames, a closed-loop linear detection
head, an analytic FLOPs/memory cost model, and a synthetic-video harness.
"""

from .masks import (
    BBox,
    FrameAnnotation,
    FrameDecision,
    GridSpec,
    Heatmap,
    MaskSchedule,
    RegionMask,
    accumulate_heatmap,
    combined_mask,
    dynamic_mask,
    load_annotations,
    pad_frame,
    region_scores,
    save_annotations,
    schedule_frame,
    static_mask,
)
from .model import (
    ModelConfig,
    OpTrace,
    ReferenceState,
    TokenSet,
    UninitializedStateError,
    ViTBackbone,
    attention,
    forward_dense,
    forward_masked,
    gather,
    msa_block_global,
    patch_embed,
    scatter,
    toy_config,
    vitdet_b_config,
    wmsa_block_masked,
)
from .detector import (
    Detection,
    DetectorHead,
    EvalResult,
    evaluate,
    head,
    iou,
)
from .costs import (
    CostReport,
    cost_table,
    flops_dense,
    flops_masked,
    macs_dense,
    macs_masked,
    measure_run,
    memory_block_reference,
    memory_token_gating,
    write_cost_csv,
)
from .video import SceneObject, SyntheticScene, generate, load_frames, make_random_scene, save_frames
from .pipeline import RunResult, ablate_masks, build_static_mask, calibrate_head, run_oracle, run_sequence

__version__ = "0.1.0"
