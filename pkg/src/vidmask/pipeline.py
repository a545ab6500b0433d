"""End-to-end sequence runner: scheduling, masking, detection, cost, oracle.

Frame 0 is always processed densely; it also calibrates the detector probe
(a one-frame closed-form least-squares fit of the head on frame 0's dense
features against its ground-truth region labels). Later frames follow the
schedule: full refreshes at period boundaries, masked frames using the
static mask union the dynamic mask built from the previous frame's
detections. An optional paired dense run provides per-frame feature errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .costs import CostReport, measure_run, memory_block_reference
from .detector import DetectorHead, Detection, EvalResult, evaluate, fit_linear_probe, head
from .masks import (
    FrameAnnotation,
    FrameDecision,
    GridSpec,
    MaskSchedule,
    RegionMask,
    accumulate_heatmap,
    combined_mask,
    dynamic_mask,
    region_scores,
    schedule_frame,
    static_mask,
)
from .model import OpTrace, ReferenceState, ViTBackbone, forward_dense, forward_masked

MASK_MODES = ("combined", "static", "dynamic")


@dataclass
class FrameStats:
    index: int
    full: bool
    tokens_processed: int
    cost: CostReport
    detections: list
    feature_rel_error: Optional[float] = None
    feature_max_abs_selected: Optional[float] = None


@dataclass
class RunResult:
    frames: list
    evaluation: EvalResult
    period: int
    static_keep_rate: float
    dilation: int
    mask_mode: str
    num_tokens: int
    backbone: str

    @property
    def mean_tokens(self) -> float:
        return float(np.mean([f.tokens_processed for f in self.frames]))

    @property
    def masked_mean_tokens(self) -> float:
        masked = [f.tokens_processed for f in self.frames if not f.full]
        return float(np.mean(masked)) if masked else float(self.num_tokens)

    @property
    def mean_keep_rate(self) -> float:
        return self.mean_tokens / self.num_tokens

    @property
    def mean_gmacs(self) -> float:
        return float(np.mean([f.cost.backbone_gmacs for f in self.frames]))

    @property
    def mean_scatter_gather(self) -> float:
        return float(np.mean([f.cost.scatter_gather_ops for f in self.frames]))

    def to_jsonable(self) -> dict:
        return {
            "mask_mode": self.mask_mode,
            "period": self.period,
            "static_keep_rate": self.static_keep_rate,
            "dilation": self.dilation,
            "num_tokens": self.num_tokens,
            "backbone": self.backbone,
            "mean_tokens_processed": self.mean_tokens,
            "mean_keep_rate": self.mean_keep_rate,
            "mean_gmacs": self.mean_gmacs,
            "mean_scatter_gather_ops": self.mean_scatter_gather,
            "evaluation": {
                "precision": self.evaluation.precision,
                "recall": self.evaluation.recall,
                "f1": self.evaluation.f1,
                "matches": self.evaluation.matches,
                "num_detections": self.evaluation.num_detections,
                "num_ground_truth": self.evaluation.num_ground_truth,
                "iou_threshold": self.evaluation.iou_threshold,
            },
            "frames": [
                {
                    "index": f.index,
                    "full": f.full,
                    "tokens_processed": f.tokens_processed,
                    "gmacs": f.cost.backbone_gmacs,
                    "buffer_bytes": f.cost.buffer_bytes,
                    "scatter_gather_ops": f.cost.scatter_gather_ops,
                    "feature_rel_error": f.feature_rel_error,
                    "feature_max_abs_selected": f.feature_max_abs_selected,
                    "detections": [
                        {"box": d.box.as_list(), "score": d.score, "class": d.class_id}
                        for d in f.detections
                    ],
                }
                for f in self.frames
            ],
        }


def token_coverage(boxes, spec: GridSpec) -> np.ndarray:
    """Per-token fraction of region pixels covered by the boxes."""
    heat = accumulate_heatmap([(0, list(boxes))], spec)
    return region_scores(heat, spec).ravel() / spec.region_size ** 2


def token_object_labels(annotation: FrameAnnotation, spec: GridSpec,
                        min_coverage: float = 0.5) -> np.ndarray:
    """True for tokens whose region is mostly covered by a ground-truth box.

    Majority coverage (rather than any intersection) keeps the probe's
    positives aligned with region-quantized detection boxes: grazed regions
    would otherwise inflate every box by one region per side.
    """
    return token_coverage(annotation.boxes, spec) >= min_coverage


def calibrate_head(features: np.ndarray, annotation: FrameAnnotation, spec: GridSpec,
                   num_classes: int = 1) -> DetectorHead:
    """One-frame closed-form fit of the detector probe.

    Objectness targets are +1 on majority-covered tokens and -1 elsewhere so
    the logistic's 0.5 decision point sits at logit zero. Class targets are
    one-hot on each box's majority-covered tokens (later boxes override),
    zero rows on background.
    """
    labels = token_object_labels(annotation, spec)
    obj_targets = np.where(labels, 1.0, -1.0)
    obj_w, obj_b = fit_linear_probe(features, obj_targets)

    num_classes = max(1, num_classes)
    cls_targets = np.zeros((spec.num_tokens, num_classes))
    class_ids = annotation.class_ids or tuple(0 for _ in annotation.boxes)
    for box, cid in zip(annotation.boxes, class_ids):
        token_idx = np.flatnonzero(token_coverage([box], spec) >= 0.5)
        cls_targets[token_idx] = 0.0
        cls_targets[token_idx, int(cid) % num_classes] = 1.0
    cls_w, cls_b = fit_linear_probe(features, cls_targets)
    return DetectorHead(obj_w, float(obj_b), cls_w, np.atleast_1d(cls_b))


def build_static_mask(annotations: Sequence, spec: GridSpec, keep_rate: float) -> RegionMask:
    """Heatmap -> region scores -> top-k static mask."""
    heat = accumulate_heatmap(annotations, spec)
    return static_mask(region_scores(heat, spec), keep_rate, spec)


def _num_classes(annotations) -> int:
    ids = [c for ann in annotations for c in ann.class_ids]
    return max(ids) + 1 if ids else 1


def _feature_errors(features, oracle_features, mask: Optional[RegionMask]):
    diff = features - oracle_features
    denom = float(np.linalg.norm(oracle_features))
    rel = float(np.linalg.norm(diff)) / denom if denom else 0.0
    if mask is None:
        max_abs = float(np.abs(diff).max()) if diff.size else 0.0
    else:
        locs = mask.true_locations()
        max_abs = float(np.abs(diff[locs]).max()) if locs.size else 0.0
    return rel, max_abs


def run_sequence(frames, annotations: Sequence[FrameAnnotation], model: ViTBackbone,
                 schedule: MaskSchedule, static_annotations: Optional[Sequence] = None,
                 mask_mode: str = "combined", detector_head: Optional[DetectorHead] = None,
                 objectness_threshold: float = 0.5, with_oracle: bool = False) -> RunResult:
    """Run the masked pipeline over one sequence.

    ``annotations`` are the sequence's own ground truth (frame-0 probe
    calibration and evaluation); ``static_annotations`` are the training
    boxes for the static mask and default to the sequence's own.
    """
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ValueError("empty sequence")
    if len(annotations) != len(frames):
        raise ValueError(f"{len(annotations)} annotations for {len(frames)} frames")
    if mask_mode not in MASK_MODES:
        raise ValueError(f"mask_mode must be one of {MASK_MODES}")
    spec = model.config.grid

    use_static = mask_mode in ("combined", "static")
    use_dynamic = mask_mode in ("combined", "dynamic")
    smask = (
        build_static_mask(static_annotations or annotations, spec, schedule.static_keep_rate)
        if use_static else RegionMask.all_false(spec)
    )

    state = ReferenceState()
    oracle_state = ReferenceState() if with_oracle else None
    stats = []
    previous_detections: list = []
    for t, frame in enumerate(frames):
        trace = OpTrace()
        decision = schedule_frame(t, schedule)
        mask = None
        if decision is FrameDecision.FULL_FRAME:
            features = forward_dense(frame, model, state, frame_index=t, trace=trace)
            if detector_head is None:
                detector_head = calibrate_head(features, annotations[0], spec,
                                               _num_classes(annotations))
        else:
            dmask = (
                dynamic_mask([d.box for d in previous_detections], spec, schedule.dilation)
                if use_dynamic else RegionMask.all_false(spec)
            )
            mask = combined_mask(smask, dmask)
            features = forward_masked(frame, mask, model, state, trace=trace)
        detections = head(features, detector_head, spec, threshold=objectness_threshold)
        rel_err = max_abs = None
        if with_oracle:
            oracle_features = forward_dense(frame, model, oracle_state, frame_index=t)
            rel_err, max_abs = _feature_errors(features, oracle_features, mask)
        stats.append(FrameStats(
            index=t,
            full=decision is FrameDecision.FULL_FRAME,
            tokens_processed=trace.tokens_processed,
            cost=measure_run(trace),
            detections=detections,
            feature_rel_error=rel_err,
            feature_max_abs_selected=max_abs,
        ))
        previous_detections = detections

    evaluation = evaluate(
        [s.detections for s in stats], [list(ann.boxes) for ann in annotations]
    )
    return RunResult(
        frames=stats,
        evaluation=evaluation,
        period=schedule.period,
        static_keep_rate=schedule.static_keep_rate,
        dilation=schedule.dilation,
        mask_mode=mask_mode,
        num_tokens=spec.num_tokens,
        backbone="windowed" if model.config.num_windowed else "global",
    )


def run_oracle(frames, model: ViTBackbone, annotations: Optional[Sequence] = None,
               detector_head: Optional[DetectorHead] = None,
               objectness_threshold: float = 0.5):
    """Dense forward on every frame: the schedule-independent comparator.

    Returns (features per frame, detections per frame, head). Detections are
    only produced when a head is given or annotations allow calibrating one.
    """
    frames = np.asarray(frames)
    if len(frames) == 0:
        raise ValueError("empty sequence")
    spec = model.config.grid
    state = ReferenceState()
    features_per_frame = []
    detections_per_frame = []
    for t, frame in enumerate(frames):
        features = forward_dense(frame, model, state, frame_index=t)
        features_per_frame.append(features)
        if detector_head is None and annotations is not None and t == 0:
            detector_head = calibrate_head(features, annotations[0], spec,
                                           _num_classes(annotations))
        if detector_head is not None:
            detections_per_frame.append(
                head(features, detector_head, spec, threshold=objectness_threshold)
            )
    return features_per_frame, detections_per_frame, detector_head


def ablate_masks(frames, annotations, model: ViTBackbone, schedule: MaskSchedule,
                 static_annotations: Optional[Sequence] = None,
                 objectness_threshold: float = 0.5) -> dict:
    """Compare combined / static-only / dynamic-only at matched keep rates.

    The static-only run raises its keep rate to the combined run's mean
    masked-frame keep rate; the dynamic-only run drops the static mask.
    """
    combined = run_sequence(frames, annotations, model, schedule,
                            static_annotations=static_annotations, mask_mode="combined",
                            objectness_threshold=objectness_threshold)
    matched_rate = min(1.0, combined.masked_mean_tokens / combined.num_tokens)
    static_only = run_sequence(
        frames, annotations, model,
        MaskSchedule(schedule.period, matched_rate, schedule.dilation),
        static_annotations=static_annotations, mask_mode="static",
        objectness_threshold=objectness_threshold,
    )
    dynamic_only = run_sequence(
        frames, annotations, model,
        MaskSchedule(schedule.period, 0.0, schedule.dilation),
        static_annotations=static_annotations, mask_mode="dynamic",
        objectness_threshold=objectness_threshold,
    )
    return {"combined": combined, "static": static_only, "dynamic": dynamic_only}


def run_csv_row(result: RunResult, dataset: str = "synthetic") -> dict:
    """One summary-table row (means over all frames of the sequence)."""
    return {
        "dataset": dataset,
        "backbone": result.backbone,
        "tokens_processed": result.mean_tokens,
        "patch_keep_rate": result.mean_keep_rate,
        "period": result.period,
        "static_keep_rate": result.static_keep_rate,
        "precision": result.evaluation.precision,
        "recall": result.evaluation.recall,
        "gmacs": result.mean_gmacs,
        "buffer_mb": result.frames[0].cost.buffer_bytes / 1e6,
        "scatter_gather_ops": result.mean_scatter_gather,
    }
