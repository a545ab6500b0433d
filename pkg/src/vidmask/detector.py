"""Per-token detection head and greedy box-matching evaluation.

The head is a linear probe on backbone features: a logistic objectness score
per token plus a linear classifier. Active tokens are grouped into connected
components on the region grid and each component becomes one detection.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .masks import BBox, GridSpec

_OFFSETS_4 = ((-1, 0), (1, 0), (0, -1), (0, 1))
_OFFSETS_8 = _OFFSETS_4 + ((-1, -1), (-1, 1), (1, -1), (1, 1))


@dataclass(frozen=True)
class Detection:
    box: BBox
    score: float
    class_id: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"detection score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class EvalResult:
    precision: float
    recall: float
    f1: float
    matches: int
    num_detections: int
    num_ground_truth: int
    iou_threshold: float


@dataclass(eq=False)
class DetectorHead:
    """Linear probe weights: objectness (L,) and per-class logits (L, C)."""

    obj_weight: np.ndarray
    obj_bias: float
    cls_weight: np.ndarray  # (L, C)
    cls_bias: np.ndarray  # (C,)

    @property
    def num_classes(self) -> int:
        return self.cls_weight.shape[1]


def fit_linear_probe(features: np.ndarray, targets: np.ndarray, ridge: float = 0.1):
    """Least-squares fit of targets = features @ w + b.

    ``ridge`` shrinks the weights (bias unpenalized): with as many unknowns
    as tokens a plain fit interpolates the calibration frame exactly and
    generalizes poorly to later frames.
    """
    features = np.asarray(features, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    design = np.concatenate([features, np.ones((features.shape[0], 1))], axis=1)
    if ridge > 0:
        penalty = math.sqrt(ridge) * np.eye(design.shape[1])
        penalty[-1, -1] = 0.0
        design = np.concatenate([design, penalty])
        targets = np.concatenate([targets, np.zeros((design.shape[1],) + targets.shape[1:])])
    solution, *_ = np.linalg.lstsq(design, targets, rcond=None)
    return solution[:-1], solution[-1]


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two half-open pixel boxes; 0 when disjoint."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(iw, 0) * max(ih, 0)
    union = a.area + b.area - inter
    return inter / union if union else 0.0


def _connected_components(active: np.ndarray, connectivity: int):
    """Components of True cells, discovered in row-major scan order.

    Each component's cell list starts with its row-major-first cell, so the
    output ordering is independent of any internal iteration details.
    """
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    offsets = _OFFSETS_4 if connectivity == 4 else _OFFSETS_8
    rows, cols = active.shape
    seen = np.zeros_like(active, dtype=bool)
    components = []
    for r in range(rows):
        for c in range(cols):
            if not active[r, c] or seen[r, c]:
                continue
            queue = deque([(r, c)])
            seen[r, c] = True
            cells = []
            while queue:
                cr, cc = queue.popleft()
                cells.append((cr, cc))
                for dr, dc in offsets:
                    nr, nc = cr + dr, cc + dc
                    if 0 <= nr < rows and 0 <= nc < cols and active[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
            components.append(sorted(cells))
    return components


def head(features: np.ndarray, weights: DetectorHead, grid: GridSpec,
         threshold: float = 0.5, connectivity: int = 4):
    """Turn backbone features into detections.

    Per-token objectness is the logistic of a linear projection; tokens above
    the threshold are grouped into grid-connected components. Each component
    yields one detection: the pixel bounding rectangle of its regions, the
    component's max objectness, and the majority vote of per-token class
    predictions (ties to the smaller class id).
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != grid.num_tokens:
        raise ValueError(
            f"features have {features.shape[0]} rows, grid has {grid.num_tokens} tokens"
        )
    objectness = expit(features @ weights.obj_weight + weights.obj_bias)
    labels = np.argmax(features @ weights.cls_weight + weights.cls_bias, axis=1)
    active = (objectness > threshold).reshape(grid.rows, grid.cols)
    s = grid.region_size
    detections = []
    for cells in _connected_components(active, connectivity):
        rs = [r for r, _ in cells]
        cs = [c for _, c in cells]
        box = BBox(min(cs) * s, min(rs) * s, (max(cs) + 1) * s, (max(rs) + 1) * s)
        idx = [grid.location(r, c) for r, c in cells]
        score = float(objectness[idx].max())
        votes = np.bincount(labels[idx], minlength=weights.num_classes)
        detections.append(Detection(box, score, int(np.argmax(votes))))
    return detections


def _match_frame(detections: Sequence[Detection], ground_truth: Sequence[BBox],
                 iou_threshold: float) -> int:
    """Greedy matching, best score first; each ground truth matches once."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    taken = [False] * len(ground_truth)
    matches = 0
    for i in order:
        best_j, best_iou = -1, 0.0
        for j, gt in enumerate(ground_truth):
            if taken[j]:
                continue
            v = iou(detections[i].box, gt)
            if v > best_iou:
                best_j, best_iou = j, v
        if best_j >= 0 and best_iou >= iou_threshold:
            taken[best_j] = True
            matches += 1
    return matches


def evaluate(detections_per_frame, ground_truth_per_frame, iou_threshold: float = 0.5) -> EvalResult:
    """Aggregate greedy precision/recall/F1 over aligned frame sequences.

    Undefined ratios (no detections, or no ground truth) are reported as 0.
    """
    if len(detections_per_frame) != len(ground_truth_per_frame):
        raise ValueError(
            f"{len(detections_per_frame)} detection frames vs "
            f"{len(ground_truth_per_frame)} ground-truth frames"
        )
    matches = num_dets = num_gts = 0
    for dets, gts in zip(detections_per_frame, ground_truth_per_frame):
        num_dets += len(dets)
        num_gts += len(gts)
        matches += _match_frame(dets, gts, iou_threshold)
    precision = matches / num_dets if num_dets else 0.0
    recall = matches / num_gts if num_gts else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalResult(precision, recall, f1, matches, num_dets, num_gts, iou_threshold)


# ---------------------------------------------------------------------------
# Detection JSON (also the dynamic-mask input format)
# ---------------------------------------------------------------------------

def detections_to_jsonable(detections_per_frame) -> list:
    return [
        {
            "index": i,
            "detections": [
                {"box": d.box.as_list(), "score": d.score, "class": d.class_id}
                for d in dets
            ],
        }
        for i, dets in enumerate(detections_per_frame)
    ]


def save_detections(path, detections_per_frame) -> None:
    doc = {"frames": detections_to_jsonable(detections_per_frame)}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_detections(path):
    """Read per-frame detections back as lists of Detection."""
    doc = json.loads(Path(path).read_text())
    frames = []
    for entry in doc["frames"]:
        dets = [
            Detection(BBox(*d["box"]), float(d["score"]), int(d["class"]))
            for d in entry["detections"]
        ]
        frames.append(dets)
    return frames
