"""Region masks over a token grid.

A frame is divided into square pixel regions (16x16 by default), one per
backbone token. Masks are boolean grids over those regions: the static mask
keeps the top-k regions of an object-frequency heatmap accumulated from
training boxes, the dynamic mask covers the previous frame's detections, and
the combined mask is their union. A schedule decides which frames skip
masking and are processed in full.

All operations here are pure functions over immutable inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass(frozen=True, order=True)
class BBox:
    """Axis-aligned pixel box, half-open on both axes.

    Covers pixels x1..x2-1 horizontally and y1..y2-1 vertically, so the
    covered area is exactly (x2-x1)*(y2-y1).
    """

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)):
                raise TypeError(f"box coordinate {name} must be an integer, got {type(v).__name__}")
            object.__setattr__(self, name, int(v))
        if not (0 <= self.x1 < self.x2):
            raise ValueError(f"invalid box x-extent: ({self.x1}, {self.x2})")
        if not (0 <= self.y1 < self.y2):
            raise ValueError(f"invalid box y-extent: ({self.y1}, {self.y2})")

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    def within(self, frame_height: int, frame_width: int) -> bool:
        return self.x2 <= frame_width and self.y2 <= frame_height

    def shifted(self, dx: int, dy: int) -> "BBox":
        return BBox(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class GridSpec:
    """Geometry tying a pixel frame to its token grid.

    Frame dimensions must be multiples of region_size; callers ingesting
    arbitrary frames pad bottom/right first (see pad_frame).
    """

    frame_height: int
    frame_width: int
    region_size: int = 16

    def __post_init__(self):
        if self.region_size < 1:
            raise ValueError("region_size must be >= 1")
        if self.frame_height < 0 or self.frame_width < 0:
            raise ValueError("frame dimensions must be non-negative")
        if self.frame_height % self.region_size or self.frame_width % self.region_size:
            raise ValueError(
                f"frame {self.frame_height}x{self.frame_width} is not a multiple of "
                f"region_size {self.region_size}; pad the frame first (see pad_frame)"
            )

    @property
    def frame_size(self) -> tuple:
        return (self.frame_height, self.frame_width)

    @property
    def rows(self) -> int:
        return self.frame_height // self.region_size

    @property
    def cols(self) -> int:
        return self.frame_width // self.region_size

    @property
    def num_tokens(self) -> int:
        return self.rows * self.cols

    def location(self, row: int, col: int) -> int:
        """Row-major token index of a grid cell."""
        return row * self.cols + col

    def region_box(self, location: int) -> BBox:
        """Pixel block covered by a token location."""
        r, c = divmod(location, self.cols)
        s = self.region_size
        return BBox(c * s, r * s, (c + 1) * s, (r + 1) * s)


@dataclass(frozen=True, eq=False)
class Heatmap:
    """Per-pixel count of how many training boxes cover each pixel."""

    values: np.ndarray  # (H, W) int64

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int64)
        if v.ndim != 2:
            raise ValueError("heatmap must be a 2-D pixel grid")
        if (v < 0).any():
            raise ValueError("heatmap counts must be non-negative")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def frame_size(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class RegionMask:
    """Boolean grid over regions; True cells are processed."""

    grid: np.ndarray  # (rows, cols) bool
    spec: GridSpec

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=bool)
        if g.shape != (self.spec.rows, self.spec.cols):
            raise ValueError(
                f"mask grid {g.shape} does not match spec grid "
                f"({self.spec.rows}, {self.spec.cols})"
            )
        g = g.copy()
        g.setflags(write=False)
        object.__setattr__(self, "grid", g)

    @property
    def keep_count(self) -> int:
        return int(self.grid.sum())

    @property
    def keep_rate(self) -> float:
        n = self.spec.num_tokens
        return self.keep_count / n if n else 0.0

    def true_locations(self) -> np.ndarray:
        """Row-major token indices of kept regions, strictly increasing."""
        return np.flatnonzero(self.grid.ravel())

    @classmethod
    def all_true(cls, spec: GridSpec) -> "RegionMask":
        return cls(np.ones((spec.rows, spec.cols), dtype=bool), spec)

    @classmethod
    def all_false(cls, spec: GridSpec) -> "RegionMask":
        return cls(np.zeros((spec.rows, spec.cols), dtype=bool), spec)


class FrameDecision(Enum):
    FULL_FRAME = "full"
    MASKED = "masked"


@dataclass(frozen=True)
class MaskSchedule:
    """Masking hyperparameters: refresh period, static keep rate, dilation."""

    period: int
    static_keep_rate: float
    dilation: int = 0

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")
        if not 0.0 <= self.static_keep_rate <= 1.0:
            raise ValueError("static_keep_rate must be in [0, 1]")
        if self.dilation < 0:
            raise ValueError("dilation must be >= 0")


@dataclass(frozen=True)
class FrameAnnotation:
    """Ground-truth boxes (and optional class ids) for one frame."""

    index: int
    boxes: tuple
    class_ids: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        if self.class_ids and len(self.class_ids) != len(self.boxes):
            raise ValueError("class_ids length must match boxes length")


def _iter_annotations(annotations) -> Iterable:
    """Accept FrameAnnotation objects or (frame_index, boxes) pairs."""
    for item in annotations:
        if isinstance(item, FrameAnnotation):
            yield item.index, item.boxes
        else:
            index, boxes = item
            yield index, boxes


def accumulate_heatmap(annotations, spec: GridSpec) -> Heatmap:
    """Accumulate box coverage counts over all annotated frames.

    Every box adds 1 to each pixel it covers (half-open extents). Boxes
    reaching outside the frame are rejected, naming the offending frame and
    box index.
    """
    h, w = spec.frame_size
    values = np.zeros((h, w), dtype=np.int64)
    for frame_index, boxes in _iter_annotations(annotations):
        for j, box in enumerate(boxes):
            if not box.within(h, w):
                raise ValueError(
                    f"frame {frame_index}: box {j} {box.as_list()} is outside the {h}x{w} frame"
                )
            values[box.y1:box.y2, box.x1:box.x2] += 1
    return Heatmap(values)


def region_scores(heatmap: Heatmap, spec: GridSpec) -> np.ndarray:
    """Sum heatmap counts over each region's pixel block.

    Returns a (rows, cols) float grid; region (r, c) scores the
    region_size x region_size block it covers.
    """
    if heatmap.frame_size != spec.frame_size:
        raise ValueError(
            f"heatmap {heatmap.frame_size} does not match spec frame {spec.frame_size}"
        )
    s = spec.region_size
    blocks = heatmap.values.reshape(spec.rows, s, spec.cols, s)
    return blocks.sum(axis=(1, 3)).astype(np.float64)


def static_mask(scores: np.ndarray, keep_rate: float, spec: GridSpec) -> RegionMask:
    """Keep the k = int(keep_rate * N) highest-scoring regions.

    k truncates the (float) product, matching int(k_s * N). Ties are broken
    in favour of the smaller row-major index so the selection is a pure
    function of the scores.
    """
    if not 0.0 <= keep_rate <= 1.0:
        raise ValueError("keep_rate must be in [0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (spec.rows, spec.cols):
        raise ValueError(
            f"score grid {scores.shape} does not match spec grid ({spec.rows}, {spec.cols})"
        )
    k = int(keep_rate * spec.num_tokens)
    # stable sort on negated scores: equal scores keep ascending index order
    order = np.argsort(-scores.ravel(), kind="stable")
    flat = np.zeros(spec.num_tokens, dtype=bool)
    flat[order[:k]] = True
    return RegionMask(flat.reshape(spec.rows, spec.cols), spec)


def dynamic_mask(boxes: Sequence[BBox], spec: GridSpec, dilation: int = 0) -> RegionMask:
    """Mark every region whose pixel block intersects any box.

    With dilation d > 0, additionally mark all regions within Chebyshev
    distance d of a marked region.
    """
    if dilation < 0:
        raise ValueError("dilation must be >= 0")
    h, w = spec.frame_size
    s = spec.region_size
    grid = np.zeros((spec.rows, spec.cols), dtype=bool)
    for j, box in enumerate(boxes):
        if not box.within(h, w):
            raise ValueError(f"box {j} {box.as_list()} is outside the {h}x{w} frame")
        r0, r1 = box.y1 // s, -(-box.y2 // s)
        c0, c1 = box.x1 // s, -(-box.x2 // s)
        grid[r0:r1, c0:c1] = True
    if dilation:
        grid = _dilate(grid, dilation)
    return RegionMask(grid, spec)


def _dilate(grid: np.ndarray, d: int) -> np.ndarray:
    rows, cols = grid.shape
    out = grid.copy()
    for dy in range(-d, d + 1):
        for dx in range(-d, d + 1):
            if dy == 0 and dx == 0:
                continue
            src_r = slice(max(0, -dy), rows - max(0, dy))
            dst_r = slice(max(0, dy), rows - max(0, -dy))
            src_c = slice(max(0, -dx), cols - max(0, dx))
            dst_c = slice(max(0, dx), cols - max(0, -dx))
            out[dst_r, dst_c] |= grid[src_r, src_c]
    return out


def combined_mask(static: RegionMask, dynamic: RegionMask) -> RegionMask:
    """Cell-wise union of two masks over the same grid."""
    if static.spec != dynamic.spec:
        raise ValueError(f"mask specs differ: {static.spec} vs {dynamic.spec}")
    return RegionMask(static.grid | dynamic.grid, static.spec)


def schedule_frame(t: int, sched: MaskSchedule) -> FrameDecision:
    """Full refresh at every period boundary, masked otherwise."""
    if t < 0:
        raise ValueError("frame index must be >= 0")
    return FrameDecision.FULL_FRAME if t % sched.period == 0 else FrameDecision.MASKED


def pad_frame(frame: np.ndarray, region_size: int) -> np.ndarray:
    """Zero-pad a frame on the bottom/right to multiples of region_size."""
    h, w = frame.shape[:2]
    ph = (-h) % region_size
    pw = (-w) % region_size
    if ph == 0 and pw == 0:
        return frame
    pad = [(0, ph), (0, pw)] + [(0, 0)] * (frame.ndim - 2)
    return np.pad(frame, pad, mode="constant")


# ---------------------------------------------------------------------------
# File formats: annotation JSON, mask JSON, PGM export
# ---------------------------------------------------------------------------

def save_annotations(path, frame_size, annotations: Sequence[FrameAnnotation]) -> None:
    """Write the annotation JSON document.

    Schema: {"frame_size": [H, W], "frames": [{"index": i, "boxes": [[x1,y1,x2,y2], ...],
    "classes": [...]?}, ...]}. "classes" is written only when class ids are present.
    """
    frames = []
    for ann in annotations:
        entry = {"index": ann.index, "boxes": [b.as_list() for b in ann.boxes]}
        if ann.class_ids:
            entry["classes"] = list(ann.class_ids)
        frames.append(entry)
    doc = {"frame_size": [int(frame_size[0]), int(frame_size[1])], "frames": frames}
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_annotations(path):
    """Read the annotation JSON document back.

    Returns ((H, W), [FrameAnnotation, ...]). Malformed JSON raises
    json.JSONDecodeError (with line context); schema violations raise
    ValueError naming the frame/box.
    """
    doc = json.loads(Path(path).read_text())
    try:
        h, w = (int(v) for v in doc["frame_size"])
        raw_frames = doc["frames"]
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"{path}: malformed annotation document: {e}") from e
    annotations = []
    for entry in raw_frames:
        index = int(entry["index"])
        boxes = []
        for j, quad in enumerate(entry.get("boxes", [])):
            if len(quad) != 4:
                raise ValueError(f"{path}: frame {index} box {j} does not have 4 coordinates")
            box = BBox(*(int(v) for v in quad))
            if not box.within(h, w):
                raise ValueError(
                    f"{path}: frame {index} box {j} {box.as_list()} is outside the {h}x{w} frame"
                )
            boxes.append(box)
        classes = tuple(int(c) for c in entry.get("classes", ()))
        annotations.append(FrameAnnotation(index, tuple(boxes), classes))
    return (h, w), annotations


def save_mask_json(path, mask: RegionMask) -> None:
    doc = {
        "frame_size": [mask.spec.frame_height, mask.spec.frame_width],
        "region_size": mask.spec.region_size,
        "grid": mask.grid.astype(int).tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_mask_json(path) -> RegionMask:
    doc = json.loads(Path(path).read_text())
    try:
        h, w = (int(v) for v in doc["frame_size"])
        spec = GridSpec(h, w, int(doc["region_size"]))
        grid = np.array(doc["grid"], dtype=bool)
    except (KeyError, TypeError, ValueError) as e:
        raise ValueError(f"{path}: malformed mask document: {e}") from e
    return RegionMask(grid, spec)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a 2-D uint8 array as binary PGM (P5, maxval 255)."""
    img = np.asarray(image, dtype=np.uint8)
    if img.ndim != 2:
        raise ValueError("PGM export needs a 2-D grayscale image")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.tobytes())


def write_mask_pgm(path, mask: RegionMask) -> None:
    """Export a mask as a frame-sized PGM: kept regions 255, dropped 0."""
    s = mask.spec.region_size
    image = np.kron(mask.grid.astype(np.uint8) * 255, np.ones((s, s), dtype=np.uint8))
    write_pgm(path, image)


def write_heatmap_pgm(path, heatmap: Heatmap) -> None:
    """Export a heatmap as PGM, counts scaled linearly onto 0..255."""
    v = heatmap.values
    peak = int(v.max()) if v.size else 0
    image = (v * 255 // peak).astype(np.uint8) if peak > 0 else np.zeros_like(v, dtype=np.uint8)
    write_pgm(path, image)
